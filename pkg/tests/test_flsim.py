import json

import numpy as np
import pytest

from gradshield.attack import SagaConfig
from gradshield.data import gen_data
from gradshield.flsim import FlConfig, client_rng, fedavg, init_global, run_rounds, shards
from gradshield.models import CnnConfig, VitConfig, build_tiny_cnn, build_tiny_vit, train_sgd

ATTACK = SagaConfig(step=0.02, alpha_k=0.99, upsample_range=1e-2)


@pytest.fixture(scope="module")
def setup():
    members = (build_tiny_vit(VitConfig()), build_tiny_cnn(CnnConfig()))
    return members, gen_data(4, 32, 16, 1), gen_data(4, 8, 16, 2)


def test_fedavg_identical_updates_unchanged():
    u = {"w": np.random.default_rng(0).normal(size=(3, 4))}
    out = fedavg([u, {"w": u["w"].copy()}, {"w": u["w"].copy()}])
    assert np.array_equal(out["w"], u["w"])


def test_fedavg_arithmetic():
    assert fedavg([{"a": np.array([2.0])}, {"a": np.array([4.0])}])["a"].tolist() == [3.0]


def test_fedavg_matches_naive_loop():
    rng = np.random.default_rng(1)
    stores = [{"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)} for _ in range(5)]
    out = fedavg(stores)
    for k in ("a", "b"):
        ref = np.zeros_like(stores[0][k])
        for idx in np.ndindex(ref.shape):
            ref[idx] = sum(s[k][idx] for s in stores) / len(stores)
        np.testing.assert_allclose(out[k], ref, rtol=1e-13, atol=1e-15)


def test_fedavg_rejects_mismatch():
    with pytest.raises(ValueError):
        fedavg([{"a": np.ones(2)}, {"a": np.ones(3)}])
    with pytest.raises(ValueError):
        fedavg([{"a": np.ones(2)}, {"b": np.ones(2)}])
    with pytest.raises(ValueError):
        fedavg([])


def test_config_validation():
    with pytest.raises(ValueError):
        FlConfig(clients=2, compromised=2)
    with pytest.raises(ValueError):
        FlConfig(clients=0)
    assert FlConfig(clients=3, compromised=2).victim_id == 0


def test_shards_partition():
    parts = shards(50, 4, 0)
    merged = np.sort(np.concatenate(parts))
    assert np.array_equal(merged, np.arange(50))


def test_single_client_is_centralised_training(setup):
    members, train, test = setup
    cfg = FlConfig(clients=1, rounds=1, local_epochs=2, compromised=None, seed=3)
    state = {}
    run_rounds(cfg, members, train, test, state=state)
    init = init_global(members, 3)
    for k, m in enumerate(members):
        ref, _ = train_sgd(m, init[k], train, cfg.lr, 2, client_rng(3, 0, 0, k))
        for name in ref:
            assert np.array_equal(state["global"][k][name], ref[name])


def test_logs_are_json_lines_and_broadcast_consistent(setup):
    members, train, test = setup
    logs = run_rounds(FlConfig(clients=3, rounds=2, attack=ATTACK, probe_samples=16), members, train, test)
    assert [log.round for log in logs] == [0, 1]
    assert logs[0].attack_success is None and logs[1].attack_success is not None
    for log in logs:
        assert len(set(log.client_digests)) == 1
        assert json.loads(log.to_json())["round"] == log.round


def test_ensemble_shield_does_not_raise_replication(setup):
    members = setup[0]
    train, test = gen_data(4, 64, 16, 1), gen_data(4, 16, 16, 2)
    rates = {}
    for setting in ("none", "ensemble"):
        cfg = FlConfig(clients=4, rounds=3, local_epochs=3, shield=setting, attack=ATTACK, seed=5)
        rates[setting] = run_rounds(cfg, members, train, test)[-1].replication_rate
    assert rates["ensemble"] <= rates["none"]
