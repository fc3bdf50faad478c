"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured values.
"""

import contextlib
import time

import numpy as np
import pytest

from gradshield.attack import run_grid
from gradshield.autodiff import backward, finite_diff, forward, local_jacobian
from gradshield.experiment import LARGE_VIT, ExperimentConfig, build_members, parse_config, run_experiment
from gradshield.flsim import FlConfig, run_rounds
from gradshield.graph import GraphBuilder
from gradshield.models import VitConfig, accuracy, build_tiny_vit
from gradshield.shield import (AccessDenied, AttackerView, Selection, ShieldNotCut, attacker_gradient,
                               mask_frontier, memory_report, select, shield)

from graphgen import OP_CASES, closure_oracle, op_case, random_graph, random_structure

RESULTS = []

# Frozen after one calibration run on the default config (seed 0).
DROP_NONE = 0.30  # (a) no-shield ensemble must lose at least this much accuracy
SLACK_ENSEMBLE = 0.05  # (b) ensemble-shield may trail the random baseline by at most this much


@contextlib.contextmanager
def criterion(n, title):
    state = {"detail": ""}
    try:
        yield state
    except BaseException:
        RESULTS.append((n, title, False, state["detail"] or "assertion failed"))
        raise
    RESULTS.append((n, title, True, state["detail"]))


def _grad_agrees(g, bind):
    adj = backward(g, forward(g, bind))
    for nd in g.leaves:
        fd = finite_diff(g, bind, nd.id if nd.name == "" else nd.name, h=1e-3)
        if not np.allclose(adj[nd.id], fd, rtol=1e-3, atol=1e-5):
            return False
    return True


def test_1_gradient_correctness():
    with criterion(1, "backward vs central differences") as c:
        start = time.perf_counter()
        failures = []
        for name in sorted(OP_CASES):
            g, bind = op_case(name, np.random.default_rng(100 + len(name)))
            if not _grad_agrees(g, bind):
                failures.append(name)
        rng = np.random.default_rng(2024)
        sizes = []
        for k in range(50):
            g, bind = random_graph(rng, max_nodes=8)
            sizes.append(g.n)
            if not _grad_agrees(g, bind):
                failures.append(f"graph{k}")
        elapsed = time.perf_counter() - start
        c["detail"] = (f"{len(OP_CASES)} op kinds + 50 graphs (max {max(sizes)} nodes), "
                       f"{len(failures)} failures, {elapsed:.1f}s")
        assert max(sizes) <= 8
        assert not failures, failures
        assert elapsed < 60


def test_2_shield_closure_oracle():
    with criterion(2, "shield() equals worklist closure") as c:
        rng = np.random.default_rng(77)
        mismatches = 0
        for _ in range(200):
            g, sel = random_structure(rng, max_nodes=10)
            e = shield(g, Selection(sel))
            if (set(e.values), set(e.inputs), set(e.jacobians)) != closure_oracle(g, sel):
                mismatches += 1
        c["detail"] = f"200 random pairs, {mismatches} mismatches"
        assert mismatches == 0


def _opacity(model, params, x, onehot):
    g = model.graph
    v = forward(g, model.bindings(params, x, onehot))
    a = backward(g, v)
    ref_v = {i: np.array(val, copy=True) for i, val in v.items()}
    ref_a = {i: np.array(val, copy=True) for i, val in a.items()}
    e = shield(g, model.selection, v)
    view = AttackerView(g, e, v, a)
    leaks = 0
    for nd in g:
        i = nd.id
        for getter, masked, ref in ((view.value, e.masks_value(i), ref_v), (view.adjoint, e.masks_adjoint(i), ref_a)):
            try:
                got = getter(i)
            except AccessDenied:
                leaks += 0 if masked else 1
                continue
            leaks += 1 if masked else 0
            if not masked and not np.array_equal(got, ref[i]):
                leaks += 1
    for edge in g.edges():
        masked = e.masks_jacobian(edge)
        try:
            J = view.jacobian(edge)
        except AccessDenied:
            leaks += 0 if masked else 1
            continue
        leaks += 1 if masked else 0
        if not masked and not np.array_equal(J, local_jacobian(g, v, edge)):
            leaks += 1
    attacker_gradient(view)
    # defender side: recompute with the enclave in place and compare bit-for-bit
    v2 = forward(g, model.bindings(params, x, onehot))
    a2 = backward(g, v2)
    same = all(np.array_equal(v2[i], ref_v[i]) and np.array_equal(v[i], ref_v[i]) for i in ref_v)
    same &= all(np.array_equal(a2[i], ref_a[i]) for i in ref_a)
    return leaks, same, len(e.values) + len(e.jacobians) + len(e.inputs)


def test_3_opacity_and_defender_invariance():
    with criterion(3, "opacity + defender invariance") as c:
        parts = []
        ok = True
        for m in build_members(ExperimentConfig()):
            p = m.init_params(np.random.default_rng(3))
            x = np.random.default_rng(4).uniform(size=(3, 16, 16))
            leaks, same, masked = _opacity(m, p, x, np.eye(4)[1])
            parts.append(f"{m.kind}: {masked} masked items, {leaks} policy violations, bit-identical={same}")
            ok &= leaks == 0 and same
        c["detail"] = "; ".join(parts)
        assert ok


def test_4_chain_rule_cut():
    with criterion(4, "mask_frontier cut detection") as c:
        owners = {}
        for m in build_members(ExperimentConfig()):
            owners[m.kind] = m.graph[mask_frontier(m.graph, shield(m.graph, m.selection)).owner].name
        gb = GraphBuilder()
        x = gb.input("x", (3,))
        a = gb.op("tanh", x, name="a")
        b = gb.op("square", x, name="b")
        gb.op("sum", gb.op("add", a, b))
        g = gb.build()
        with pytest.raises(ShieldNotCut, match="not fully cut"):
            mask_frontier(g, shield(g, select(g, ["a"])))
        c["detail"] = f"owners {owners}; one-branch selection reports 'not fully cut'"


@pytest.fixture(scope="module")
def grid(toy):
    cfg = toy.cfg
    start = time.perf_counter()
    report, outcomes = run_grid(toy.ensemble, toy.test, cfg.attack.saga(cfg.seed), repeats=cfg.attack.repeats,
                                seed=cfg.seed)
    return report, outcomes, time.perf_counter() - start


def test_5_attack_efficacy_ordering(toy, grid):
    with criterion(5, "attack-efficacy ordering") as c:
        report, _, elapsed = grid
        get = report.get
        clean = {m.kind: accuracy(m, p, toy.test) for m, p in zip(toy.members, toy.params)}
        a = get("Ensemble", "None") <= get("Ensemble", "Clean") - DROP_NONE
        b = get("Ensemble", "Ensemble") >= get("Ensemble", "Random") - SLACK_ENSEMBLE
        c1 = get("CNN", "ViT") < get("CNN", "None")
        c2 = get("ViT", "CNN") < get("ViT", "None")
        c["detail"] = (f"clean vit={clean['vit']:.3f} cnn={clean['cnn']:.3f}, n={len(toy.test)}; "
                       f"(a) none {get('Ensemble', 'None'):.3f} <= {get('Ensemble', 'Clean') - DROP_NONE:.3f} {a}; "
                       f"(b) ensemble {get('Ensemble', 'Ensemble'):.3f} >= "
                       f"{get('Ensemble', 'Random') - SLACK_ENSEMBLE:.3f} {b}; "
                       f"(c) cnn {get('CNN', 'ViT'):.3f} < {get('CNN', 'None'):.3f} {c1}, "
                       f"vit {get('ViT', 'CNN'):.3f} < {get('ViT', 'None'):.3f} {c2}; {elapsed:.0f}s")
        assert min(clean.values()) >= 0.95 and len(toy.test) == 256
        assert toy.cfg.attack.steps == 10 and toy.cfg.attack.repeats == 10
        assert a and b and c1 and c2
        assert elapsed < 600


def test_6_budget_invariant(toy, grid):
    with criterion(6, "l-inf budget and pixel range") as c:
        _, outcomes, _ = grid
        budget = toy.cfg.attack.steps * toy.cfg.attack.step
        total = bad = 0
        for outs in outcomes.values():
            for o in outs:
                total += len(o.linf)
                in_range = (o.x_adv >= 0).all(axis=(1, 2, 3)) & (o.x_adv <= 1).all(axis=(1, 2, 3))
                bad += int(np.sum((o.linf > budget + 1e-12) | ~in_range))
        c["detail"] = f"{total} samples, {bad} violations, budget {budget:g}"
        assert bad == 0 and total > 0


def test_7_memory_accounting():
    with criterion(7, "enclave memory accounting") as c:
        gb = GraphBuilder()
        x = gb.input("x", (10,))
        u1 = gb.op("softmax", x, name="u1")
        gb.op("sum", gb.op("tanh", u1))
        g = gb.build()
        chain = memory_report(shield(g, select(g, ["u1"])))["total_bytes"]

        gb = GraphBuilder()
        x = gb.input("x", (3,))
        W = gb.param("W", (3, 2))
        gb.op("sum", gb.op("linear", x, W, name="u"))
        g = gb.build()
        linear = memory_report(shield(g, select(g, ["u"])))["total_bytes"]  # (2 + 6) * 2 + 6 elements

        m = build_tiny_vit(LARGE_VIT)
        large = memory_report(shield(m.graph, m.selection))["total_bytes"]
        c["detail"] = f"chain {chain} B (expect 480), linear {linear} B (expect 88), ViT-L/16 {large / 1e6:.2f} MB"
        assert chain == 480 and linear == 88
        assert 8e6 <= large <= 17e6


def test_8_fl_passivity_and_replication():
    with criterion(8, "FL passivity + replication") as c:
        from gradshield.data import gen_data

        members = build_members(ExperimentConfig())
        train, test = gen_data(4, 32, 16, 1), gen_data(4, 8, 16, 2)
        attack = ExperimentConfig().attack.saga(0)
        base = dict(clients=3, rounds=2, local_epochs=2, seed=9, attack=attack, probe_samples=32)
        with_attacker, honest = {}, {}
        logs = run_rounds(FlConfig(compromised=0, attack_every_round=True, **base), members, train, test,
                          state=with_attacker)
        run_rounds(FlConfig(compromised=None, **base), members, train, test, state=honest)
        identical = all(np.array_equal(with_attacker[key][c_][k][name], honest[key][c_][k][name])
                        for key in ("clients",) for c_ in range(1, 3) for k in range(2)
                        for name in honest[key][c_][k])
        identical &= all(np.array_equal(with_attacker["global"][k][n], honest["global"][k][n])
                         for k in range(2) for n in honest["global"][k])
        pairs = [(log.attack_success, log.replication_rate) for log in logs]
        c["detail"] = f"honest params bit-identical={identical}; (success, replication) per round {pairs}"
        assert identical
        assert all(s == r for s, r in pairs)
        assert any(s > 0 for s, _ in pairs)


def test_9_determinism(tmp_path):
    with criterion(9, "run_experiment determinism") as c:
        text = "seed = 4\n[data]\ntrain_per_class = 32\ntest_per_class = 8\n[train]\nepochs = 5\n" \
               "[attack]\nrepeats = 2\n[fl]\nclients = 2\nrounds = 1\nlocal_epochs = 1\nprobe_samples = 8\n"
        cfg = parse_config(text)
        a = run_experiment(cfg, tmp_path / "a")
        b = run_experiment(cfg, tmp_path / "b")
        diffs = [k for k in a if a[k].read_bytes() != b[k].read_bytes()]
        c["detail"] = f"{len(a)} artifacts compared, {len(diffs)} differ"
        assert not diffs and {"csv", "json"} <= set(a)
