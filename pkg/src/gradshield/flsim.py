"""Synchronous FedAvg rounds with one honest-but-curious client.

The compromised client trains like everyone else and never alters protocol
messages. It only probes its own post-broadcast copy with an evasion attack
and replays the resulting samples against a victim's copy.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import SagaConfig, canonical_shields, saga_attack
from .data import SyntheticDataset
from .models import EnsembleModel, TrainingDiverged, accuracy, choose_members, predict, train_sgd


@dataclass(frozen=True)
class FlConfig:
    clients: int = 4
    local_epochs: int = 1
    rounds: int = 3
    compromised: int | None = 0
    victim: int | None = None  # defaults to the next client
    attack_every_round: bool = False
    shield: str = "none"
    probe_samples: int = 64
    lr: float = 0.02
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    attack: SagaConfig = field(default_factory=SagaConfig)

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("need at least one client")
        if self.compromised is not None and not 0 <= self.compromised < self.clients:
            raise ValueError(f"compromised id {self.compromised} outside 0..{self.clients - 1}")
        if self.victim is not None and not 0 <= self.victim < self.clients:
            raise ValueError(f"victim id {self.victim} outside 0..{self.clients - 1}")

    @property
    def victim_id(self) -> int:
        if self.victim is not None:
            return self.victim
        return ((self.compromised or 0) + 1) % self.clients


@dataclass
class RoundLog:
    round: int
    clean_accuracy: dict
    attack_success: float | None = None
    replication_rate: float | None = None
    global_digest: str = ""
    client_digests: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def fedavg(updates):
    """Elementwise mean of parameter stores (dicts of arrays).

    Computed as ``u0 + sum(u_k - u0) / K`` so identical updates come back
    bit-for-bit unchanged.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    keys = set(updates[0])
    for u in updates[1:]:
        if set(u) != keys:
            raise ValueError("parameter stores hold different names")
        for k in keys:
            if np.shape(u[k]) != np.shape(updates[0][k]):
                raise ValueError(f"shape mismatch for {k}: {np.shape(u[k])} vs {np.shape(updates[0][k])}")
    out = {}
    for k in sorted(keys):
        base = np.asarray(updates[0][k], dtype=np.float64)
        delta = sum(np.asarray(u[k], dtype=np.float64) - base for u in updates[1:])
        out[k] = base + delta / len(updates) if len(updates) > 1 else base.copy()
    return out


def digest(stores) -> str:
    h = hashlib.sha256()
    for store in stores:
        for k in sorted(store):
            h.update(k.encode())
            h.update(np.ascontiguousarray(store[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def shards(n: int, clients: int, seed: int):
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(n)
    return [np.sort(perm[c::clients]) for c in range(clients)]


def client_rng(seed: int, rnd: int, client: int, member: int) -> np.random.Generator:
    return np.random.default_rng([seed, rnd, client, member])


def init_global(members, seed: int):
    return [m.init_params(np.random.default_rng([seed, 0x1217, k])) for k, m in enumerate(members)]


def _query(members, stores, x, rng):
    preds = np.stack([predict(m, p, x) for m, p in zip(members, stores)])
    pick = choose_members(len(x), rng, len(members))
    return preds[pick, np.arange(len(x))]


def run_rounds(cfg: FlConfig, members, dataset: SyntheticDataset,
               test: SyntheticDataset | None = None, state: dict | None = None):
    """Simulate ``cfg.rounds`` rounds; returns one :class:`RoundLog` per round.

    ``members`` are the built ensemble members, e.g. ``(build_tiny_vit(..), build_tiny_cnn(..))``.
    When ``state`` is a dict it receives the final global and client stores.
    """
    members = tuple(members)
    test = test if test is not None else dataset
    parts = shards(len(dataset), cfg.clients, cfg.seed)
    global_stores = init_global(members, cfg.seed)
    logs = []
    for rnd in range(cfg.rounds):
        copies = [[{k: v.copy() for k, v in s.items()} for s in global_stores] for _ in range(cfg.clients)]
        for c in range(cfg.clients):
            shard = dataset.subset(parts[c])
            if len(shard) == 0:
                continue
            for k, m in enumerate(members):
                try:
                    copies[c][k], _ = train_sgd(m, copies[c][k], shard, cfg.lr, cfg.local_epochs,
                                                client_rng(cfg.seed, rnd, c, k), batch_size=cfg.batch_size,
                                                momentum=cfg.momentum)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"client {c}, round {rnd}, {m.kind}: {exc}") from exc
        global_stores = [fedavg([copies[c][k] for c in range(cfg.clients)]) for k in range(len(members))]
        copies = [[{k: v.copy() for k, v in s.items()} for s in global_stores] for _ in range(cfg.clients)]

        qrng = np.random.default_rng([cfg.seed, rnd, 0x9E7])
        ens_pred = _query(members, global_stores, test.images, qrng)
        clean = {m.kind: accuracy(m, p, test) for m, p in zip(members, global_stores)}
        clean["ensemble"] = float(np.mean(ens_pred == test.labels))
        log = RoundLog(rnd, clean, global_digest=digest(global_stores),
                       client_digests=[digest(cp) for cp in copies])

        last = rnd == cfg.rounds - 1
        if cfg.compromised is not None and (cfg.attack_every_round or last):
            log.attack_success, log.replication_rate = _probe_and_replay(cfg, members, copies, dataset, parts, rnd)
        logs.append(log)
    if state is not None:
        state["global"] = global_stores
        state["clients"] = copies
    return logs


def _probe_and_replay(cfg, members, copies, dataset, parts, rnd):
    own = dataset.subset(parts[cfg.compromised][: cfg.probe_samples])
    if len(own) == 0:
        return None, None
    attacker = EnsembleModel(members, tuple(copies[cfg.compromised]), seed=cfg.seed)
    shields = canonical_shields(attacker, cfg.shield)
    run_cfg = dataclasses.replace(cfg.attack, seed=int(np.random.default_rng([cfg.seed, rnd, 0xA77]).integers(2**31)))
    outcome = saga_attack(attacker, shields, own.images, own.labels, run_cfg,
                          selection_rng=np.random.default_rng([cfg.seed, rnd, 0x5E1]))
    local = float(np.mean(outcome.success))
    victim_pred = _query(members, copies[cfg.victim_id], outcome.x_adv,
                         np.random.default_rng([cfg.seed, rnd, 0x5E1]))
    replicated = float(np.mean(victim_pred != own.labels))
    return local, replicated
