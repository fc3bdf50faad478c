"""Experiment configuration and the end-to-end pipeline behind the CLI.

Configs are TOML. Every section is optional and falls back to the toy
defaults below; unknown keys and ill-typed values are rejected with the
offending line and field named. Every random draw derives from ``seed``.

    seed = 0
    workers = 1

    [data]            # classes, train_per_class, test_per_class, image, channels, noise, path
    [vit]             # VitConfig fields
    [cnn]             # CnnConfig fields
    [train]           # lr, epochs, batch_size, momentum
    [attack]          # step, steps, alpha_k, upsample, upsample_range, repeats, settings
    [fl]              # FlConfig fields; section presence enables the FL run
"""

from __future__ import annotations

import dataclasses
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as graphmod
from .attack import SETTINGS, SagaConfig, run_grid
from .data import SyntheticDataset, gen_data, load_dataset, save_dataset
from .flsim import FlConfig, run_rounds
from .models import (CnnConfig, EnsembleModel, VitConfig, build_tiny_cnn, build_tiny_vit, load_params,
                     save_params, train_sgd)
from .shield import memory_report, shield

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, msg, path=None, line=None, key=None):
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}"
        if key is not None:
            where += f" [{key}]"
        super().__init__(f"{where}: {msg}")
        self.line, self.key = line, key


@dataclass(frozen=True)
class DataSpec:
    classes: int = 4
    train_per_class: int = 128
    test_per_class: int = 64
    image: int = 16
    channels: int = 3
    noise: float = 0.1
    path: str | None = None  # directory holding train/ and test/ datasets in container format


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 0.02
    epochs: int = 15
    batch_size: int = 32
    momentum: float = 0.9


@dataclass(frozen=True)
class AttackSpec:
    step: float = 0.02
    steps: int = 10
    alpha_k: float = 0.99
    upsample: bool = True
    upsample_range: float = 1e-2
    repeats: int = 10
    settings: tuple = SETTINGS

    def saga(self, seed: int) -> SagaConfig:
        return SagaConfig(self.step, self.steps, self.alpha_k, self.upsample, self.upsample_range, seed)


@dataclass(frozen=True)
class FlSpec:
    clients: int = 4
    local_epochs: int = 3
    rounds: int = 3
    compromised: int | None = 0
    victim: int | None = None
    attack_every_round: bool = False
    shield: str = "none"
    probe_samples: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    data: DataSpec = field(default_factory=DataSpec)
    vit: VitConfig = field(default_factory=VitConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    fl: FlSpec | None = None
    base_dir: str = "."

    def stream(self, *tag) -> int:
        """A 32-bit seed derived from ``seed`` and a fixed tag."""
        return int(np.random.SeedSequence([self.seed, *tag]).generate_state(1)[0])

    def fl_config(self) -> FlConfig:
        spec = self.fl or FlSpec()
        return FlConfig(**dataclasses.asdict(spec), lr=self.train.lr, batch_size=self.train.batch_size,
                        momentum=self.train.momentum, seed=self.seed, attack=self.attack.saga(self.seed))


_SECTIONS = {"data": DataSpec, "vit": VitConfig, "cnn": CnnConfig, "train": TrainSpec,
             "attack": AttackSpec, "fl": FlSpec}
_TOP = {"seed": int, "workers": int}


def _key_lines(text):
    """Map ``(section, key)`` to the 1-based line declaring it."""
    out, section = {}, ""
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if m:
            section = m.group(1)
            out.setdefault((section, None), n)
            continue
        m = re.match(r"([A-Za-z0-9_-]+)\s*=", s)
        if m:
            out[(section, m.group(1))] = n
    return out


def _coerce(value, typ: str, err):
    """Check ``value`` against a dataclass annotation string such as ``int | None``."""
    base, _, opt = typ.partition(" | ")
    if value is None or (opt == "None" and value == "none"):
        if opt == "None":
            return None
        raise err("a value is required")
    ok = {"bool": lambda v: isinstance(v, bool),
          "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
          "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
          "str": lambda v: isinstance(v, str),
          "tuple": lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v)}[base]
    if not ok(value):
        raise err(f"expected {base}, got {value!r}")
    if base == "float":
        return float(value)
    if base == "tuple":
        return tuple(value)
    return value


def _section(cls, table, lines, name, path):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in table.items():
        line = lines.get((name, key), lines.get((name, None)))

        def err(msg, key=key, line=line):
            return ConfigError(msg, path, line, f"{name}.{key}")

        if key not in fields:
            raise err(f"unknown field; expected one of {sorted(fields)}")
        kwargs[key] = _coerce(value, str(fields[key].type), err)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), path, lines.get((name, None)), name) from exc


def parse_config(text: str, path=None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", path, int(m.group(1)) if m else None) from exc
    lines = _key_lines(text)
    kwargs = {}
    for key, value in raw.items():
        line = lines.get(("", key), lines.get((key, None)))
        if key in _TOP:
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"expected a non-negative integer, got {value!r}", path, line, key)
            kwargs[key] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError("expected a table", path, line, key)
            kwargs[key] = _section(_SECTIONS[key], value, lines, key, path)
        else:
            raise ConfigError(f"unknown key; expected one of {sorted(_TOP) + sorted(_SECTIONS)}", path, line, key)
    base = Path(path).parent if path else Path(".")
    cfg = ExperimentConfig(**kwargs, base_dir=str(base))
    _validate(cfg, lines, path)
    return cfg


def _validate(cfg: ExperimentConfig, lines, path):
    d = cfg.data

    def at(section, key):
        return lines.get((section, key), lines.get((section, None)))

    for sec, mc in (("vit", cfg.vit), ("cnn", cfg.cnn)):
        for key, want in (("image", d.image), ("channels", d.channels), ("classes", d.classes)):
            if getattr(mc, key) != want:
                raise ConfigError(f"{sec}.{key}={getattr(mc, key)} disagrees with data.{key}={want}",
                                  path, at(sec, key), f"{sec}.{key}")
    for s in cfg.attack.settings:
        if s not in SETTINGS:
            raise ConfigError(f"unknown shield setting {s!r}; expected a subset of {list(SETTINGS)}",
                              path, at("attack", "settings"), "attack.settings")
    if cfg.attack.repeats < 1:
        raise ConfigError("need at least one repeat", path, at("attack", "repeats"), "attack.repeats")
    if d.path is not None:
        root = Path(cfg.base_dir) / d.path
        for part in ("train", "test"):
            if not (root / part / "dataset.json").is_file():
                raise ConfigError(f"missing dataset {root / part}", path, at("data", "path"), "data.path")
    if cfg.fl is not None:
        try:
            cfg.fl_config()
        except ValueError as exc:
            raise ConfigError(str(exc), path, at("fl", None), "fl") from exc
        if cfg.fl.shield not in SETTINGS:
            raise ConfigError(f"unknown shield setting {cfg.fl.shield!r}", path, at("fl", "shield"), "fl.shield")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("no such file", p)
    return parse_config(p.read_text(), p)


# --- pipeline steps --------------------------------------------------------------------

def make_datasets(cfg: ExperimentConfig):
    d = cfg.data
    if d.path is not None:
        root = Path(cfg.base_dir) / d.path
        return load_dataset(root / "train"), load_dataset(root / "test")
    train = gen_data(d.classes, d.train_per_class, d.image, cfg.stream(1), d.channels, d.noise)
    test = gen_data(d.classes, d.test_per_class, d.image, cfg.stream(2), d.channels, d.noise)
    return train, test


def build_members(cfg: ExperimentConfig):
    return build_tiny_vit(cfg.vit), build_tiny_cnn(cfg.cnn)


def train_members(cfg: ExperimentConfig, members, train: SyntheticDataset, test: SyntheticDataset):
    """Returns ``(params per member, clean test accuracy per member kind)``."""
    params, accs = [], {}
    for k, m in enumerate(members):
        init = m.init_params(np.random.default_rng([cfg.seed, 0x1217, k]))
        p, acc = train_sgd(m, init, train, cfg.train.lr, cfg.train.epochs,
                           np.random.default_rng([cfg.seed, 0x7A1, k]), batch_size=cfg.train.batch_size,
                           momentum=cfg.train.momentum, eval_data=test)
        params.append(p)
        accs[m.kind] = acc
    return tuple(params), accs


def _param_count(g):
    return sum(g[i].numel for i in g.params())


def shield_summary(model) -> dict:
    e = shield(model.graph, model.selection)
    rep = memory_report(e)
    g = model.graph
    masked_params = sum(g[i].numel for i in e.values if g[i].is_leaf)
    return {"kind": model.kind, "masked_nodes": [g[i].name for i in sorted(e.values)],
            "inputs": [g[i].name for i in sorted(e.inputs)],
            "shielded_param_fraction": masked_params / _param_count(g),
            "total_bytes": rep["total_bytes"], "total_mb": rep["total_bytes"] / 1e6, "items": rep["items"]}


LARGE_VIT = VitConfig(image=224, channels=3, patch=16, width=1024, blocks=24, heads=16, classes=10, mlp_ratio=4)


def shield_report(cfg: ExperimentConfig, include_large: bool = True) -> dict:
    members = build_members(cfg)
    out = {"toy": {m.kind: shield_summary(m) for m in members}}
    out["toy"]["ensemble_total_bytes"] = sum(out["toy"][m.kind]["total_bytes"] for m in members)
    if include_large:
        out["vit_l16"] = shield_summary(build_tiny_vit(LARGE_VIT))
    return out


def ensemble_of(cfg, members, params):
    return EnsembleModel(tuple(members), tuple(params), seed=cfg.seed)


def attack_report(cfg: ExperimentConfig, ensemble, test, workers=None):
    return run_grid(ensemble, test, cfg.attack.saga(cfg.seed), repeats=cfg.attack.repeats, seed=cfg.seed,
                    workers=workers or cfg.workers, settings=cfg.attack.settings)


def fl_logs(cfg: ExperimentConfig, train, test):
    return run_rounds(cfg.fl_config(), build_members(cfg), train, test)


# --- outputs ---------------------------------------------------------------------------

def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_params(out: Path, members, params):
    for m, p in zip(members, params):
        save_params(p, m.graph, out / "params" / m.kind)
        (out / f"{m.kind}.graph").write_text(graphmod.dumps(m.graph))


def read_params(out: Path, members):
    return tuple(load_params(out / "params" / m.kind) for m in members)


def budget_summary(outcomes, cfg: ExperimentConfig):
    """Worst l-inf distance per setting, access counters and range checks."""
    out = {}
    budget = cfg.attack.steps * cfg.attack.step
    for setting, outs in outcomes.items():
        linf = max((float(o.linf.max()) for o in outs if len(o.linf)), default=0.0)
        out[setting] = {"max_linf": linf, "budget": budget,
                        "within_budget": all(bool(np.all(o.linf <= budget + 1e-12)) for o in outs),
                        "in_range": all(bool(o.x_adv.min() >= 0 and o.x_adv.max() <= 1) for o in outs if o.x_adv.size),
                        "reads": sum(o.reads for o in outs), "denied": sum(o.denied for o in outs)}
    return out


def run_experiment(cfg, out=None, workers=None) -> dict:
    """Train, attack, account memory and (optionally) simulate FL; write all artifacts.

    ``cfg`` is an :class:`ExperimentConfig` or a path to a TOML file.
    Returns a mapping from artifact name to the path written.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    out = Path(out or "results")
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    train, test = make_datasets(cfg)
    members = build_members(cfg)
    params, accs = train_members(cfg, members, train, test)
    write_params(out, members, params)
    _dump(out / "training.json", {"clean_accuracy": accs, "train_samples": len(train), "test_samples": len(test)})
    written["training"] = out / "training.json"

    _dump(out / "shield_memory.json", shield_report(cfg))
    written["shield_memory"] = out / "shield_memory.json"

    report, outcomes = attack_report(cfg, ensemble_of(cfg, members, params), test, workers)
    (out / "robust_accuracy.csv").write_text(report.to_csv())
    (out / "robust_accuracy.json").write_text(report.to_json())
    _dump(out / "attack_checks.json", budget_summary(outcomes, cfg))
    written.update(csv=out / "robust_accuracy.csv", json=out / "robust_accuracy.json",
                   checks=out / "attack_checks.json")

    if cfg.fl is not None:
        logs = fl_logs(cfg, train, test)
        (out / "fl_rounds.jsonl").write_text("".join(log.to_json() + "\n" for log in logs))
        written["fl"] = out / "fl_rounds.jsonl"
    return written


__all__ = ["ConfigError", "ExperimentConfig", "DataSpec", "TrainSpec", "AttackSpec", "FlSpec", "parse_config",
           "load_config", "make_datasets", "build_members", "train_members", "shield_report", "attack_report",
           "fl_logs", "run_experiment", "save_dataset", "LARGE_VIT"]
