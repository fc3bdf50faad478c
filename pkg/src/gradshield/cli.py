"""Command line entry point: ``gradshield <subcommand> [--config F] [--seed S] [--out D] [--workers N]``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import experiment as ex
from .data import save_dataset


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg, out):
    train, test = ex.make_datasets(cfg)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} training and {len(test)} test samples to {out}")


def _trained(cfg, out, reuse):
    train, test = ex.make_datasets(cfg)
    members = ex.build_members(cfg)
    if reuse and all((out / "params" / m.kind / "manifest.json").is_file() for m in members):
        return train, test, members, ex.read_params(out, members)
    params, accs = ex.train_members(cfg, members, train, test)
    ex.write_params(out, members, params)
    ex._dump(out / "training.json", {"clean_accuracy": accs, "train_samples": len(train),
                                     "test_samples": len(test)})
    for kind, acc in accs.items():
        print(f"{kind}: clean accuracy {acc:.4f}")
    return train, test, members, params


def cmd_train(cfg, out):
    _trained(cfg, out, reuse=False)


def cmd_shield_report(cfg, out):
    rep = ex.shield_report(cfg)
    ex._dump(out / "shield_memory.json", rep)
    for kind in ("vit", "cnn"):
        r = rep["toy"][kind]
        print(f"toy {kind}: {r['total_bytes']} bytes, {100 * r['shielded_param_fraction']:.3f}% of parameters")
    r = rep["vit_l16"]
    print(f"vit_l16: {r['total_mb']:.2f} MB, {100 * r['shielded_param_fraction']:.3f}% of parameters")


def cmd_attack(cfg, out):
    _, test, members, params = _trained(cfg, out, reuse=True)
    report, outcomes = ex.attack_report(cfg, ex.ensemble_of(cfg, members, params), test)
    (out / "robust_accuracy.csv").write_text(report.to_csv())
    (out / "robust_accuracy.json").write_text(report.to_json())
    ex._dump(out / "attack_checks.json", ex.budget_summary(outcomes, cfg))
    print(report.to_csv(), end="")


def cmd_fl_run(cfg, out):
    train, test = ex.make_datasets(cfg)
    logs = ex.fl_logs(cfg, train, test)
    text = "".join(log.to_json() + "\n" for log in logs)
    (out / "fl_rounds.jsonl").write_text(text)
    print(text, end="")


def cmd_report(cfg, out):
    for name, path in ex.run_experiment(cfg, out).items():
        print(f"{name}: {path}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "shield-report": cmd_shield_report,
            "attack": cmd_attack, "fl-run": cmd_fl_run, "report": cmd_report}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradshield", description="Shielded-ensemble evasion experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML experiment config (toy defaults when omitted)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", default="results", help="output directory")
        s.add_argument("--workers", type=int, help="worker processes for the attack grid")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        cfg = _config(args)
    except ex.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    COMMANDS[args.command](cfg, _out(args))
    return 0


if __name__ == "__main__":
    sys.exit(main())
