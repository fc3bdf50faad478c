import types

import pytest

from gradshield.experiment import ExperimentConfig, build_members, ensemble_of, make_datasets, train_members


@pytest.fixture(scope="session")
def toy():
    """Toy ensemble trained once with the default experiment configuration."""
    cfg = ExperimentConfig()
    train, test = make_datasets(cfg)
    members = build_members(cfg)
    params, accs = train_members(cfg, members, train, test)
    return types.SimpleNamespace(cfg=cfg, train=train, test=test, members=members, params=params, accs=accs,
                                 ensemble=ensemble_of(cfg, members, params))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
