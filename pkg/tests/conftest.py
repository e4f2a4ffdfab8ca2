import numpy as np
import pytest

from cvar_distill import config as cfgmod
from cvar_distill.synth_market import reference_market


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (desk-scale grid, full pipelines)")


@pytest.fixture(scope="session")
def ref_panel():
    """A 6-asset, 240-week reference market shared by feature and evaluation tests."""
    return reference_market(6, 240, seed=7)


@pytest.fixture
def tiny_cfg():
    """Smallest config that still exercises every pipeline stage."""
    return cfgmod.build_config({
        "universe": {"n_assets": 4, "real_weeks": 160, "eval_weeks": 20},
        "synth": {"horizon": 180},
        "teacher": {"iterations": 400},
        "network": {"hidden": [8]},
        "train": {"epochs_s0": 4, "cycles": 1, "epochs_sup": 2, "epochs_unsup": 2, "epochs_s2": 2},
        "adaptive": {"finetune_every": 4, "finetune_epochs": 2},
        "eval": {"mc_samples": 3},
        "grid": {"world_seeds": [32], "model_seeds": [0]},
    }, preset="desk")


def simplex_point(rng, n):
    w = rng.exponential(size=n)
    return w / w.sum()


# one line per acceptance criterion, filled in by test_acceptance and echoed after the run
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
