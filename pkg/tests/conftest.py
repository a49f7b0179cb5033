import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from heartpfl.config import ExperimentConfig  # noqa: E402
from heartpfl.data import generate_gaussian_mixture  # noqa: E402
from heartpfl.models import BackboneSpec, pretrain_and_freeze  # noqa: E402


def tiny_spec(**kw) -> BackboneSpec:
    base = dict(input_dim=4, num_classes=3, widths=(6, 5, 6), depth_per_stage=1, proto_dim=3, dropout=0.0)
    base.update(kw)
    return BackboneSpec(**base)


def randomized(model, rng, scale=0.3):
    """Same model with every adapter entry perturbed, so no block is the identity."""
    return model.with_adapter({k: v + scale * rng.normal(size=v.shape) for k, v in model.adapter.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    data = generate_gaussian_mixture(3, 4, 30, 3.0, seed=5)
    return randomized(pretrain_and_freeze(tiny_spec(), data.X, data.y, epochs=1, seed=0), rng)


def smoke_config(**overrides) -> ExperimentConfig:
    items = {
        "data.n_samples": 400, "data.pretrain_size": 100, "data.pretrain_epochs": 2, "data.proxy_size": 64,
        "data.num_classes": 5, "data.dim": 8, "model.widths": "16, 16, 16", "model.proto_dim": 8,
        "model.depth_per_stage": 1, "fl.num_clients": 4, "fl.clients_per_round": 2, "fl.rounds": 2,
        "fl.client_epochs": 1, "fl.eval_every": 1, "akt.epochs": 2, "pgd.steps": 2,
    }
    items.update(overrides)
    return ExperimentConfig.load(None, [f"{k}={v}" for k, v in items.items()])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
