"""Shared test fixtures: reference models and a temporary ledger."""

import json
import os

import pytest

from lqr import riccati_backward
from model import CostWeights, LinearGaussianModel, parse_model_document
from store import ExperimentLedger, ExperimentRun, SeedMetric

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def scalar_model(horizon=20, a=1.0, w=1.0, v=1.0, m0=0.0, M0=1.0, lam=1.0):
    """Scalar desk model: A=B=C=1, unit noise and weights unless overridden."""
    model = LinearGaussianModel.stationary(A=a, B=1.0, C=1.0, W=w, V=v, m0=m0, M0=M0, horizon=horizon)
    costs = CostWeights.stationary(Q=1.0, R=1.0, ell=1.0, lam=lam, horizon=horizon)
    return model, costs


@pytest.fixture
def scalar_desk():
    """(model, costs, ric) for the N=20 scalar desk model."""
    model, costs = scalar_model()
    return model, costs, riccati_backward(model, costs)


@pytest.fixture
def pendulum():
    """(model, costs, ric) from the shipped pendulum config."""
    with open(os.path.join(CONFIG_DIR, "pendulum.json"), encoding="utf-8") as f:
        model, costs = parse_model_document(json.load(f))
    return model, costs, riccati_backward(model, costs)


@pytest.fixture
def ledger_setup(tmp_path):
    """Create an ExperimentLedger with tables, yield (ledger, db_path), then close."""
    db_path = str(tmp_path / "ledger.db")
    ledger = ExperimentLedger(db_path=db_path)
    ledger.db.connect(reuse_if_open=True)
    ledger.db.create_tables([ExperimentRun, SeedMetric])

    yield ledger, db_path

    if not ledger.db.is_closed():
        ledger.db.close()
