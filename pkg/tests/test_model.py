"""Tests for model.py: parsing, validation and the channel."""

import json

import numpy as np
import pytest

from model import (
    ERASURE,
    ConfigError,
    CostWeights,
    LinearGaussianModel,
    ModelError,
    Payload,
    channel_step,
    dump_model_document,
    load_experiment_document,
    parse_model_document,
    validate_model,
    with_lambda,
)


def _document(**overrides):
    document = {
        "horizon": 3,
        "model": {"A": 1.0, "B": 1.0, "C": 1.0, "W": 1.0, "V": 1.0, "m0": 0.0, "M0": 1.0},
        "costs": {"Q": 1.0, "R": 1.0, "ell": 1.0, "lambda": 2.0},
    }
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        document[section][name] = value
    return document


def test_scalar_shorthand_expands_to_stacks():
    model, costs = parse_model_document(_document())
    assert model.A.shape == (4, 1, 1)
    assert model.C.shape == (4, 1, 1)
    assert costs.Q.shape == (5, 1, 1)
    assert costs.ell.tolist() == [1.0, 1.0, 1.0, 1.0]
    assert costs.lam == 2.0
    assert model.horizon == 3


def test_q_final_overrides_terminal_weight():
    _, costs = parse_model_document(_document(costs__Q_final=7.0))
    assert costs.Q[-1, 0, 0] == 7.0
    assert costs.Q[-2, 0, 0] == 1.0


def test_q_list_of_n_plus_one_stages_repeats_last():
    _, costs = parse_model_document(_document(costs__Q=[[[1.0]], [[2.0]], [[3.0]], [[4.0]]]))
    assert costs.Q[:, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0, 4.0]


def test_time_varying_a():
    model, _ = parse_model_document(_document(model__A=[[[1.0]], [[0.5]], [[0.25]], [[2.0]]]))
    assert model.A[:, 0, 0].tolist() == [1.0, 0.5, 0.25, 2.0]


def test_missing_key_is_config_error():
    document = _document()
    del document["model"]["W"]
    with pytest.raises(ConfigError, match="missing key 'W'"):
        parse_model_document(document)


def test_wrong_stage_count_is_config_error():
    with pytest.raises(ConfigError):
        parse_model_document(_document(model__A=[[[1.0]], [[0.5]]]))


def test_model_arrays_are_read_only():
    model, _ = parse_model_document(_document())
    with pytest.raises(ValueError):
        model.A[0, 0, 0] = 3.0


def test_dump_round_trip(pendulum):
    model, costs, _ = pendulum
    document = json.loads(json.dumps(dump_model_document(model, costs)))
    again_model, again_costs = parse_model_document(document)
    assert np.array_equal(again_model.A, model.A)
    assert np.array_equal(again_model.M0, model.M0)
    assert np.array_equal(again_costs.Q, costs.Q)
    assert again_costs.lam == costs.lam


def test_dump_uses_stationary_shorthand(pendulum):
    model, costs, _ = pendulum
    document = dump_model_document(model, costs)
    assert np.asarray(document["model"]["A"]).shape == (4, 4)


def test_pendulum_is_valid(pendulum):
    model, costs, _ = pendulum
    report = validate_model(model, costs)
    assert report.ok, report.violations
    assert model.horizon == 500


def test_validate_reports_indefinite_noise():
    model, costs = parse_model_document(_document(model__V=-1.0))
    report = validate_model(model, costs)
    assert not report.ok
    assert "V(0) not positive definite" in report.violations


def test_validate_reports_nonpositive_lambda():
    model, costs = parse_model_document(_document())
    report = validate_model(model, with_lambda(costs, 0.0))
    assert "lambda not positive" in report.violations


def test_validate_symmetrizes_rounding_asymmetry():
    W = np.array([[1.0, 0.5], [0.5 + 1e-14, 1.0]])
    model = LinearGaussianModel.stationary(
        A=np.eye(2), B=np.ones((2, 1)), C=np.eye(2), W=W, V=np.eye(2), m0=np.zeros(2), M0=np.eye(2), horizon=2
    )
    costs = CostWeights.stationary(Q=np.eye(2), R=1.0, ell=1.0, lam=1.0, horizon=2)
    report = validate_model(model, costs)
    assert report.ok
    assert np.array_equal(report.model.W[0], report.model.W[0].T)
    assert model.W[0, 1, 0] != model.W[0, 0, 1]


@pytest.mark.parametrize("v", [1.0, -1.0])
def test_validate_is_idempotent(v):
    W = np.array([[1.0, 0.5], [0.5 + 1e-14, 1.0]])
    model = LinearGaussianModel.stationary(
        A=np.eye(2), B=np.ones((2, 1)), C=np.eye(2), W=W, V=v * np.eye(2), m0=np.zeros(2), M0=np.eye(2), horizon=2
    )
    costs = CostWeights.stationary(Q=np.eye(2), R=1.0, ell=1.0, lam=1.0, horizon=2)
    first = validate_model(model, costs)
    second = validate_model(first.model, first.costs)
    assert second.violations == first.violations
    for name in ("A", "B", "C", "W", "V", "m0", "M0"):
        assert np.array_equal(getattr(second.model, name), getattr(first.model, name)), name
    for name in ("Q", "R", "ell"):
        assert np.array_equal(getattr(second.costs, name), getattr(first.costs, name)), name
    assert model.W[0, 1, 0] == 0.5 + 1e-14


def test_validate_reports_real_asymmetry():
    W = np.array([[1.0, 0.5], [0.4, 1.0]])
    model = LinearGaussianModel.stationary(
        A=np.eye(2), B=np.ones((2, 1)), C=np.eye(2), W=W, V=np.eye(2), m0=np.zeros(2), M0=np.eye(2), horizon=1
    )
    costs = CostWeights.stationary(Q=np.eye(2), R=1.0, ell=1.0, lam=1.0, horizon=1)
    report = validate_model(model, costs)
    assert any(v.startswith("W(0) not symmetric") for v in report.violations)


def test_dimension_mismatch_names_matrix():
    model = LinearGaussianModel.stationary(
        A=np.eye(2), B=np.ones((2, 1)), C=np.eye(2), W=np.eye(2), V=np.eye(3), m0=np.zeros(2), M0=np.eye(2), horizon=1
    )
    costs = CostWeights.stationary(Q=np.eye(2), R=1.0, ell=1.0, lam=1.0, horizon=1)
    with pytest.raises(ModelError, match=r"V\(0\)"):
        validate_model(model, costs)


def test_channel_step():
    assert channel_step(0, np.array([1.0])) is ERASURE
    delivered = channel_step(1, np.array([1.0, 2.0]), kind="mismatch")
    assert isinstance(delivered, Payload)
    assert delivered.kind == "mismatch"
    assert delivered.value.tolist() == [1.0, 2.0]


def test_load_experiment_document_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_experiment_document(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_document(str(broken))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_experiment_document(str(listing))
