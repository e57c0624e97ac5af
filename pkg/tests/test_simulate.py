"""Tests for simulate.py: rollouts, Monte Carlo, sweep, dual effect and threshold search."""

import numpy as np
import pytest

from conftest import scalar_model
from estimator import encoder_covariances
from lqr import expected_loss_offset, riccati_backward
from model import ERASURE, LinearGaussianModel
from policy import (
    CertaintyEquivalentController,
    CustomLinearController,
    IntervalScheduler,
    PeriodicScheduler,
    PolicyError,
    StateThresholdScheduler,
    VoiExactScheduler,
    VoiQuadraticScheduler,
)
from simulate import (
    NoiseFactors,
    PolicySpec,
    SearchBudgetError,
    brute_force_threshold_search,
    check_trace,
    dual_effect_probe,
    monte_carlo,
    rollout,
    sweep_lambda,
)
from voi import build_voi_table, expected_psi


def _policies(model, ric):
    controller = CertaintyEquivalentController(ric=ric)
    return [
        PolicySpec("voi-quadratic", VoiQuadraticScheduler(ric=ric, model=model), controller),
        PolicySpec("periodic-1", PeriodicScheduler(period=1), controller),
    ]


# -----------------------------------------------------------------------------
# Rollout
# -----------------------------------------------------------------------------
def test_rollout_shapes_and_accounting(scalar_desk):
    model, costs, ric = scalar_desk
    trace = rollout(model, costs, ric, VoiQuadraticScheduler(ric=ric, model=model), CertaintyEquivalentController(ric), 7)
    assert trace.x.shape == (22, 1)
    assert trace.y.shape == (21, 1)
    assert trace.u.shape == (21, 1)
    assert len(trace.z) == 22
    assert trace.horizon == 20
    assert check_trace(trace, costs) == []
    assert trace.Phi_emp == pytest.approx(costs.lam * trace.R_emp + trace.J_emp, abs=1e-12)


def test_pendulum_rollout_is_sparse(pendulum):
    model, costs, ric = pendulum
    trace = rollout(model, costs, ric, VoiQuadraticScheduler(ric=ric, model=model), CertaintyEquivalentController(ric), 0)
    assert trace.x.shape == (502, 4)
    assert trace.sigma.shape == (501,)
    assert 3 <= trace.transmissions <= 80
    assert check_trace(trace, costs) == []


@pytest.mark.parametrize(
    "fixture, scheduler_kind",
    [("scalar_desk", "voi"), ("scalar_desk", "periodic"), ("pendulum", "voi"), ("pendulum", "periodic")],
)
def test_mismatch_recursion_identity(request, fixture, scheduler_kind):
    model, costs, ric = request.getfixturevalue(fixture)
    if scheduler_kind == "voi":
        scheduler = VoiQuadraticScheduler(ric=ric, model=model)
    else:
        scheduler = PeriodicScheduler(period=3)
    trace = rollout(model, costs, ric, scheduler, CertaintyEquivalentController(ric), 5)
    for k in range(model.horizon):
        innovation = trace.xcheck[k + 1] - model.A[k] @ trace.xcheck[k] - model.B[k] @ trace.u[k]
        expected = (1 - trace.sigma[k]) * model.A[k] @ trace.e_tilde[k] + innovation
        np.testing.assert_allclose(trace.e_tilde[k + 1], expected, rtol=0, atol=1e-10)


@pytest.mark.parametrize("payload_kind", ["estimate", "mismatch"])
def test_encoder_replica_tracks_decoder(pendulum, payload_kind):
    model, costs, ric = pendulum
    scheduler = VoiQuadraticScheduler(ric=ric, model=model)
    trace = rollout(model, costs, ric, scheduler, CertaintyEquivalentController(ric), 2, payload_kind=payload_kind)
    # e_tilde comes from the encoder's replica, xhat from the decoder itself.
    np.testing.assert_allclose(trace.e_tilde, trace.xcheck - trace.xhat, rtol=0, atol=1e-12)


def test_periodic_scheduler_rate(scalar_desk):
    model, costs, ric = scalar_desk
    controller = CertaintyEquivalentController(ric)
    every = rollout(model, costs, ric, PeriodicScheduler(period=1), controller, 3)
    assert every.sigma.tolist() == [1] * 21
    assert every.R_emp == pytest.approx(1.0, abs=1e-12)
    third = rollout(model, costs, ric, PeriodicScheduler(period=3), controller, 3)
    assert third.transmissions == 7
    assert third.R_emp == pytest.approx(7 / 21, abs=1e-12)


def test_channel_delay(scalar_desk):
    model, costs, ric = scalar_desk
    trace = rollout(model, costs, ric, PeriodicScheduler(period=2), CertaintyEquivalentController(ric), 1)
    assert trace.z[0] is ERASURE
    for k in range(trace.horizon + 1):
        delivered = trace.z[k + 1]
        if trace.sigma[k]:
            np.testing.assert_array_equal(delivered.value, trace.xcheck[k])
        else:
            assert delivered is ERASURE


def test_check_trace_reports_tampering(scalar_desk):
    model, costs, ric = scalar_desk
    trace = rollout(model, costs, ric, PeriodicScheduler(period=1), CertaintyEquivalentController(ric), 1)
    trace.z[3] = ERASURE
    trace.R_emp += 0.5
    violations = check_trace(trace, costs)
    assert any("z(3)" in v for v in violations)
    assert any("R_emp" in v for v in violations)


def test_rollout_is_reproducible(scalar_desk):
    model, costs, ric = scalar_desk
    scheduler = VoiQuadraticScheduler(ric=ric, model=model)
    first = rollout(model, costs, ric, scheduler, CertaintyEquivalentController(ric), 42)
    second = rollout(model, costs, ric, scheduler, CertaintyEquivalentController(ric), 42)
    np.testing.assert_array_equal(first.x, second.x)
    np.testing.assert_array_equal(first.sigma, second.sigma)
    assert first.Phi_emp == second.Phi_emp


def test_noise_draw_order_is_fixed(scalar_desk):
    model, _, _ = scalar_desk
    path = NoiseFactors.from_model(model).draw(5)
    rng = np.random.default_rng(5)
    assert path.x0[0] == model.m0[0] + rng.standard_normal(1)[0]
    np.testing.assert_array_equal(path.w[:, 0], rng.standard_normal((21, 1))[:, 0])


def test_payload_kinds_give_identical_closed_loop(pendulum):
    model, costs, ric = pendulum
    scheduler = VoiQuadraticScheduler(ric=ric, model=model)
    controller = CertaintyEquivalentController(ric)
    by_estimate = rollout(model, costs, ric, scheduler, controller, 9)
    by_mismatch = rollout(model, costs, ric, scheduler, controller, 9, payload_kind="mismatch")
    np.testing.assert_array_equal(by_estimate.sigma, by_mismatch.sigma)
    np.testing.assert_allclose(by_estimate.x, by_mismatch.x, atol=1e-9)


def test_unknown_payload_kind(scalar_desk):
    model, costs, ric = scalar_desk
    with pytest.raises(PolicyError, match="payload"):
        rollout(model, costs, ric, PeriodicScheduler(), CertaintyEquivalentController(ric), 0, payload_kind="raw")


def _noise_free_model(horizon=20):
    tiny = 1e-16
    return LinearGaussianModel.stationary(A=1.0, B=1.0, C=1.0, W=tiny, V=tiny, m0=2.0, M0=tiny, horizon=horizon)


def test_noise_free_plant_never_transmits():
    model = _noise_free_model()
    _, costs = scalar_model()
    ric = riccati_backward(model, costs)
    trace = rollout(model, costs, ric, VoiQuadraticScheduler(ric=ric, model=model), CertaintyEquivalentController(ric), 0)
    assert trace.transmissions == 0
    assert np.max(np.abs(trace.e_tilde)) < 1e-5
    # The open-loop replica still regulates the state towards zero.
    assert abs(trace.x[-1, 0]) < 1e-3
    np.testing.assert_allclose(trace.xhat[:, 0], trace.x[:-1, 0], atol=1e-5)


# -----------------------------------------------------------------------------
# Monte Carlo
# -----------------------------------------------------------------------------
def test_monte_carlo_input_errors(scalar_desk):
    model, costs, ric = scalar_desk
    with pytest.raises(PolicyError, match="at least one policy"):
        monte_carlo(model, costs, ric, [], 10)
    with pytest.raises(ValueError, match="at least 2 seeds"):
        monte_carlo(model, costs, ric, _policies(model, ric), 1)
    duplicate = _policies(model, ric)[:1] * 2
    with pytest.raises(PolicyError, match="unique"):
        monte_carlo(model, costs, ric, duplicate, 10)


def test_same_policy_twice_has_zero_difference(scalar_desk):
    model, costs, ric = scalar_desk
    spec = _policies(model, ric)[0]
    twin = PolicySpec("twin", spec.scheduler, spec.controller)
    summary = monte_carlo(model, costs, ric, [spec, twin], 20, workers=2)
    diff = summary.difference("voi-quadratic", "twin")
    for metric in ("R", "J", "Phi", "Psi"):
        assert diff.mean[metric] == 0.0
        assert diff.stderr[metric] == 0.0
    assert diff.t_statistic() == 0.0


def test_monte_carlo_does_not_depend_on_worker_count(scalar_desk):
    model, costs, ric = scalar_desk
    serial = monte_carlo(model, costs, ric, _policies(model, ric), 30, base_seed=100, workers=1)
    parallel = monte_carlo(model, costs, ric, _policies(model, ric), 30, base_seed=100, workers=4)
    assert serial.to_dict() == parallel.to_dict()
    assert serial.seeds == list(range(100, 130))


def test_voi_scheduler_beats_always_transmitting(scalar_desk):
    model, costs, ric = scalar_desk
    summary = monte_carlo(model, costs, ric, _policies(model, ric), 300, workers=2)
    diff = summary.difference("voi-quadratic", "periodic-1")
    assert diff.mean["Phi"] < 0
    assert diff.t_statistic("Phi") <= -3
    assert summary.policy("periodic-1").mean["R"] == pytest.approx(1.0)


def test_loss_offset_is_policy_independent(scalar_desk):
    model, costs, ric = scalar_desk
    summary = monte_carlo(model, costs, ric, _policies(model, ric), 1000, workers=2)
    diff = summary.difference("voi-quadratic", "periodic-1")
    assert abs(diff.mean["offset"]) <= 4 * diff.stderr["offset"]
    expected = expected_loss_offset(model, costs, ric)
    for name in ("voi-quadratic", "periodic-1"):
        stats = summary.policy(name)
        assert abs(stats.mean["offset"] - expected) <= 4 * stats.stderr["offset"]


def test_table_predicts_simulated_psi(scalar_desk):
    model, costs, ric = scalar_desk
    table = build_voi_table(model, ric)
    spec = PolicySpec("voi-exact", VoiExactScheduler(table=table), CertaintyEquivalentController(ric))
    summary = monte_carlo(model, costs, ric, [spec], 2000, workers=2)
    stats = summary.policy("voi-exact")
    assert abs(stats.mean["Psi"] - expected_psi(table)) <= 4 * stats.stderr["Psi"] + 1e-2


# -----------------------------------------------------------------------------
# Sweep
# -----------------------------------------------------------------------------
def test_sweep_trades_rate_for_regulation(scalar_desk):
    model, costs, _ = scalar_desk

    def factory(m, r):
        return VoiQuadraticScheduler(ric=r, model=m)

    rows = sweep_lambda(model, costs, [0.25, 4.0], factory, 50, workers=2)
    assert [row.lam for row in rows] == [0.25, 4.0]
    assert rows[0].R > rows[1].R
    assert rows[0].J < rows[1].J
    assert rows[1].Phi == pytest.approx(4.0 * rows[1].R + rows[1].J, rel=1e-12)


def test_sweep_is_deterministic(scalar_desk):
    model, costs, _ = scalar_desk

    def factory(m, r):
        return VoiQuadraticScheduler(ric=r, model=m)

    assert sweep_lambda(model, costs, [1.0], factory, 10) == sweep_lambda(model, costs, [1.0], factory, 10)


# -----------------------------------------------------------------------------
# Dual effect
# -----------------------------------------------------------------------------
def test_mismatch_only_scheduler_has_no_dual_effect(scalar_desk):
    model, costs, ric = scalar_desk
    controllers = (CertaintyEquivalentController(ric), CustomLinearController.scaled(ric, 0.5))
    scheduler = VoiQuadraticScheduler(ric=ric, model=model)
    for seed in range(20):
        report = dual_effect_probe(model, costs, ric, scheduler, controllers, seed)
        assert report.mismatch_only
        assert report.identical_sigma
        assert report.max_mismatch_gap <= 1e-12
        assert report.max_decoder_cov_gap == 0.0
    assert report.controllers == ("certainty-equivalent", "scaled-0.5")


def test_state_dependent_scheduler_shows_dual_effect(scalar_desk):
    model, costs, ric = scalar_desk
    controllers = (CertaintyEquivalentController(ric), CustomLinearController.scaled(ric, 0.0))
    scheduler = StateThresholdScheduler(component=0, level=0.5)
    reports = [dual_effect_probe(model, costs, ric, scheduler, controllers, seed) for seed in range(10)]
    assert not reports[0].mismatch_only
    differing = [r for r in reports if not r.identical_sigma]
    assert len(differing) >= 5
    assert any(r.max_decoder_cov_gap > 0 for r in differing)


def test_noise_free_plant_has_no_transmissions_under_either_controller():
    model = _noise_free_model()
    _, costs = scalar_model()
    ric = riccati_backward(model, costs)
    controllers = (CertaintyEquivalentController(ric), CustomLinearController.scaled(ric, 0.5))
    report = dual_effect_probe(model, costs, ric, VoiQuadraticScheduler(ric=ric, model=model), controllers, 3)
    assert not report.sigmas.any()


# -----------------------------------------------------------------------------
# Threshold search
# -----------------------------------------------------------------------------
def test_search_without_future_prefers_silence():
    model, costs = scalar_model(horizon=0)
    ric = riccati_backward(model, costs)
    result = brute_force_threshold_search(model, costs, ric, np.linspace(0.0, 10.0, 11))
    assert result.method == "density"
    assert np.all(np.diff(result.losses) <= 1e-12)
    # Beyond the grid of the mismatch density nothing is ever sent.
    assert result.losses[-1] == result.losses[-2]
    assert result.gap == pytest.approx(0.0, abs=1e-12)


def test_search_asymmetric_candidate_can_win():
    model, costs = scalar_model(horizon=0)
    ric = riccati_backward(model, costs)
    result = brute_force_threshold_search(model, costs, ric, [0.0, 1.0], asymmetric=[[[-20.0, 20.0]]])
    assert result.best_source == "asymmetric"
    assert result.best_loss == pytest.approx(result.candidates[0]["loss"], abs=1e-12)
    assert result.best_loss < result.losses.min()
    assert result.gap == pytest.approx(0.0, abs=1e-9)
    report = result.to_dict()
    assert report["best_source"] == "asymmetric"
    assert report["best_thresholds"] == [[-20.0, 20.0]]


def test_search_voi_policy_is_no_worse_than_thresholds():
    model, costs = scalar_model(horizon=2)
    ric = riccati_backward(model, costs)
    asymmetric = [
        [[-np.inf, 0.5], [-1.0, 1.5], [-2.0, 2.0]],
        [[-1.0, 1.2], [-0.8, 0.8], [-np.inf, np.inf]],
    ]
    result = brute_force_threshold_search(model, costs, ric, np.linspace(0.0, 3.0, 21), asymmetric=asymmetric)
    assert result.losses.shape == (21, 21, 21)
    assert result.voi_loss <= result.best_loss + 1e-4
    for candidate in result.candidates:
        assert candidate["loss"] >= result.voi_loss - 1e-4
    assert len(result.to_dict()["best_thresholds"]) == 3


def test_search_monte_carlo_method():
    model, costs = scalar_model(horizon=2)
    ric = riccati_backward(model, costs)
    result = brute_force_threshold_search(
        model, costs, ric, np.linspace(0.5, 2.0, 6), method="monte-carlo", seeds=2000, base_seed=4
    )
    assert result.stderr.shape == (6, 6, 6)
    assert result.voi_loss <= result.best_loss + 2 * result.gap_stderr + 1e-3


@pytest.mark.parametrize(
    "horizon, kwargs, message",
    [
        (3, {"method": "density"}, "budget"),
        (4, {}, "N <= 3"),
        (2, {"method": "grid"}, "unknown search method"),
    ],
)
def test_search_limits(horizon, kwargs, message):
    model, costs = scalar_model(horizon=horizon)
    ric = riccati_backward(model, costs)
    with pytest.raises(SearchBudgetError, match=message):
        brute_force_threshold_search(model, costs, ric, np.linspace(0.0, 3.0, 21), **kwargs)


def test_search_rejects_vector_models(pendulum):
    model, costs, ric = pendulum
    with pytest.raises(SearchBudgetError, match="scalar"):
        brute_force_threshold_search(model, costs, ric, [1.0])


def test_interval_scheduler_in_monte_carlo(scalar_desk):
    model, costs, ric = scalar_desk
    covariances = encoder_covariances(model)
    spec = PolicySpec("threshold", IntervalScheduler.symmetric(1.0, model.horizon), CertaintyEquivalentController(ric))
    summary = monte_carlo(model, costs, ric, [spec], 10, covariances=covariances)
    assert 0 < summary.policy("threshold").mean["transmissions"] < 21
