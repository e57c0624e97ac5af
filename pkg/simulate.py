# simulate.py
#
# Closed-loop engine, Monte Carlo harness with common random numbers, paired
# policy comparison, lambda sweep, the dual-effect check and the desk-scale
# threshold search.

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from estimator import (
    DecoderState,
    EncoderCovariances,
    decoder_init,
    decoder_update_equilibrium,
    encoder_covariances,
    encoder_update,
)
from helpers import fsum_mean, get_workers, mean_and_stderr
from lqr import RiccatiSolution, expected_loss_offset, riccati_backward, stage_cost_eta
from model import ERASURE, PAYLOAD_KINDS, ChannelSymbol, CostWeights, LinearGaussianModel, channel_step, with_lambda
from policy import CertaintyEquivalentController, Controller, PolicyError, Scheduler, control, schedule
from voi import VoiTable, build_voi_table, voi_values

# How often to log Monte Carlo / search progress (in seconds)
PROGRESS_INTERVAL = 10

DEFAULT_SEARCH_POINTS = 801
DEFAULT_SEARCH_SEEDS = 2000
# Upper bound on candidates x evaluation points (grid nodes or seeds).
DEFAULT_SEARCH_BUDGET = 50_000_000
# Evaluation grid half-width in standard deviations of the never-transmit mismatch.
SEARCH_GRID_BOUNDS = 8.0

METRICS = ("R", "J", "Phi", "Psi", "transmissions", "offset")


class SearchBudgetError(ValueError):
    """Raised when a threshold search exceeds the evaluation budget."""


# -----------------------------------------------------------------------------
# Noise
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class NoisePath:
    seed: int
    x0: np.ndarray
    w: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class NoiseFactors:
    """Cholesky factors of M0, W(k), V(k), computed once per run and shared by every policy."""

    m0: np.ndarray
    M0: np.ndarray
    W: np.ndarray
    V: np.ndarray

    @classmethod
    def from_model(cls, model: LinearGaussianModel) -> "NoiseFactors":
        return cls(
            m0=np.array(model.m0),
            M0=np.linalg.cholesky(model.M0),
            W=np.linalg.cholesky(model.W),
            V=np.linalg.cholesky(model.V),
        )

    def draw(self, seed: int) -> NoisePath:
        """
        x(0), w(0..N), v(0..N) from ``np.random.default_rng(seed)``, always in
        that order, so a seed fixes the whole noise path.
        """
        rng = np.random.default_rng(seed)
        stages, n = self.W.shape[0], self.W.shape[1]
        p = self.V.shape[1]
        x0 = self.m0 + self.M0 @ rng.standard_normal(n)
        w = np.einsum("kij,kj->ki", self.W, rng.standard_normal((stages, n)))
        v = np.einsum("kij,kj->ki", self.V, rng.standard_normal((stages, p)))
        return NoisePath(seed=seed, x0=x0, w=w, v=v)


# -----------------------------------------------------------------------------
# Single rollout
# -----------------------------------------------------------------------------
@dataclass
class SimulationTrace:
    """
    One closed-loop realization. Stage arrays cover k = 0..N; ``x`` also holds
    x(N+1) and ``z`` holds the channel outputs z(0..N+1), z(0) = ERASURE.
    """

    seed: int
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    z: list
    xcheck: np.ndarray
    xhat: np.ndarray
    e_tilde: np.ndarray
    voi: np.ndarray
    E: np.ndarray
    R_emp: float = 0.0
    J_emp: float = 0.0
    Phi_emp: float = 0.0
    Psi_emp: float = 0.0

    @property
    def horizon(self) -> int:
        return len(self.sigma) - 1

    @property
    def transmissions(self) -> int:
        return int(self.sigma.sum())


def rollout(
    model: LinearGaussianModel,
    costs: CostWeights,
    ric: RiccatiSolution,
    scheduler: Scheduler,
    controller: Controller,
    seed: int,
    payload_kind: str = "estimate",
    noise: NoiseFactors | None = None,
    covariances: EncoderCovariances | None = None,
    path: NoisePath | None = None,
) -> SimulationTrace:
    """
    Simulate stages 0..N. Within a stage: the decoder consumes z(k), applies
    u(k), the encoder updates x̌(k) and its decoder replica, decides sigma(k)
    from ẽ(k), the channel carries z(k+1), then the plant steps.
    """
    if payload_kind not in PAYLOAD_KINDS:
        raise PolicyError(f"unknown payload kind '{payload_kind}', expected one of {PAYLOAD_KINDS}")
    N, n, m, p = model.horizon, model.n, model.m, model.p
    covariances = covariances or encoder_covariances(model)
    path = path or (noise or NoiseFactors.from_model(model)).draw(seed)

    trace = SimulationTrace(
        seed=seed,
        x=np.zeros((N + 2, n)),
        y=np.zeros((N + 1, p)),
        u=np.zeros((N + 1, m)),
        sigma=np.zeros(N + 1, dtype=int),
        z=[ERASURE],
        xcheck=np.zeros((N + 1, n)),
        xhat=np.zeros((N + 1, n)),
        e_tilde=np.zeros((N + 1, n)),
        voi=np.zeros(N + 1),
        E=np.zeros((N + 1, n, n)),
    )

    x = path.x0
    decoder: DecoderState = decoder_init(model)
    replica: DecoderState = decoder_init(model)
    encoder = None
    u_prev = None
    sent: ChannelSymbol = ERASURE
    for k in range(N + 1):
        y = model.C[k] @ x + path.v[k]
        if k > 0:
            decoder = decoder_update_equilibrium(decoder, u_prev, trace.z[k], covariances.O[k - 1], k - 1, model)
            replica = decoder_update_equilibrium(replica, u_prev, sent, covariances.O[k - 1], k - 1, model)
        u = control(controller, k, decoder.xhat)

        encoder = encoder_update(encoder, y, u_prev, k, model, covariances)
        e_tilde = encoder.xcheck - replica.xhat
        sigma = schedule(scheduler, k, e_tilde, encoder.xcheck)
        sent = channel_step(sigma, e_tilde if payload_kind == "mismatch" else encoder.xcheck, payload_kind)
        trace.z.append(sent)

        trace.x[k], trace.y[k], trace.u[k] = x, y, u
        trace.sigma[k] = sigma
        trace.xcheck[k], trace.xhat[k], trace.e_tilde[k] = encoder.xcheck, decoder.xhat, e_tilde
        trace.voi[k] = scheduler.value(k, e_tilde)
        trace.E[k] = decoder.E

        x = model.A[k] @ x + model.B[k] @ u + path.w[k]
        u_prev = u
    trace.x[N + 1] = x

    _accumulate(trace, costs, ric)
    return trace


def _accumulate(trace: SimulationTrace, costs: CostWeights, ric: RiccatiSolution):
    N = trace.horizon
    trace.R_emp = math.fsum(costs.ell * trace.sigma) / (N + 1)
    state_terms = [float(trace.x[k] @ costs.Q[k] @ trace.x[k]) for k in range(N + 2)]
    control_terms = [float(trace.u[k] @ costs.R[k] @ trace.u[k]) for k in range(N + 1)]
    trace.J_emp = math.fsum(state_terms + control_terms) / (N + 1)
    trace.Phi_emp = costs.lam * trace.R_emp + trace.J_emp
    eta = [stage_cost_eta(trace.x[k], trace.u[k], k, ric) for k in range(N + 1)]
    trace.Psi_emp = math.fsum(list(ric.theta * trace.sigma) + eta)


def check_trace(trace: SimulationTrace, costs: CostWeights, tol: float = 1e-12) -> list[str]:
    """Accounting and channel-delay checks on a finished trace; returns the violations."""
    violations = []
    N = trace.horizon
    R = math.fsum(costs.ell * trace.sigma) / (N + 1)
    if abs(R - trace.R_emp) > tol:
        violations.append(f"R_emp {trace.R_emp!r} differs from the sigma column ({R!r})")
    if abs(trace.Phi_emp - (costs.lam * trace.R_emp + trace.J_emp)) > tol * max(1.0, abs(trace.Phi_emp)):
        violations.append("Phi_emp != lambda * R_emp + J_emp")
    if trace.z[0] is not ERASURE:
        violations.append("z(0) is not an erasure")
    for k in range(N + 1):
        delivered = trace.z[k + 1]
        if bool(trace.sigma[k]) != (delivered is not ERASURE):
            violations.append(f"stage {k}: z({k + 1}) does not match sigma({k})")
    return violations


# -----------------------------------------------------------------------------
# Monte Carlo with common random numbers
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class PolicySpec:
    name: str
    scheduler: Scheduler
    controller: Controller


@dataclass(frozen=True)
class SeedMetrics:
    """Per-seed accumulators; ``offset`` is (N+1)Phi - Psi, policy-independent in expectation."""

    seed: int
    R: float
    J: float
    Phi: float
    Psi: float
    transmissions: int
    offset: float

    @classmethod
    def from_trace(cls, trace: SimulationTrace) -> "SeedMetrics":
        return cls(
            seed=trace.seed,
            R=trace.R_emp,
            J=trace.J_emp,
            Phi=trace.Phi_emp,
            Psi=trace.Psi_emp,
            transmissions=trace.transmissions,
            offset=(trace.horizon + 1) * trace.Phi_emp - trace.Psi_emp,
        )


@dataclass(frozen=True)
class PolicySummary:
    name: str
    mean: dict
    stderr: dict


@dataclass(frozen=True)
class PairedDifference:
    """first - second, with standard errors from the per-seed differences."""

    first: str
    second: str
    mean: dict
    stderr: dict

    def t_statistic(self, metric: str = "Phi") -> float:
        se = self.stderr[metric]
        if se == 0:
            return 0.0 if self.mean[metric] == 0 else math.copysign(math.inf, self.mean[metric])
        return self.mean[metric] / se


@dataclass
class MonteCarloSummary:
    seeds: list
    policies: list = field(default_factory=list)
    paired: list = field(default_factory=list)
    per_seed: dict = field(default_factory=dict)

    def policy(self, name: str) -> PolicySummary:
        for summary in self.policies:
            if summary.name == name:
                return summary
        raise KeyError(name)

    def difference(self, first: str, second: str) -> PairedDifference:
        for diff in self.paired:
            if (diff.first, diff.second) == (first, second):
                return diff
        raise KeyError((first, second))

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "policies": [{"name": s.name, "mean": s.mean, "stderr": s.stderr} for s in self.policies],
            "paired_differences": [
                {"first": d.first, "second": d.second, "mean": d.mean, "stderr": d.stderr, "t_Phi": d.t_statistic()}
                for d in self.paired
            ],
        }


def _summarize(name: str, metrics: list[SeedMetrics]) -> PolicySummary:
    mean, stderr = {}, {}
    for metric in METRICS:
        mean[metric], stderr[metric] = mean_and_stderr(getattr(m, metric) for m in metrics)
    return PolicySummary(name=name, mean=mean, stderr=stderr)


def _paired(first: str, second: str, a: list[SeedMetrics], b: list[SeedMetrics]) -> PairedDifference:
    mean, stderr = {}, {}
    for metric in METRICS:
        mean[metric], stderr[metric] = mean_and_stderr(getattr(x, metric) - getattr(y, metric) for x, y in zip(a, b))
    return PairedDifference(first=first, second=second, mean=mean, stderr=stderr)


def monte_carlo(
    model: LinearGaussianModel,
    costs: CostWeights,
    ric: RiccatiSolution,
    policies: list[PolicySpec],
    n_seeds: int,
    base_seed: int = 0,
    workers: int | None = None,
    payload_kind: str = "estimate",
    covariances: EncoderCovariances | None = None,
) -> MonteCarloSummary:
    """
    Run every policy on seeds base_seed .. base_seed + n_seeds - 1. Each seed's
    noise path is drawn once and shared by all policies; results are reduced
    in seed order.
    """
    if not policies:
        raise PolicyError("monte_carlo needs at least one policy")
    if n_seeds < 2:
        raise ValueError(f"monte_carlo needs at least 2 seeds, got {n_seeds}")
    names = [spec.name for spec in policies]
    if len(set(names)) != len(names):
        raise PolicyError(f"policy names must be unique, got {names}")

    covariances = covariances or encoder_covariances(model)
    noise = NoiseFactors.from_model(model)
    seeds = [base_seed + i for i in range(n_seeds)]
    workers = workers or get_workers()

    def run_seed(seed: int) -> list[SeedMetrics]:
        path = noise.draw(seed)
        return [
            SeedMetrics.from_trace(
                rollout(
                    model,
                    costs,
                    ric,
                    spec.scheduler,
                    spec.controller,
                    seed,
                    payload_kind=payload_kind,
                    covariances=covariances,
                    path=path,
                )
            )
            for spec in policies
        ]

    logging.info(f"Monte Carlo: {len(policies)} policies x {n_seeds} seeds on {workers} workers")
    results = {}
    start_time = time.time()
    last_log = start_time
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_seed = {executor.submit(run_seed, seed): seed for seed in seeds}
        for future in as_completed(future_to_seed):
            results[future_to_seed[future]] = future.result()
            now = time.time()
            if now - last_log >= PROGRESS_INTERVAL:
                rate = len(results) / (now - start_time)
                logging.info(f"Rollouts: {len(results)} / {n_seeds} seeds ({rate:.1f}/sec)")
                last_log = now

    per_seed = {name: [results[seed][i] for seed in seeds] for i, name in enumerate(names)}
    summary = MonteCarloSummary(seeds=seeds, per_seed=per_seed)
    summary.policies = [_summarize(name, per_seed[name]) for name in names]
    summary.paired = [_paired(a, b, per_seed[a], per_seed[b]) for a, b in itertools.combinations(names, 2)]
    logging.info(f"Monte Carlo done in {time.time() - start_time:.1f}s")
    return summary


# -----------------------------------------------------------------------------
# Rate-regulation tradeoff
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class SweepRow:
    lam: float
    R: float
    R_stderr: float
    J: float
    J_stderr: float
    Phi: float
    Phi_stderr: float
    transmissions: float


def sweep_lambda(
    model: LinearGaussianModel,
    costs: CostWeights,
    lambdas,
    scheduler_factory: Callable[[LinearGaussianModel, RiccatiSolution], Scheduler],
    n_seeds: int,
    base_seed: int = 0,
    controller_factory: Callable[[RiccatiSolution], Controller] | None = None,
    workers: int | None = None,
) -> list[SweepRow]:
    """Empirical (R, J) tradeoff curve, one row per lambda; every lambda reuses the same seeds."""
    covariances = encoder_covariances(model)
    rows = []
    for lam in lambdas:
        swept = with_lambda(costs, float(lam))
        ric = riccati_backward(model, swept)
        controller = controller_factory(ric) if controller_factory else CertaintyEquivalentController(ric=ric)
        spec = PolicySpec(name=f"lambda={lam:g}", scheduler=scheduler_factory(model, ric), controller=controller)
        summary = monte_carlo(model, swept, ric, [spec], n_seeds, base_seed, workers=workers, covariances=covariances)
        stats = summary.policies[0]
        rows.append(
            SweepRow(
                lam=float(lam),
                R=stats.mean["R"],
                R_stderr=stats.stderr["R"],
                J=stats.mean["J"],
                J_stderr=stats.stderr["J"],
                Phi=stats.mean["Phi"],
                Phi_stderr=stats.stderr["Phi"],
                transmissions=stats.mean["transmissions"],
            )
        )
        logging.info(f"lambda={lam:g}: R={stats.mean['R']:.4f} J={stats.mean['J']:.4f}")
    return rows


# -----------------------------------------------------------------------------
# Dual effect
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class DualEffectReport:
    seed: int
    controllers: tuple
    mismatch_only: bool
    sigmas: np.ndarray
    mismatches: np.ndarray
    identical_sigma: bool
    max_mismatch_gap: float
    max_decoder_cov_gap: float


def dual_effect_probe(
    model: LinearGaussianModel,
    costs: CostWeights,
    ric: RiccatiSolution,
    scheduler: Scheduler,
    controllers: tuple[Controller, Controller],
    seed: int,
    covariances: EncoderCovariances | None = None,
) -> DualEffectReport:
    """
    Run one seed under two controllers. With a mismatch-only scheduler the
    sigma and ẽ sequences coincide; a scheduler reading x̌ serves as the
    contrast where they generally do not.
    """
    if not scheduler.mismatch_only:
        logging.info(f"dual effect check: '{scheduler.name}' reads x̌, running the contrast experiment")
    covariances = covariances or encoder_covariances(model)
    path = NoiseFactors.from_model(model).draw(seed)
    traces = [
        rollout(model, costs, ric, scheduler, c, seed, covariances=covariances, path=path) for c in controllers
    ]
    sigmas = np.stack([t.sigma for t in traces])
    mismatches = np.stack([t.e_tilde for t in traces])
    return DualEffectReport(
        seed=seed,
        controllers=tuple(c.name for c in controllers),
        mismatch_only=scheduler.mismatch_only,
        sigmas=sigmas,
        mismatches=mismatches,
        identical_sigma=bool(np.array_equal(sigmas[0], sigmas[1])),
        max_mismatch_gap=float(np.max(np.abs(mismatches[0] - mismatches[1]))),
        max_decoder_cov_gap=float(np.max(np.abs(traces[0].E - traces[1].E))),
    )


# -----------------------------------------------------------------------------
# Desk-scale threshold search (scalar models)
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class IntervalRegion:
    """Transmit iff ẽ < lower or ẽ > upper."""

    lower: float
    upper: float

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return (e < self.lower) | (e > self.upper)


@dataclass(frozen=True)
class VoiRegion:
    """Transmit iff VoI_k(ẽ) >= 0 according to the table."""

    table: VoiTable
    k: int

    def __call__(self, e: np.ndarray) -> np.ndarray:
        return (voi_values(self.table, self.k, e.reshape(-1, 1)) >= 0).reshape(e.shape)


@dataclass(frozen=True)
class SearchResult:
    method: str
    thresholds: np.ndarray
    losses: np.ndarray
    stderr: np.ndarray | None
    best_thresholds: tuple
    best_loss: float
    voi_loss: float
    gap: float
    gap_stderr: float
    candidates: list
    # "grid" or "asymmetric": which candidate family holds the best loss.
    best_source: str = "grid"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "thresholds": self.thresholds.tolist(),
            "best_source": self.best_source,
            "best_thresholds": [list(t) if isinstance(t, tuple) else t for t in self.best_thresholds],
            "best_loss": self.best_loss,
            "voi_loss": self.voi_loss,
            "gap": self.gap,
            "gap_stderr": self.gap_stderr,
            "candidates": self.candidates,
        }


class _MismatchChain:
    """Scalar mismatch chain ẽ(k+1) = (1 - sigma) a(k) ẽ(k) + xi(k+1) with its stage costs."""

    def __init__(self, model, ric, covariances):
        N = model.horizon
        self.N = N
        self.a = model.A[:, 0, 0]
        self.std = np.sqrt(covariances.Sigma_xi[:, 0, 0])
        self.theta = ric.theta
        self.weight = np.append(ric.Gamma[1 : N + 1, 0, 0], 0.0) * self.a**2
        self.constant = np.array(
            [float(np.trace(ric.Gamma[k + 1] @ covariances.P[k + 1])) if k < N else 0.0 for k in range(N + 1)]
        )
        self.initial = float(np.trace(ric.Gamma[0] @ model.M0))
        # Widest spread is reached when nothing is ever sent.
        variance = self.std[0] ** 2
        widest = variance
        for k in range(N):
            variance = self.a[k] ** 2 * variance + self.std[k + 1] ** 2
            widest = max(widest, variance)
        self.width = SEARCH_GRID_BOUNDS * math.sqrt(widest)


def _gaussian_rows(centers: np.ndarray, grid: np.ndarray, std: float) -> np.ndarray:
    """Discretized Gaussian kernels N(center, std^2) on ``grid``, one normalized row per center."""
    nearest = np.abs(grid[None, :] - centers[:, None]).argmin(axis=1)
    if std <= 0:
        rows = np.zeros((len(centers), len(grid)))
        rows[np.arange(len(centers)), nearest] = 1.0
        return rows
    rows = np.exp(-0.5 * ((grid[None, :] - centers[:, None]) / std) ** 2)
    totals = rows.sum(axis=1)
    empty = totals <= 0
    rows[empty] = 0.0
    rows[empty, nearest[empty]] = 1.0
    totals[empty] = 1.0
    return rows / totals[:, None]


def _expected_psi_density(chain: _MismatchChain, regions: list[list], points: int) -> np.ndarray:
    """E[Psi] for every combination of per-stage regions, shape (len(regions[0]), ..., len(regions[N]))."""
    grid = np.linspace(-chain.width, chain.width, points)
    density = _gaussian_rows(np.zeros(1), grid, chain.std[0])
    acc = np.zeros(1)
    last_log = time.time()
    for k in range(chain.N + 1):
        transmit = np.stack([region(grid) for region in regions[k]]).astype(float)
        silent = 1.0 - transmit
        sent_mass = density @ transmit.T
        silent_cost = (density * (chain.weight[k] * grid**2)) @ silent.T
        mass = density.sum(axis=1)[:, None]
        acc = (acc[:, None] + chain.theta[k] * sent_mass + silent_cost + chain.constant[k] * mass).ravel()
        if k < chain.N:
            kernel = _gaussian_rows(chain.a[k] * grid, grid, chain.std[k + 1])
            restart = _gaussian_rows(np.zeros(1), grid, chain.std[k + 1])[0]
            kept = (density[:, None, :] * silent[None, :, :]).reshape(-1, len(grid))
            density = kept @ kernel + sent_mass.reshape(-1, 1) * restart[None, :]
        now = time.time()
        if now - last_log >= PROGRESS_INTERVAL:
            logging.info(f"threshold search: stage {k} of {chain.N}, {len(acc)} partial policies")
            last_log = now
    return (chain.initial + acc).reshape([len(r) for r in regions])


def _psi_samples(chain: _MismatchChain, regions: list[list], seeds: int, base_seed: int) -> np.ndarray:
    """Per-seed Psi (minus its policy-free noise part) for every region combination, shape (*combos, seeds)."""
    rng = np.random.default_rng(base_seed)
    draws = rng.standard_normal((chain.N + 1, seeds)) * chain.std[:, None]
    mismatch = draws[0][None, :]
    acc = np.zeros((1, seeds))
    for k in range(chain.N + 1):
        transmit = np.stack([region(mismatch) for region in regions[k]], axis=1)
        cost = np.where(transmit, chain.theta[k], chain.weight[k] * mismatch[:, None, :] ** 2) + chain.constant[k]
        acc = (acc[:, None, :] + cost).reshape(-1, seeds)
        if k < chain.N:
            mismatch = (np.where(transmit, 0.0, chain.a[k] * mismatch[:, None, :]) + draws[k + 1]).reshape(-1, seeds)
    return (chain.initial + acc).reshape([len(r) for r in regions] + [seeds])


def brute_force_threshold_search(
    model: LinearGaussianModel,
    costs: CostWeights,
    ric: RiccatiSolution,
    threshold_grid,
    asymmetric: list | None = None,
    table: VoiTable | None = None,
    method: str = "auto",
    points: int = DEFAULT_SEARCH_POINTS,
    seeds: int = DEFAULT_SEARCH_SEEDS,
    base_seed: int = 0,
    budget: int = DEFAULT_SEARCH_BUDGET,
) -> SearchResult:
    """
    Exhaustive search over per-stage symmetric thresholds for a scalar model.

    Every combination (t(0), ..., t(N)) from ``threshold_grid`` is evaluated,
    plus the optional ``asymmetric`` candidates, each a list of per-stage
    (lower, upper) pairs. ``method`` "density" propagates the mismatch density
    on a fixed grid (deterministic); "monte-carlo" uses common random numbers
    over ``seeds`` mismatch paths; "auto" picks density for N <= 2.
    Losses are reported as Phi = (E[Psi] + offset) / (N+1).
    """
    N = model.horizon
    if model.n != 1:
        raise SearchBudgetError(f"threshold search supports scalar models only, got n={model.n}")
    if N > 3:
        raise SearchBudgetError(f"threshold search supports N <= 3, got N={N}")
    if method == "auto":
        method = "density" if N <= 2 else "monte-carlo"
    if method not in ("density", "monte-carlo"):
        raise SearchBudgetError(f"unknown search method '{method}'")
    thresholds = np.asarray(threshold_grid, dtype=float)
    asymmetric = asymmetric or []

    evaluation_points = points if method == "density" else seeds
    candidates = len(thresholds) ** (N + 1) + len(asymmetric) + 1
    if candidates * evaluation_points > budget:
        raise SearchBudgetError(
            f"{candidates} candidates x {evaluation_points} evaluation points exceeds the budget of {budget}"
        )

    covariances = encoder_covariances(model)
    chain = _MismatchChain(model, ric, covariances)
    offset = expected_loss_offset(model, costs, ric)
    table = table or build_voi_table(model, ric, covariances=covariances)

    grid_regions = [[IntervalRegion(-t, t) for t in thresholds] for _ in range(N + 1)]
    voi_regions = [[VoiRegion(table, k)] for k in range(N + 1)]
    extra_regions = [[[IntervalRegion(*stage)] for stage in candidate] for candidate in asymmetric]
    logging.info(f"Threshold search ({method}): {candidates} candidates, N={N}")

    def to_phi(psi):
        return (psi + offset) / (N + 1)

    if method == "density":
        losses = to_phi(_expected_psi_density(chain, grid_regions, points))
        voi_loss = float(to_phi(_expected_psi_density(chain, voi_regions, points)).ravel()[0])
        extra = [float(to_phi(_expected_psi_density(chain, r, points)).ravel()[0]) for r in extra_regions]
        extra_se = [0.0] * len(extra)
        extra_samples = []
        stderr = None
        voi_samples = None
    else:
        samples = to_phi(_psi_samples(chain, grid_regions, seeds, base_seed))
        losses = samples.mean(axis=-1)
        stderr = samples.std(axis=-1, ddof=1) / math.sqrt(seeds)
        voi_samples = to_phi(_psi_samples(chain, voi_regions, seeds, base_seed)).reshape(seeds)
        voi_loss = fsum_mean(voi_samples)
        extra, extra_se, extra_samples = [], [], []
        for r in extra_regions:
            candidate_samples = to_phi(_psi_samples(chain, r, seeds, base_seed)).reshape(seeds)
            mean, se = mean_and_stderr(candidate_samples)
            extra.append(mean)
            extra_se.append(se)
            extra_samples.append(candidate_samples)

    # Asymmetric candidates compete with the grid for the minimum.
    best = np.unravel_index(np.argmin(losses), losses.shape)
    best_loss = float(losses[best])
    best_thresholds = tuple(float(thresholds[i]) for i in best)
    best_source = "grid"
    best_samples = None if voi_samples is None else samples[best]
    for index, loss in enumerate(extra):
        if loss < best_loss:
            best_loss = loss
            best_thresholds = tuple((float(lo), float(hi)) for lo, hi in asymmetric[index])
            best_source = "asymmetric"
            best_samples = extra_samples[index] if extra_samples else None
    gap_stderr = 0.0 if voi_samples is None else mean_and_stderr(voi_samples - best_samples)[1]

    report = [
        {"stages": [list(stage) for stage in candidate], "loss": loss, "stderr": se}
        for candidate, loss, se in zip(asymmetric, extra, extra_se)
    ]
    return SearchResult(
        method=method,
        thresholds=thresholds,
        losses=losses,
        stderr=stderr,
        best_thresholds=best_thresholds,
        best_loss=best_loss,
        voi_loss=voi_loss,
        gap=voi_loss - best_loss,
        gap_stderr=float(gap_stderr),
        candidates=report,
        best_source=best_source,
    )
