# policy.py
#
# Schedulers (encoder side) and controllers (decoder side). Schedulers map
# (k, ẽ) to a transmit bit; the state-threshold variant also reads x̌ and
# exists only for the dual-effect contrast experiment.

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from helpers import quadratic_form, stage_stack
from lqr import RiccatiSolution
from model import LinearGaussianModel
from voi import VoiTable, build_voi_table, voi_lookup, voi_quadratic

SCHEDULER_KINDS = (
    "voi-exact",
    "voi-quadratic",
    "periodic",
    "threshold",
    "interval",
    "ellipsoid",
    "state-threshold",
)
CONTROLLER_KINDS = ("certainty-equivalent", "custom-linear")


class PolicyError(ValueError):
    """Raised for unknown or unsupported scheduler/controller selections."""


# -----------------------------------------------------------------------------
# Schedulers
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class VoiExactScheduler:
    """Transmit iff the tabulated VoI is nonnegative."""

    table: VoiTable
    name: str = "voi-exact"
    mismatch_only = True

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        return int(self.value(k, e_tilde) >= 0)

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return voi_lookup(self.table, k, e_tilde)


@dataclass(frozen=True)
class VoiQuadraticScheduler:
    """Transmit iff ẽ'A'Gamma(k+1)Aẽ >= theta(k)."""

    ric: RiccatiSolution
    model: LinearGaussianModel
    name: str = "voi-quadratic"
    mismatch_only = True

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        return int(self.value(k, e_tilde) >= 0)

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return voi_quadratic(e_tilde, k, self.ric, self.model)


@dataclass(frozen=True)
class PeriodicScheduler:
    """Transmit at stages k with (k - phase) divisible by period; period 1 always transmits."""

    period: int = 1
    phase: int = 0
    name: str = "periodic"
    mismatch_only = True

    def __post_init__(self):
        if self.period < 1:
            raise PolicyError(f"periodic scheduler needs period >= 1, got {self.period}")

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        return int((k - self.phase) % self.period == 0)

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return math.nan


@dataclass(frozen=True)
class IntervalScheduler:
    """
    Transmit iff some component of ẽ leaves the box [lower(k), upper(k)].

    ``lower``/``upper`` are (N+1, n) stacks; infinite bounds give one-sided rules.
    """

    lower: np.ndarray
    upper: np.ndarray
    name: str = "interval"
    mismatch_only = True

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        e_tilde = np.atleast_1d(e_tilde)
        return int(np.any(e_tilde < self.lower[k]) or np.any(e_tilde > self.upper[k]))

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return math.nan

    @classmethod
    def symmetric(cls, thresholds, horizon: int, n: int = 1, name: str = "threshold") -> "IntervalScheduler":
        """Transmit iff |ẽ_i| > t(k) for some i."""
        t = _stage_bounds(thresholds, horizon, n, "thresholds")
        return cls(lower=-t, upper=t, name=name)

    @classmethod
    def bounds(cls, lower, upper, horizon: int, n: int = 1, name: str = "interval") -> "IntervalScheduler":
        return cls(
            lower=_stage_bounds(lower, horizon, n, "lower"),
            upper=_stage_bounds(upper, horizon, n, "upper"),
            name=name,
        )


def _stage_bounds(value, horizon: int, n: int, name: str) -> np.ndarray:
    """Scalar, per-stage list (scalar mismatch), per-component vector or (N+1, n) stack."""
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        value = np.full(n, float(value))
    elif value.ndim == 1 and n == 1 and value.shape[0] == horizon + 1:
        value = value[:, None]
    return stage_stack(value, horizon + 1, (n,), name)


@dataclass(frozen=True)
class EllipsoidScheduler:
    """Transmit iff ẽ'Pẽ > radius(k)."""

    weight: np.ndarray
    radius: np.ndarray
    name: str = "ellipsoid"
    mismatch_only = True

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        e_tilde = np.atleast_1d(e_tilde)
        return int(quadratic_form(e_tilde, self.weight) > self.radius[k])

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return math.nan


@dataclass(frozen=True)
class StateThresholdScheduler:
    """Transmit iff x̌(k)[component] > level. Not a mismatch-only rule."""

    component: int
    level: float
    name: str = "state-threshold"
    mismatch_only = False

    def decide(self, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
        if xcheck is None:
            raise PolicyError("state-threshold scheduler needs the encoder estimate x̌")
        return int(np.atleast_1d(xcheck)[self.component] > self.level)

    def value(self, k: int, e_tilde: np.ndarray) -> float:
        return math.nan


Scheduler = (
    VoiExactScheduler
    | VoiQuadraticScheduler
    | PeriodicScheduler
    | IntervalScheduler
    | EllipsoidScheduler
    | StateThresholdScheduler
)


def schedule(s: Scheduler, k: int, e_tilde: np.ndarray, xcheck: np.ndarray | None = None) -> int:
    """sigma(k) in {0, 1}."""
    return s.decide(k, e_tilde, xcheck)


# -----------------------------------------------------------------------------
# Controllers
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class CertaintyEquivalentController:
    ric: RiccatiSolution
    name: str = "certainty-equivalent"

    def act(self, k: int, xhat: np.ndarray) -> np.ndarray:
        return -(self.ric.L[k] @ xhat)


@dataclass(frozen=True)
class CustomLinearController:
    """u = -gains(k) x̂ with arbitrary (N+1, m, n) gains."""

    gains: np.ndarray
    name: str = "custom-linear"

    def act(self, k: int, xhat: np.ndarray) -> np.ndarray:
        return -(self.gains[k] @ xhat)

    @classmethod
    def scaled(cls, ric: RiccatiSolution, scale: float) -> "CustomLinearController":
        return cls(gains=scale * ric.L, name=f"scaled-{scale:g}")


Controller = CertaintyEquivalentController | CustomLinearController


def control(c: Controller, k: int, xhat: np.ndarray) -> np.ndarray:
    return c.act(k, np.asarray(xhat, dtype=float))


# -----------------------------------------------------------------------------
# Config selection
# -----------------------------------------------------------------------------
def scheduler_from_config(
    spec: dict,
    model: LinearGaussianModel,
    ric: RiccatiSolution,
    table_factory: Callable[[LinearGaussianModel, RiccatiSolution], VoiTable] | None = None,
) -> Scheduler:
    """
    Build a scheduler from a ``scheduler`` config block, e.g.
    {"kind": "periodic", "period": 1} or {"kind": "threshold", "thresholds": 1.2}.
    """
    kind = spec.get("kind", "voi-quadratic")
    N, n = model.horizon, model.n
    name = spec.get("name", kind)
    if kind == "randomized":
        raise PolicyError(
            "randomized schedulers are not supported: the optimal profile is deterministic, "
            "randomization does not improve the loss"
        )
    try:
        if kind == "voi-exact":
            table = (table_factory or build_voi_table)(model, ric)
            return VoiExactScheduler(table=table, name=name)
        if kind == "voi-quadratic":
            return VoiQuadraticScheduler(ric=ric, model=model, name=name)
        if kind == "periodic":
            return PeriodicScheduler(period=int(spec.get("period", 1)), phase=int(spec.get("phase", 0)), name=name)
        if kind == "threshold":
            return IntervalScheduler.symmetric(spec["thresholds"], N, n, name=name)
        if kind == "interval":
            return IntervalScheduler.bounds(spec.get("lower", -np.inf), spec.get("upper", np.inf), N, n, name=name)
        if kind == "ellipsoid":
            weight = np.atleast_2d(np.asarray(spec.get("weight", np.eye(n)), dtype=float))
            radius = stage_stack(spec["radius"], N + 1, (), "radius")
            return EllipsoidScheduler(weight=weight, radius=radius, name=name)
        if kind == "state-threshold":
            return StateThresholdScheduler(component=int(spec.get("component", 0)), level=float(spec["level"]), name=name)
    except KeyError as e:
        raise PolicyError(f"scheduler '{kind}' is missing parameter {e}") from e
    except ValueError as e:
        if isinstance(e, PolicyError):
            raise
        raise PolicyError(f"scheduler '{kind}': {e}") from e
    raise PolicyError(f"unknown scheduler kind '{kind}', expected one of {SCHEDULER_KINDS}")


def controller_from_config(spec: dict, ric: RiccatiSolution) -> Controller:
    """{"kind": "certainty-equivalent"} or {"kind": "custom-linear", "scale": 0.5 | "gains": [...]}."""
    kind = spec.get("kind", "certainty-equivalent")
    if kind == "certainty-equivalent":
        return CertaintyEquivalentController(ric=ric)
    if kind == "custom-linear":
        if "gains" in spec:
            try:
                gains = stage_stack(spec["gains"], ric.horizon + 1, ric.L.shape[1:], "gains")
            except ValueError as e:
                raise PolicyError(str(e)) from e
            return CustomLinearController(gains=gains, name=spec.get("name", kind))
        return CustomLinearController.scaled(ric, float(spec.get("scale", 1.0)))
    raise PolicyError(f"unknown controller kind '{kind}', expected one of {CONTROLLER_KINDS}")
