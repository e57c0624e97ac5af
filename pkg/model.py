# model.py
#
# Plant, sensor, channel and cost parameterization shared by every other module.
# Matrices are stored per stage as numpy stacks; the JSON document accepts a
# single matrix as the stationary shorthand for "the same at every stage".

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from helpers import (
    SYMMETRY_TOLERANCE,
    asymmetry,
    compress_stages,
    is_positive_definite,
    is_positive_semidefinite,
    stage_stack,
    symmetrize,
)


class ModelError(ValueError):
    """Raised for structurally broken models (dimension mismatches)."""


class ConfigError(ValueError):
    """Raised when an experiment document cannot be read or is malformed."""


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


# -----------------------------------------------------------------------------
# Domain types
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class LinearGaussianModel:
    """
    Time-varying linear-Gaussian plant and sensor.

    Stage-indexed stacks cover the decision stages k = 0..N:
    - A: (N+1, n, n), B: (N+1, n, m), W: (N+1, n, n)
    - C: (N+1, p, n), V: (N+1, p, p)
    - m0: (n,), M0: (n, n)
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    m0: np.ndarray
    M0: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "W", "V", "m0", "M0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def horizon(self) -> int:
        return self.A.shape[0] - 1

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def p(self) -> int:
        return self.C.shape[1]

    @classmethod
    def stationary(cls, A, B, C, W, V, m0, M0, horizon: int) -> "LinearGaussianModel":
        """Replicate one set of matrices across stages 0..horizon."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
        W = np.atleast_2d(np.asarray(W, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        stages = horizon + 1
        return cls(
            A=stage_stack(A, stages, A.shape, "A"),
            B=stage_stack(B, stages, B.shape, "B"),
            C=stage_stack(C, stages, C.shape, "C"),
            W=stage_stack(W, stages, W.shape, "W"),
            V=stage_stack(V, stages, V.shape, "V"),
            m0=np.atleast_1d(np.asarray(m0, dtype=float)),
            M0=np.atleast_2d(np.asarray(M0, dtype=float)),
        )


@dataclass(frozen=True)
class CostWeights:
    """
    Loss weights: Q(k) for k = 0..N+1, R(k) and ell(k) for k = 0..N, and the
    tradeoff multiplier lam (lambda).
    """

    Q: np.ndarray
    R: np.ndarray
    ell: np.ndarray
    lam: float

    def __post_init__(self):
        for name in ("Q", "R", "ell"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def stationary(cls, Q, R, ell, lam, horizon: int, Q_final=None) -> "CostWeights":
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        Q_stack = stage_stack(Q, horizon + 2, Q.shape, "Q")
        if Q_final is not None:
            Q_stack[-1] = np.atleast_2d(np.asarray(Q_final, dtype=float))
        return cls(
            Q=Q_stack,
            R=stage_stack(R, horizon + 1, R.shape, "R"),
            ell=stage_stack(ell, horizon + 1, (), "ell"),
            lam=lam,
        )


def with_lambda(costs: CostWeights, lam: float) -> CostWeights:
    """Same weights with a different tradeoff multiplier."""
    return replace(costs, lam=lam)


# -----------------------------------------------------------------------------
# Channel
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class Payload:
    """A delivered packet. ``kind`` is "estimate" (x̌) or "mismatch" (ẽ)."""

    value: np.ndarray
    kind: str = "estimate"


@dataclass(frozen=True)
class Erasure:
    """Channel output when nothing was sent."""

    def __repr__(self):
        return "ERASURE"


ERASURE = Erasure()

ChannelSymbol = Payload | Erasure

PAYLOAD_KINDS = ("estimate", "mismatch")


def channel_step(sigma: int, payload: np.ndarray, kind: str = "estimate") -> ChannelSymbol:
    """
    Noiseless channel: returns the symbol delivered at the next stage.

    Payload(payload) when sigma is 1, ERASURE otherwise. The output at stage 0,
    before any decision, is ERASURE.
    """
    if sigma:
        return Payload(value=np.array(payload, dtype=float), kind=kind)
    return ERASURE


# -----------------------------------------------------------------------------
# Validation
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class ValidationReport:
    """Result of :func:`validate_model`; ``model``/``costs`` are the symmetrized copies."""

    violations: list = field(default_factory=list)
    model: LinearGaussianModel | None = None
    costs: CostWeights | None = None

    @property
    def ok(self) -> bool:
        return not self.violations


def _check_shape(array: np.ndarray, expected: tuple, name: str):
    if array.ndim != len(expected):
        raise ModelError(f"{name}: expected {len(expected)} axes, got shape {array.shape}")
    for stage, entry in enumerate(array):
        if entry.shape != expected[1:]:
            raise ModelError(f"{name}({stage}): expected shape {expected[1:]}, got {entry.shape}")
    if array.shape[0] != expected[0]:
        raise ModelError(f"{name}: expected {expected[0]} stages, got {array.shape[0]}")


def _check_dimensions(model: LinearGaussianModel, costs: CostWeights):
    N, n, m, p = model.horizon, model.n, model.m, model.p
    if model.A.ndim != 3 or model.A.shape[1] != model.A.shape[2]:
        raise ModelError(f"A: expected a stack of square matrices, got shape {model.A.shape}")
    _check_shape(model.B, (N + 1, n, m), "B")
    _check_shape(model.C, (N + 1, p, n), "C")
    _check_shape(model.W, (N + 1, n, n), "W")
    _check_shape(model.V, (N + 1, p, p), "V")
    _check_shape(costs.Q, (N + 2, n, n), "Q")
    _check_shape(costs.R, (N + 1, m, m), "R")
    if costs.ell.shape != (N + 1,):
        raise ModelError(f"ell: expected {N + 1} stages, got shape {costs.ell.shape}")
    if model.m0.shape != (n,):
        raise ModelError(f"m0: expected shape ({n},), got {model.m0.shape}")
    if model.M0.shape != (n, n):
        raise ModelError(f"M0: expected shape ({n}, {n}), got {model.M0.shape}")


def _symmetric_stack(stack: np.ndarray, name: str, violations: list) -> np.ndarray:
    out = np.array(stack, dtype=float)
    for stage, matrix in enumerate(out):
        gap = asymmetry(matrix)
        if gap > SYMMETRY_TOLERANCE:
            violations.append(f"{name}({stage}) not symmetric (asymmetry {gap:.3g})")
        elif gap > 0:
            out[stage] = symmetrize(matrix)
    return out


def validate_model(model: LinearGaussianModel, costs: CostWeights) -> ValidationReport:
    """
    Check the plant/cost conditions. Returns the list of violated invariants
    (empty when valid) together with symmetrized copies of the inputs; the
    inputs themselves are never modified.

    Raises ModelError on dimension mismatches.
    """
    _check_dimensions(model, costs)
    violations = []

    W = _symmetric_stack(model.W, "W", violations)
    V = _symmetric_stack(model.V, "V", violations)
    (M0,) = _symmetric_stack(model.M0[None], "M0", violations)
    Q = _symmetric_stack(costs.Q, "Q", violations)
    R = _symmetric_stack(costs.R, "R", violations)

    for stage, matrix in enumerate(W):
        if not is_positive_definite(matrix):
            violations.append(f"W({stage}) not positive definite")
    for stage, matrix in enumerate(V):
        if not is_positive_definite(matrix):
            violations.append(f"V({stage}) not positive definite")
    if not is_positive_definite(M0):
        violations.append("M0 not positive definite")
    for stage, matrix in enumerate(Q):
        if not is_positive_semidefinite(matrix):
            violations.append(f"Q({stage}) not positive semidefinite")
    for stage, matrix in enumerate(R):
        if not is_positive_definite(matrix):
            violations.append(f"R({stage}) not positive definite")
    for stage, weight in enumerate(costs.ell):
        if not weight >= 0:
            violations.append(f"ell({stage}) negative")
    if not costs.lam > 0:
        violations.append("lambda not positive")

    for name, array in (("A", model.A), ("B", model.B), ("C", model.C), ("m0", model.m0)):
        if not np.all(np.isfinite(array)):
            violations.append(f"{name} contains non-finite entries")

    if violations:
        logging.debug(f"Model validation found {len(violations)} violation(s)")

    return ValidationReport(
        violations=violations,
        model=replace(model, W=W, V=V, M0=M0),
        costs=replace(costs, Q=Q, R=R),
    )


# -----------------------------------------------------------------------------
# External JSON format
# -----------------------------------------------------------------------------
def _require(document: dict, key: str, where: str):
    if key not in document:
        raise ConfigError(f"missing key '{key}' in {where}")
    return document[key]


def parse_model_document(document: dict) -> tuple[LinearGaussianModel, CostWeights]:
    """Build model and costs from a parsed document with keys model, costs, horizon."""
    try:
        horizon = int(_require(document, "horizon", "document"))
        if horizon < 0:
            raise ConfigError(f"horizon must be nonnegative, got {horizon}")
        model_doc = _require(document, "model", "document")
        costs_doc = _require(document, "costs", "document")

        A0 = np.asarray(_require(model_doc, "A", "model"), dtype=float)
        n = A0.shape[-1] if A0.ndim else 1
        stages = horizon + 1

        def per_stage(doc, key, where, count, ndim=2):
            raw = np.asarray(_require(doc, key, where), dtype=float)
            if raw.ndim == 0:
                raw = raw.reshape((1,) * ndim)
            if raw.ndim == ndim:
                return stage_stack(raw, count, raw.shape, key)
            if raw.ndim == ndim + 1:
                return stage_stack(raw, count, raw.shape[1:], key)
            raise ConfigError(f"{key}: expected a matrix or a list of {count} matrices, got shape {raw.shape}")

        model = LinearGaussianModel(
            A=per_stage(model_doc, "A", "model", stages),
            B=per_stage(model_doc, "B", "model", stages),
            C=per_stage(model_doc, "C", "model", stages),
            W=per_stage(model_doc, "W", "model", stages),
            V=per_stage(model_doc, "V", "model", stages),
            m0=np.asarray(_require(model_doc, "m0", "model"), dtype=float).reshape(n),
            M0=np.asarray(_require(model_doc, "M0", "model"), dtype=float).reshape(n, n),
        )

        Q_raw = np.asarray(_require(costs_doc, "Q", "costs"), dtype=float)
        if Q_raw.ndim == 0:
            Q_raw = Q_raw.reshape(1, 1)
        if Q_raw.ndim == 3 and Q_raw.shape[0] == stages:
            Q_raw = np.concatenate([Q_raw, Q_raw[-1:]], axis=0)
        Q = per_stage({"Q": Q_raw}, "Q", "costs", horizon + 2)
        if "Q_final" in costs_doc:
            Q[-1] = np.asarray(costs_doc["Q_final"], dtype=float)

        costs = CostWeights(
            Q=Q,
            R=per_stage(costs_doc, "R", "costs", stages),
            ell=stage_stack(_require(costs_doc, "ell", "costs"), stages, (), "ell"),
            lam=float(_require(costs_doc, "lambda", "costs")),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, (ConfigError, ModelError)):
            raise
        raise ConfigError(str(e)) from e
    return model, costs


def dump_model_document(model: LinearGaussianModel, costs: CostWeights) -> dict:
    """Serialize model and costs; identical stages are written in stationary shorthand."""
    Q = costs.Q
    costs_doc = {"Q": compress_stages(Q[:-1]), "Q_final": Q[-1].tolist()}
    costs_doc.update(R=compress_stages(costs.R), ell=compress_stages(costs.ell), **{"lambda": costs.lam})
    return {
        "horizon": model.horizon,
        "model": {
            "A": compress_stages(model.A),
            "B": compress_stages(model.B),
            "C": compress_stages(model.C),
            "W": compress_stages(model.W),
            "V": compress_stages(model.V),
            "m0": model.m0.tolist(),
            "M0": model.M0.tolist(),
        },
        "costs": costs_doc,
    }


def load_experiment_document(path: str) -> dict:
    """Read a JSON experiment document. Raises ConfigError when unreadable."""
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config '{path}': {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"config '{path}' must contain a JSON object")
    return document
