"""Value of information: exact backward DP on a mismatch grid, and the closed-form quadratic approximation.

The encoder's value function depends on its information only through the
mismatch ẽ = x̌ - x̂. Per stage, the two alternatives are

    transmit: theta(k) + c(k) + E[V_{k+1}(xi)]
    silent:   (Aẽ)'Gamma(k+1)(Aẽ) + c(k) + E[V_{k+1}(Aẽ + xi)]

with xi ~ N(0, Sigma_xi(k+1)) and c(k) = tr(Gamma(k+1) P(k+1)) the
policy-independent part of E[eta(k+1)]. V_k is the smaller of the two, VoI_k
their difference, and V_{N+1} = 0.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.interpolate
import scipy.special

from estimator import EncoderCovariances, encoder_covariances
from helpers import get_max_table_dim, quadratic_form
from lqr import RiccatiSolution
from model import LinearGaussianModel

DEFAULT_GRID_POINTS = 201
# Grid half-width in units of the mismatch innovation standard deviation.
DEFAULT_GRID_BOUNDS = 6.0
# Nodes per dimension when a rule is given without a count.
DEFAULT_QUADRATURE_NODES = {1: 101, 2: 31}
HIGH_DIM_QUADRATURE_NODES = 9
QUADRATURE_RULES = ("auto", "gauss-hermite", "normal-cells", "piecewise-exact")
# Half-width of the normal-cells rule in standard deviations.
NORMAL_CELL_SPAN = 5.0
# Largest VoI change tolerated when grid points and quadrature nodes are doubled.
DEFAULT_CONVERGENCE_TOLERANCE = 1e-2
# Interpolation points evaluated at once by quadrature rules.
EXPECTATION_CHUNK_POINTS = 2_000_000

# How often to log table construction progress (in seconds)
TABLE_PROGRESS_INTERVAL = 10


class VoiTableError(ValueError):
    """Raised for unsupported grids, dimensions or stages."""


# -----------------------------------------------------------------------------
# Grid and quadrature
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class MismatchGrid:
    """Tensor grid of symmetric breakpoints, one array per mismatch dimension."""

    breakpoints: tuple

    def __post_init__(self):
        points = tuple(np.asarray(b, dtype=float) for b in self.breakpoints)
        for axis, b in enumerate(points):
            if b.ndim != 1 or len(b) % 2 == 0:
                raise VoiTableError(f"grid axis {axis}: need an odd number of breakpoints, got {len(b)}")
            if not np.all(np.diff(b) > 0):
                raise VoiTableError(f"grid axis {axis}: breakpoints must be strictly increasing")
            if not np.array_equal(b, -b[::-1]):
                raise VoiTableError(f"grid axis {axis}: breakpoints are not symmetric under ẽ -> -ẽ")
        object.__setattr__(self, "breakpoints", points)

    @classmethod
    def symmetric(cls, half_widths, points: int = DEFAULT_GRID_POINTS) -> "MismatchGrid":
        if points < 3 or points % 2 == 0:
            raise VoiTableError(f"grid points per dimension must be odd and >= 3, got {points}")
        axes = []
        for width in np.atleast_1d(np.asarray(half_widths, dtype=float)):
            half = np.linspace(0.0, width, (points + 1) // 2)[1:]
            axes.append(np.concatenate([-half[::-1], [0.0], half]))
        return cls(breakpoints=tuple(axes))

    @classmethod
    def for_model(
        cls,
        model: LinearGaussianModel,
        covariances: EncoderCovariances | None = None,
        points: int = DEFAULT_GRID_POINTS,
        bounds: float = DEFAULT_GRID_BOUNDS,
    ) -> "MismatchGrid":
        """Grid spanning ``bounds`` innovation standard deviations in every dimension."""
        covariances = covariances or encoder_covariances(model)
        innovations = covariances.Sigma_xi[1:] if model.horizon > 0 else covariances.Sigma_xi
        scale = np.sqrt(np.max(np.diagonal(innovations, axis1=1, axis2=2), axis=0))
        scale = np.where(scale > 0, scale, 1.0)
        return cls.symmetric(bounds * scale, points)

    @property
    def ndim(self) -> int:
        return len(self.breakpoints)

    @property
    def shape(self) -> tuple:
        return tuple(len(b) for b in self.breakpoints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.breakpoints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[-1] for b in self.breakpoints])

    def nodes(self) -> np.ndarray:
        """All grid nodes as a (G, n) array in C order of ``shape``."""
        mesh = np.meshgrid(*self.breakpoints, indexing="ij")
        return np.stack([axis.ravel() for axis in mesh], axis=-1)

    def contains(self, e_tilde: np.ndarray) -> bool:
        e_tilde = np.atleast_1d(e_tilde)
        return bool(np.all(e_tilde >= self.lower) and np.all(e_tilde <= self.upper))

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)


@dataclass(frozen=True)
class QuadratureSpec:
    """
    How E[V(c + xi)] is evaluated; ``nodes`` is s, the node count per dimension.

    ``nodes=None`` picks the per-dimension default on ``resolve``.
    """

    rule: str = "auto"
    nodes: int | None = None

    def __post_init__(self):
        if self.rule not in QUADRATURE_RULES:
            raise VoiTableError(f"unknown quadrature rule '{self.rule}', expected one of {QUADRATURE_RULES}")
        if self.nodes is None:
            return
        if self.nodes < 1 or self.nodes % 2 == 0:
            raise VoiTableError(f"quadrature nodes must be odd so the rule is symmetric, got {self.nodes}")
        if self.rule == "normal-cells" and self.nodes < 3:
            raise VoiTableError(f"normal-cells quadrature needs at least 3 nodes, got {self.nodes}")

    def resolve(self, n: int) -> "QuadratureSpec":
        rule = self.rule
        if rule == "auto":
            rule = "piecewise-exact" if n == 1 else "normal-cells"
        if rule == "piecewise-exact" and n != 1:
            raise VoiTableError("piecewise-exact quadrature supports scalar mismatch only")
        nodes = self.nodes if self.nodes is not None else DEFAULT_QUADRATURE_NODES.get(n, HIGH_DIM_QUADRATURE_NODES)
        return QuadratureSpec(rule, nodes)

    def refined(self) -> "QuadratureSpec":
        """Same rule with the node count doubled (kept odd)."""
        return QuadratureSpec(self.rule, None if self.nodes is None else 2 * self.nodes + 1)


def _tensor_rule(z: np.ndarray, w: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    mesh = np.meshgrid(*([z] * dim), indexing="ij")
    points = np.stack([axis.ravel() for axis in mesh], axis=-1)
    weight_mesh = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.prod(np.stack([axis.ravel() for axis in weight_mesh], axis=-1), axis=-1)
    return points, weights


def gauss_hermite_rule(nodes: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product standard normal rule; points and weights are exactly symmetric."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    z = 0.5 * (z - z[::-1])
    w = 0.5 * (w + w[::-1])
    return _tensor_rule(z, w / w.sum(), dim)


def normal_cell_rule(nodes: int, dim: int, span: float = NORMAL_CELL_SPAN) -> tuple[np.ndarray, np.ndarray]:
    """
    Tensor-product rule on equally spaced nodes over [-span, span].

    Each node carries the standard normal mass of its cell (tails folded into the end
    nodes); nodes are then scaled so the second moment is exactly one. The error on
    integrands with a kink, such as the min() in the value recursion, shrinks with the
    node spacing squared.
    """
    z = np.linspace(-span, span, nodes)
    z = 0.5 * (z - z[::-1])
    edges = np.concatenate([[-np.inf], 0.5 * (z[:-1] + z[1:]), [np.inf]])
    w = np.diff(scipy.special.ndtr(edges))
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    z = z / np.sqrt(w @ z**2)
    return _tensor_rule(z, w, dim)


def _covariance_factor(covariance: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = np.linalg.eigh(covariance)
    return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def interpolate(grid: MismatchGrid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of grid ``values`` at ``points`` (..., n), clamped to the grid."""
    points = grid.clamp(np.asarray(points, dtype=float))
    if grid.ndim == 1:
        return np.interp(points[..., 0], grid.breakpoints[0], values)
    interpolator = scipy.interpolate.RegularGridInterpolator(grid.breakpoints, values, method="linear")
    return interpolator(points.reshape(-1, grid.ndim)).reshape(points.shape[:-1])


def _piecewise_exact_expectation(grid: MismatchGrid, values: np.ndarray, centers: np.ndarray, std: float):
    """E[f(c + xi)], xi ~ N(0, std^2), for the clamped piecewise-linear interpolant f of ``values``."""
    g = grid.breakpoints[0]
    c = centers[:, 0]
    if std <= 0.0:
        return np.interp(np.clip(c, g[0], g[-1]), g, values)
    z = (g[None, :] - c[:, None]) / std
    cdf = scipy.special.ndtr(z)
    pdf = np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)
    mass = np.diff(cdf, axis=1)
    slope = np.diff(values) / np.diff(g)
    offset = c[:, None] - g[None, :-1]
    cells = values[None, :-1] * mass + slope[None, :] * (offset * mass + std * (pdf[:, :-1] - pdf[:, 1:]))
    tails = values[0] * cdf[:, 0] + values[-1] * (1.0 - cdf[:, -1])
    return tails + cells.sum(axis=1)


def expectation(
    grid: MismatchGrid, values: np.ndarray, centers: np.ndarray, covariance: np.ndarray, quadrature: QuadratureSpec
) -> np.ndarray:
    """E[V(c + xi)] for every row c of ``centers``, xi ~ N(0, covariance)."""
    centers = np.atleast_2d(centers)
    rule = quadrature.resolve(grid.ndim)
    if rule.rule == "piecewise-exact":
        return _piecewise_exact_expectation(grid, values, centers, float(np.sqrt(covariance[0, 0])))
    rule_points = gauss_hermite_rule if rule.rule == "gauss-hermite" else normal_cell_rule
    standard, weights = rule_points(rule.nodes, grid.ndim)
    offsets = standard @ _covariance_factor(covariance).T
    chunk = max(1, EXPECTATION_CHUNK_POINTS // len(offsets))
    result = np.empty(len(centers))
    for start in range(0, len(centers), chunk):
        points = centers[start : start + chunk, None, :] + offsets[None, :, :]
        result[start : start + chunk] = interpolate(grid, values, points) @ weights
    return result


def _reflect_average(values: np.ndarray) -> np.ndarray:
    return 0.5 * (values + np.flip(values))


# -----------------------------------------------------------------------------
# Table
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class VoiTable:
    """
    Per-stage samples on ``grid``:
    - value: (N+2, *shape), value[N+1] = 0
    - voi: (N+1, *shape), V|sigma=0 - V|sigma=1
    - rho: (N+1, *shape), E[V_{k+1}(Aẽ+xi)] - E[V_{k+1}(xi)]
    """

    grid: MismatchGrid
    quadrature: QuadratureSpec
    value: np.ndarray
    voi: np.ndarray
    rho: np.ndarray
    model: LinearGaussianModel
    ric: RiccatiSolution
    covariances: EncoderCovariances

    @property
    def horizon(self) -> int:
        return self.voi.shape[0] - 1


def build_voi_table(
    model: LinearGaussianModel,
    ric: RiccatiSolution,
    grid: MismatchGrid | None = None,
    quadrature: QuadratureSpec | None = None,
    covariances: EncoderCovariances | None = None,
    max_dim: int | None = None,
) -> VoiTable:
    """
    Fill the value and VoI tables backward from k = N.

    Raises VoiTableError when the mismatch dimension exceeds ``max_dim``
    (default from VOI_MAX_TABLE_DIM); use the quadratic approximation then.
    """
    n, N = model.n, model.horizon
    max_dim = max_dim if max_dim is not None else get_max_table_dim()
    if n > max_dim:
        raise VoiTableError(
            f"exact VoI tables support mismatch dimension <= {max_dim}, got {n}; "
            "use the quadratic approximation (scheduler kind 'voi-quadratic') instead"
        )
    covariances = covariances or encoder_covariances(model)
    grid = grid or MismatchGrid.for_model(model, covariances)
    if grid.ndim != n:
        raise VoiTableError(f"grid has {grid.ndim} dimensions, model mismatch has {n}")
    quadrature = (quadrature or QuadratureSpec()).resolve(n)

    shape = grid.shape
    nodes = grid.nodes()
    origin = np.zeros((1, n))
    value = np.zeros((N + 2, *shape))
    voi = np.zeros((N + 1, *shape))
    rho = np.zeros((N + 1, *shape))

    logging.info(
        f"Building VoI table: N={N}, grid={shape}, quadrature={quadrature.rule}"
        + (f" s={quadrature.nodes}" if quadrature.rule == "gauss-hermite" else "")
    )
    last_log = time.time()
    for k in range(N, -1, -1):
        shifted = nodes @ model.A[k].T
        benefit = np.einsum("gi,ij,gj->g", shifted, ric.Gamma[k + 1], shifted)
        if k == N:
            stage_constant = 0.0
            expected_silent = np.zeros(len(nodes))
            expected_sent = 0.0
        else:
            Sigma_xi = covariances.Sigma_xi[k + 1]
            stage_constant = float(np.trace(ric.Gamma[k + 1] @ covariances.P[k + 1]))
            expected_silent = expectation(grid, value[k + 1], shifted, Sigma_xi, quadrature)
            expected_sent = float(expectation(grid, value[k + 1], origin, Sigma_xi, quadrature)[0])

        sent = ric.theta[k] + stage_constant + expected_sent
        silent = benefit + stage_constant + expected_silent
        voi[k] = _reflect_average((silent - sent).reshape(shape))
        rho[k] = _reflect_average((expected_silent - expected_sent).reshape(shape))
        value[k] = _reflect_average(np.minimum(silent, sent).reshape(shape))

        if _edge_is_silent(voi[k], ric.Gamma[k + 1]):
            logging.warning(
                f"stage {k}: VoI is negative on the grid boundary; the transmit threshold "
                "lies beyond the grid, widen grid bounds"
            )
        now = time.time()
        if now - last_log >= TABLE_PROGRESS_INTERVAL:
            logging.info(f"VoI table: stage {k} of {N} done")
            last_log = now

    return VoiTable(
        grid=grid,
        quadrature=quadrature,
        value=value,
        voi=voi,
        rho=rho,
        model=model,
        ric=ric,
        covariances=covariances,
    )


def _bisect_axis(breakpoints: np.ndarray) -> np.ndarray:
    midpoints = 0.5 * (breakpoints[:-1] + breakpoints[1:])
    return np.sort(np.concatenate([breakpoints, midpoints]))


def refinement_gap(
    table: VoiTable, points: np.ndarray | None = None, tolerance: float = DEFAULT_CONVERGENCE_TOLERANCE
) -> float:
    """
    Rebuild ``table`` with the grid spacing halved and the quadrature nodes doubled,
    and return the largest |VoI| change at ``points`` (default: the table's own
    nodes) over all stages. Logs a warning above ``tolerance``.
    """
    finer = MismatchGrid(breakpoints=tuple(_bisect_axis(b) for b in table.grid.breakpoints))
    refined = build_voi_table(
        table.model,
        table.ric,
        grid=finer,
        quadrature=table.quadrature.refined(),
        covariances=table.covariances,
        max_dim=table.grid.ndim,
    )
    points = table.grid.nodes() if points is None else np.asarray(points, dtype=float).reshape(-1, table.grid.ndim)
    gap = max(
        float(np.max(np.abs(voi_values(table, k, points) - voi_values(refined, k, points))))
        for k in range(table.horizon + 1)
    )
    if gap > tolerance:
        logging.warning(f"VoI table changes by {gap:.3g} under refinement (tolerance {tolerance:g})")
    return gap


def _edge_is_silent(voi_stage: np.ndarray, gamma_next: np.ndarray) -> bool:
    # A zero Gamma(k+1) never transmits, so a silent edge is expected there.
    if not np.any(gamma_next):
        return False
    edges = [np.take(voi_stage, index, axis=axis) for axis in range(voi_stage.ndim) for index in (0, -1)]
    return any(np.any(edge < 0) for edge in edges)


def _check_stage(table: VoiTable, k: int):
    if not 0 <= k <= table.horizon:
        raise VoiTableError(f"stage {k} out of range 0..{table.horizon}")


def voi_quadratic(e_tilde: np.ndarray, k: int, ric: RiccatiSolution, model: LinearGaussianModel) -> float:
    """Closed-form approximation ẽ'A(k)'Gamma(k+1)A(k)ẽ - theta(k)."""
    shifted = model.A[k] @ np.atleast_1d(np.asarray(e_tilde, dtype=float))
    return quadratic_form(shifted, ric.Gamma[k + 1]) - float(ric.theta[k])


def voi_lookup(table: VoiTable, k: int, e_tilde: np.ndarray) -> float:
    """
    VoI_k(ẽ): interpolated inside the grid (exact at nodes); beyond it the
    quadratic part is evaluated exactly and only rho is clamped.
    """
    e_tilde = np.atleast_1d(np.asarray(e_tilde, dtype=float))
    return float(voi_values(table, k, e_tilde[None, :])[0])


def voi_values(table: VoiTable, k: int, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`voi_lookup` over the rows of ``points`` (M, n)."""
    _check_stage(table, k)
    points = np.asarray(points, dtype=float).reshape(-1, table.grid.ndim)
    inside = np.all((points >= table.grid.lower) & (points <= table.grid.upper), axis=1)
    values = interpolate(table.grid, table.voi[k], points)
    if not np.all(inside):
        outside = points[~inside]
        shifted = outside @ table.model.A[k].T
        quadratic = np.einsum("gi,ij,gj->g", shifted, table.ric.Gamma[k + 1], shifted) - table.ric.theta[k]
        values[~inside] = quadratic + interpolate(table.grid, table.rho[k], outside)
    return values


def rho_extract(table: VoiTable, k: int, e_tilde: np.ndarray) -> float:
    """rho_k(ẽ) = E[V_{k+1}(Aẽ + xi)] - E[V_{k+1}(xi)], interpolated (clamped) from the table."""
    _check_stage(table, k)
    e_tilde = np.atleast_1d(np.asarray(e_tilde, dtype=float))
    return float(interpolate(table.grid, table.rho[k], e_tilde[None, :])[0])


def value_lookup(table: VoiTable, k: int, e_tilde: np.ndarray) -> float:
    """Expected remaining Psi-cost V_k(ẽ) under the table's greedy scheduler."""
    if not 0 <= k <= table.horizon + 1:
        raise VoiTableError(f"stage {k} out of range 0..{table.horizon + 1}")
    e_tilde = np.atleast_1d(np.asarray(e_tilde, dtype=float))
    return float(interpolate(table.grid, table.value[k], e_tilde[None, :])[0])


def expected_psi(table: VoiTable) -> float:
    """Predicted E[Psi] under the table's scheduler: tr(Gamma(0) M0) + E[V_0(ẽ(0))]."""
    model, ric, covariances = table.model, table.ric, table.covariances
    initial = expectation(table.grid, table.value[0], np.zeros((1, model.n)), covariances.Sigma_xi[0], table.quadrature)
    return float(np.trace(ric.Gamma[0] @ model.M0)) + float(initial[0])


# -----------------------------------------------------------------------------
# Serialization
# -----------------------------------------------------------------------------
def table_header(table: VoiTable) -> dict:
    """JSON metadata written next to the table CSV."""
    return {
        "horizon": table.horizon,
        "dimension": table.grid.ndim,
        "grid_points": list(table.grid.shape),
        "grid_lower": table.grid.lower.tolist(),
        "grid_upper": table.grid.upper.tolist(),
        "quadrature_rule": table.quadrature.rule,
        "quadrature_nodes": table.quadrature.nodes,
        "expected_psi": expected_psi(table),
        "columns": table_columns(table),
    }


def table_columns(table: VoiTable) -> list[str]:
    return ["stage", *[f"e{i}" for i in range(table.grid.ndim)], "V", "VoI", "rho"]


def table_rows(table: VoiTable):
    """Yield CSV rows (stage, node coordinates, V, VoI, rho), stage-major."""
    nodes = table.grid.nodes()
    for k in range(table.horizon + 1):
        V, voi, rho = table.value[k].ravel(), table.voi[k].ravel(), table.rho[k].ravel()
        for g, node in enumerate(nodes):
            yield [k, *node.tolist(), float(V[g]), float(voi[g]), float(rho[g])]
