"""Pure numerical helpers shared by the model, estimator and simulation modules."""

import math
import os

import numpy as np

# Asymmetry below this is treated as config rounding and removed.
SYMMETRY_TOLERANCE = 1e-12

DEFAULT_WORKERS = 4
DEFAULT_MAX_TABLE_DIM = 2


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Return the symmetric part of a square matrix.

    >>> symmetrize(np.array([[1.0, 2.0], [0.0, 1.0]])).tolist()
    [[1.0, 1.0], [1.0, 1.0]]
    """
    return 0.5 * (matrix + matrix.T)


def asymmetry(matrix: np.ndarray) -> float:
    """Largest absolute difference between a matrix and its transpose.

    >>> asymmetry(np.eye(2))
    0.0
    >>> asymmetry(np.array([[1.0, 2.0], [0.0, 1.0]]))
    2.0
    """
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.abs(matrix - matrix.T)))


def is_positive_definite(matrix: np.ndarray) -> bool:
    """Cholesky-based positive definiteness test.

    >>> is_positive_definite(np.eye(3))
    True
    >>> is_positive_definite(np.zeros((1, 1)))
    False
    """
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def is_positive_semidefinite(matrix: np.ndarray, tol: float = 1e-12) -> bool:
    """Eigenvalue test with a tolerance scaled by the matrix norm.

    >>> is_positive_semidefinite(np.diag([1.0, 0.0]))
    True
    >>> is_positive_semidefinite(np.diag([1.0, -1.0]))
    False
    """
    eigenvalues = np.linalg.eigvalsh(symmetrize(matrix))
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    return bool(np.min(eigenvalues) >= -tol * scale)


def stage_stack(value, stages: int, shape: tuple, name: str) -> np.ndarray:
    """Expand a stationary value or a per-stage list to an array of ``stages`` entries.

    A single entry with the expected ``shape`` is replicated across all stages.

    >>> stage_stack([[2.0]], 3, (1, 1), "A").shape
    (3, 1, 1)
    >>> stage_stack(0.5, 2, (), "ell").tolist()
    [0.5, 0.5]
    >>> stage_stack([1.0, 2.0], 2, (), "ell").tolist()
    [1.0, 2.0]
    """
    array = np.asarray(value, dtype=float)
    if array.shape == shape:
        return np.broadcast_to(array, (stages, *shape)).copy()
    if array.shape == (stages, *shape):
        return array.copy()
    raise ValueError(f"{name}: expected shape {shape} or ({stages}, ...{shape}), got {array.shape}")


def compress_stages(array: np.ndarray) -> list | float:
    """Inverse of :func:`stage_stack`: a single entry when every stage is identical.

    >>> compress_stages(np.ones((3, 1, 1)))
    [[1.0]]
    >>> compress_stages(np.array([1.0, 2.0]))
    [1.0, 2.0]
    """
    if len(array) > 0 and all(np.array_equal(array[0], stage) for stage in array[1:]):
        return array[0].tolist()
    return array.tolist()


def fsum_mean(values) -> float:
    """Compensated mean, independent of summation order up to rounding of the result.

    >>> fsum_mean([0.1] * 10)
    0.1
    """
    values = list(values)
    if not values:
        return math.nan
    return math.fsum(values) / len(values)


def mean_and_stderr(values) -> tuple[float, float]:
    """Sample mean and standard error of the mean.

    >>> mean_and_stderr([1.0, 1.0, 1.0])
    (1.0, 0.0)
    >>> mean_and_stderr([5.0])[1]
    nan
    """
    values = [float(v) for v in values]
    mean = fsum_mean(values)
    if len(values) < 2:
        return mean, math.nan
    variance = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(variance / len(values))


def quadratic_form(vector: np.ndarray, matrix: np.ndarray) -> float:
    """``vector.T @ matrix @ vector`` as a Python float.

    >>> quadratic_form(np.array([1.0, 2.0]), np.eye(2))
    5.0
    """
    return float(vector @ matrix @ vector)


def get_workers() -> int:
    """Get rollout thread count from VOI_WORKERS env var, or default."""
    try:
        workers = int(os.environ.get("VOI_WORKERS", DEFAULT_WORKERS))
    except ValueError:
        return DEFAULT_WORKERS
    return workers if workers > 0 else DEFAULT_WORKERS


def get_max_table_dim() -> int:
    """Get the largest mismatch dimension allowed for exact tables from VOI_MAX_TABLE_DIM."""
    try:
        return int(os.environ.get("VOI_MAX_TABLE_DIM", DEFAULT_MAX_TABLE_DIM))
    except ValueError:
        return DEFAULT_MAX_TABLE_DIM
