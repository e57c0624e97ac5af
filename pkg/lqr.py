# lqr.py
#
# Backward Riccati pass for the certainty-equivalent controller and the
# derived quantities (Gamma, theta) consumed by the value of information.

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from model import CostWeights, LinearGaussianModel


class RiccatiError(ArithmeticError):
    """Raised when B'S(k+1)B + R(k) cannot be factorized."""


@dataclass(frozen=True)
class RiccatiSolution:
    """
    Per-stage Riccati quantities.

    - S: (N+3, n, n), S[N+1] = Q(N+1), S[N+2] = 0
    - L: (N+1, m, n) controller gains, u = -L(k) x
    - H: (N+1, m, m) curvature B(k)'S(k+1)B(k) + R(k)
    - Gamma: (N+2, n, n), Gamma[j] = L(j)' H(j) L(j); Gamma[N+1] = 0
    - theta: (N+1,) transmission price ell(k) * lambda
    """

    S: np.ndarray
    L: np.ndarray
    H: np.ndarray
    Gamma: np.ndarray
    theta: np.ndarray

    @property
    def horizon(self) -> int:
        return self.L.shape[0] - 1


def riccati_backward(model: LinearGaussianModel, costs: CostWeights) -> RiccatiSolution:
    """
    Solve the finite-horizon Riccati recursion backward from S(N+1) = Q(N+1).

    Linear solves go through a Cholesky factorization of H(k); H is never inverted.
    """
    N, n, m = model.horizon, model.n, model.m
    S = np.zeros((N + 3, n, n))
    L = np.zeros((N + 1, m, n))
    H = np.zeros((N + 1, m, m))
    Gamma = np.zeros((N + 2, n, n))

    S[N + 1] = costs.Q[N + 1]
    for k in range(N, -1, -1):
        A, B, S_next = model.A[k], model.B[k], S[k + 1]
        H[k] = B.T @ S_next @ B + costs.R[k]
        BSA = B.T @ S_next @ A
        try:
            factor = scipy.linalg.cho_factor(H[k])
        except np.linalg.LinAlgError as e:
            raise RiccatiError(f"stage {k}: B'S(k+1)B + R(k) is not positive definite ({e})") from e
        L[k] = scipy.linalg.cho_solve(factor, BSA)
        Gamma[k] = BSA.T @ L[k]
        Gamma[k] = 0.5 * (Gamma[k] + Gamma[k].T)
        S[k] = costs.Q[k] + A.T @ S_next @ A - Gamma[k]
        S[k] = 0.5 * (S[k] + S[k].T)

    theta = costs.ell * costs.lam
    logging.debug(f"Riccati pass done: N={N}, trace S(0)={np.trace(S[0]):.6g}")
    return RiccatiSolution(S=S, L=L, H=H, Gamma=Gamma, theta=theta)


def stage_cost_eta(x: np.ndarray, u: np.ndarray, k: int, ric: RiccatiSolution) -> float:
    """eta(k) = (u + L(k)x)' H(k) (u + L(k)x); zero iff u = -L(k)x. eta(N+1) = 0 is the caller's convention."""
    deviation = np.asarray(u, dtype=float) + ric.L[k] @ np.asarray(x, dtype=float)
    return float(deviation @ ric.H[k] @ deviation)


def expected_loss_offset(model: LinearGaussianModel, costs: CostWeights, ric: RiccatiSolution) -> float:
    """
    Policy-independent constant E[(N+1)Phi] - E[Psi]:
    m0'S(0)m0 + tr(S(0)M0) + sum_k tr(S(k+1)W(k)).
    """
    offset = float(model.m0 @ ric.S[0] @ model.m0) + float(np.trace(ric.S[0] @ model.M0))
    offset += float(np.einsum("kij,kji->", ric.S[1 : model.horizon + 2], model.W))
    return offset
