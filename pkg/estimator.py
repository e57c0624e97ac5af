# estimator.py
#
# Encoder-side Kalman filter (information form), the decoder's equilibrium
# estimator, the encoder-held decoder replica, and a particle approximation
# of the signaling residuals (iota, Xi) for fixed mismatch schedulers.

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from model import ChannelSymbol, LinearGaussianModel, Payload, channel_step

# Systematic resampling is triggered below this fraction of the particle count.
RESAMPLE_FRACTION = 0.5
DEFAULT_PARTICLES = 10_000
WEIGHT_TOLERANCE = 1e-12


class EstimatorError(ArithmeticError):
    """Raised when a covariance or information matrix cannot be factorized."""


class ParticleDegeneracyError(EstimatorError):
    """Raised when conditioning removes every particle weight."""


def _spd_inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(matrix)
    except np.linalg.LinAlgError as e:
        raise EstimatorError(f"{what} is singular or not positive definite ({e})") from e
    inverse = scipy.linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


# -----------------------------------------------------------------------------
# Deterministic covariance sequences
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class EncoderCovariances:
    """
    Sequences for k = 0..N that do not depend on measurements:
    - P: prior covariance (P[0] = M0, P[k+1] = A O A' + W)
    - O: posterior covariance Cov[x(k) | I(k)]
    - K: Kalman gain O C' V^-1
    - Sigma_xi: covariance of the mismatch innovation K Theta K' with
      Theta = C P C' + V; Sigma_xi[0] is the covariance of the initial mismatch.
    """

    P: np.ndarray
    O: np.ndarray
    K: np.ndarray
    Sigma_xi: np.ndarray


def _posterior(prior: np.ndarray, C: np.ndarray, V: np.ndarray, stage: int):
    V_inv = _spd_inverse(V, f"V({stage})")
    information = _spd_inverse(prior, f"prior covariance at stage {stage}") + C.T @ V_inv @ C
    O = _spd_inverse(information, f"information matrix at stage {stage}")
    K = O @ C.T @ V_inv
    Theta = C @ prior @ C.T + V
    Sigma_xi = K @ Theta @ K.T
    return O, K, 0.5 * (Sigma_xi + Sigma_xi.T)


def encoder_covariances(model: LinearGaussianModel) -> EncoderCovariances:
    """Run the information-form covariance recursion once for the whole horizon."""
    N, n, p = model.horizon, model.n, model.p
    P = np.zeros((N + 1, n, n))
    O = np.zeros((N + 1, n, n))
    K = np.zeros((N + 1, n, p))
    Sigma_xi = np.zeros((N + 1, n, n))

    P[0] = model.M0
    for k in range(N + 1):
        if k > 0:
            A = model.A[k - 1]
            P[k] = A @ O[k - 1] @ A.T + model.W[k - 1]
        O[k], K[k], Sigma_xi[k] = _posterior(P[k], model.C[k], model.V[k], k)
    return EncoderCovariances(P=P, O=O, K=K, Sigma_xi=Sigma_xi)


def predicted_covariance(model: LinearGaussianModel, O: np.ndarray, k: int) -> np.ndarray:
    """A(k) O A(k)' + W(k): prior covariance at stage k+1."""
    return model.A[k] @ O @ model.A[k].T + model.W[k]


# -----------------------------------------------------------------------------
# Encoder filter
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class EncoderState:
    xcheck: np.ndarray
    O: np.ndarray
    K: np.ndarray


def encoder_update(
    state: EncoderState | None,
    y: np.ndarray,
    u_prev: np.ndarray | None,
    k: int,
    model: LinearGaussianModel,
    covariances: EncoderCovariances | None = None,
) -> EncoderState:
    """
    Stage-k posterior of the encoder's Kalman filter.

    At k = 0 the prior is (m0, M0) and ``state``/``u_prev`` are ignored.
    Otherwise ``state`` is the stage-(k-1) posterior and ``u_prev`` = u(k-1).
    Passing precomputed ``covariances`` skips the covariance recursion.
    """
    y = np.asarray(y, dtype=float)
    C = model.C[k]
    if k == 0:
        prior_mean = model.m0
        prior_cov = model.M0
    else:
        A, B = model.A[k - 1], model.B[k - 1]
        prior_mean = A @ state.xcheck + B @ np.asarray(u_prev, dtype=float)
        prior_cov = None if covariances is not None else predicted_covariance(model, state.O, k - 1)

    if covariances is not None:
        O, K = covariances.O[k], covariances.K[k]
    else:
        O, K, _ = _posterior(prior_cov, C, model.V[k], k)

    xcheck = prior_mean + K @ (y - C @ prior_mean)
    return EncoderState(xcheck=xcheck, O=O, K=K)


# -----------------------------------------------------------------------------
# Decoder estimator at equilibrium
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class DecoderState:
    xhat: np.ndarray
    E: np.ndarray


def decoder_init(model: LinearGaussianModel) -> DecoderState:
    """x̂(0) = m0, E(0) = M0."""
    return DecoderState(xhat=np.array(model.m0), E=np.array(model.M0))


def decoder_update_equilibrium(
    state: DecoderState,
    u_prev: np.ndarray,
    received: ChannelSymbol,
    O: np.ndarray,
    k: int,
    model: LinearGaussianModel,
) -> DecoderState:
    """
    Advance the decoder from stage k to k+1 after receiving z(k+1).

    x̂(k+1) = A x̂ + B u + sigma A ẽ, where ẽ is formed from the payload;
    E(k+1) = A E A' + W - sigma A (E - O(k)) A'. Implicit information is
    ignored (iota = 0, Xi = 0), which is exact at the equilibrium.
    """
    A, B, W = model.A[k], model.B[k], model.W[k]
    xhat = A @ state.xhat + B @ np.asarray(u_prev, dtype=float)
    E = A @ state.E @ A.T + W
    if isinstance(received, Payload):
        if received.kind == "mismatch":
            mismatch = received.value
        else:
            mismatch = received.value - state.xhat
        xhat = xhat + A @ mismatch
        E = E - A @ (state.E - O) @ A.T
    return DecoderState(xhat=xhat, E=0.5 * (E + E.T))


def encoder_replica_of_decoder(
    sigmas,
    payloads,
    controls,
    model: LinearGaussianModel,
    covariances: EncoderCovariances | None = None,
    kind: str = "estimate",
) -> DecoderState:
    """
    Rebuild the decoder state from the encoder's own records.

    ``sigmas[t]``, ``payloads[t]`` (x̌(t), or ẽ(t) for kind "mismatch") and
    ``controls[t]`` for t < k give the decoder state at stage k = len(sigmas).
    """
    covariances = covariances or encoder_covariances(model)
    state = decoder_init(model)
    for t, (sigma, payload, u) in enumerate(zip(sigmas, payloads, controls)):
        state = decoder_update_equilibrium(state, u, channel_step(sigma, payload, kind), covariances.O[t], t, model)
    return state


# -----------------------------------------------------------------------------
# Particle approximation of the signaling residuals
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class MismatchParticleCloud:
    """Weighted samples of ẽ(k) given the decoder's information."""

    particles: np.ndarray
    weights: np.ndarray

    @classmethod
    def gaussian(cls, covariance: np.ndarray, count: int, rng: np.random.Generator) -> "MismatchParticleCloud":
        covariance = np.atleast_2d(covariance)
        particles = rng.multivariate_normal(np.zeros(covariance.shape[0]), covariance, size=count)
        return cls(particles=particles, weights=np.full(count, 1.0 / count))

    @property
    def effective_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def systematic_resample(cloud: MismatchParticleCloud, rng: np.random.Generator) -> MismatchParticleCloud:
    """Systematic resampling: one uniform draw, evenly spaced positions on the weight CDF."""
    count = len(cloud.weights)
    positions = (rng.random() + np.arange(count)) / count
    cumulative = np.cumsum(cloud.weights)
    cumulative[-1] = 1.0
    indices = np.searchsorted(cumulative, positions)
    return MismatchParticleCloud(particles=cloud.particles[indices], weights=np.full(count, 1.0 / count))


@dataclass(frozen=True)
class SignalingResiduals:
    """iota, Xi at stage k, the cloud for stage k+1, and the standard error of iota."""

    iota: np.ndarray
    Xi: np.ndarray
    cloud: MismatchParticleCloud
    iota_stderr: np.ndarray


def _weighted_moments(particles: np.ndarray, weights: np.ndarray):
    mean = weights @ particles
    centered = particles - mean
    cov = (centered * weights[:, None]).T @ centered
    return mean, cov


def particle_residuals(
    cloud: MismatchParticleCloud,
    scheduler,
    k: int,
    model: LinearGaussianModel,
    covariances: EncoderCovariances,
    rng: np.random.Generator,
    observed_sigma: int = 0,
) -> SignalingResiduals:
    """
    Particle estimates of the residuals caused by implicit information.

    The scheduler must decide from (k, ẽ) only. With ẽ ~ cloud:
    iota = A E[ẽ | no transmission] (since E[ě | ...] = 0), and
    Xi = A (Cov[ẽ] - Cov[ẽ | no transmission]) A'. The returned cloud is
    conditioned on ``observed_sigma`` and pushed through the mismatch dynamics.
    """
    A = model.A[k]
    particles, weights = cloud.particles, cloud.weights
    decisions = np.array([scheduler.decide(k, e) for e in particles], dtype=int)
    silent = decisions == 0

    silent_mass = float(weights[silent].sum())
    if silent_mass <= 0.0:
        if observed_sigma == 0:
            raise ParticleDegeneracyError(
                f"stage {k}: no particle falls in the no-transmit region; use a larger cloud"
            )
        iota = np.zeros(model.n)
        iota_stderr = np.zeros(model.n)
        Xi = np.zeros((model.n, model.n))
    else:
        _, full_cov = _weighted_moments(particles, weights)
        silent_weights = weights[silent] / silent_mass
        silent_mean, silent_cov = _weighted_moments(particles[silent], silent_weights)
        iota = A @ silent_mean
        ess = 1.0 / np.sum(silent_weights**2)
        iota_stderr = np.sqrt(np.clip(np.diag(A @ silent_cov @ A.T), 0.0, None) / ess)
        Xi = A @ (full_cov - silent_cov) @ A.T
        Xi = 0.5 * (Xi + Xi.T)

    next_cloud = _propagate(cloud, silent, observed_sigma, k, model, covariances, rng)
    return SignalingResiduals(iota=iota, Xi=Xi, cloud=next_cloud, iota_stderr=iota_stderr)


def _propagate(cloud, silent, observed_sigma, k, model, covariances, rng) -> MismatchParticleCloud:
    count = len(cloud.weights)
    if k + 1 > model.horizon:
        innovation_cov = np.zeros((model.n, model.n))
    else:
        innovation_cov = covariances.Sigma_xi[k + 1]
    innovations = rng.multivariate_normal(np.zeros(model.n), innovation_cov, size=count)

    if observed_sigma:
        # Transmission reveals x̌(k): the next mismatch is the innovation alone.
        return MismatchParticleCloud(particles=innovations, weights=np.full(count, 1.0 / count))

    weights = np.where(silent, cloud.weights, 0.0)
    total = weights.sum()
    if total <= 0.0:
        raise ParticleDegeneracyError(f"stage {k}: conditioning on no transmission annihilated all weights")
    weights = weights / total
    if abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
        weights = weights / weights.sum()
    conditioned = MismatchParticleCloud(particles=cloud.particles, weights=weights)
    if conditioned.effective_size < RESAMPLE_FRACTION * count:
        logging.debug(f"stage {k}: resampling cloud (ESS {conditioned.effective_size:.0f} of {count})")
        conditioned = systematic_resample(conditioned, rng)
    particles = conditioned.particles @ model.A[k].T + innovations
    return MismatchParticleCloud(particles=particles, weights=conditioned.weights)
