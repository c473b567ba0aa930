"""One-step predictive likelihoods: exact Kalman and bootstrap particle filters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .ssm_core import LinearSystem, psd_sqrt

LOG_2PI = math.log(2.0 * math.pi)


class FilterError(RuntimeError):
    """Numerical failure inside a filter; carries the offending step index."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


@dataclass(frozen=True, eq=False)
class KalmanState:
    mean: np.ndarray  # x_{n|n-1}
    cov: np.ndarray  # P_{n|n-1}
    step: int = 0

    @classmethod
    def stationary(cls, sys: LinearSystem) -> "KalmanState":
        return cls(sys.stationary_mean(), sys.stationary_cov(), 0)


@dataclass(frozen=True, eq=False)
class Innovation:
    residual: np.ndarray
    cov: np.ndarray
    loglik: float


def _chol(V: np.ndarray, step: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance V is not positive definite", step) from None


def kalman_step(state: KalmanState, sys: LinearSystem, y) -> tuple[KalmanState, Innovation]:
    """Advance the predictive recursion by one observation.

    The covariance update is the plain Riccati form followed by
    symmetrisation; the log density uses a Cholesky solve.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x, P = state.mean, state.cov
    step = state.step + 1
    e = y - sys.H @ x - sys.obs_offset
    PHt = P @ sys.H.T
    V = sys.H @ PHt + sys.Sigma2
    V = 0.5 * (V + V.T)
    L = _chol(V, step)
    alpha = solve_triangular(L, e, lower=True)
    ll = -0.5 * float(alpha @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * sys.r * LOG_2PI
    gain = cho_solve((L, True), PHt.T).T  # P H^T V^{-1}
    x_next = sys.F @ (x + gain @ e) + sys.state_offset
    P_next = sys.F @ (P - gain @ PHt.T) @ sys.F.T + sys.Sigma1
    P_next = 0.5 * (P_next + P_next.T)
    return KalmanState(x_next, P_next, step), Innovation(e, V, ll)


def kalman_loglik(sys: LinearSystem, ys) -> float:
    """Joint log-likelihood of ``ys`` with the state started at its stationary law."""
    state = KalmanState.stationary(sys)
    total = 0.0
    for y in np.asarray(ys, dtype=float).reshape(len(ys), -1):
        state, inn = kalman_step(state, sys, y)
        total += inn.loglik
    return total


@dataclass(frozen=True, eq=False)
class GainTable:
    """Data-independent Kalman quantities for one parameter value.

    The covariance recursion does not depend on the observations, so the
    predictor gain ``F P H^T V^{-1}``, the inverse Cholesky factor of V and
    the half log-determinant are tabulated once until P converges; the
    last row is reused thereafter.
    """

    A: np.ndarray  # (T, p, r)
    Linv: np.ndarray  # (T, r, r)
    half_logdet: np.ndarray  # (T,)

    @property
    def length(self) -> int:
        return self.A.shape[0]

    @classmethod
    def build(cls, sys: LinearSystem, max_len: int = 5000, tol: float = 1e-13) -> "GainTable":
        P = sys.stationary_cov()
        As, Ls, lds = [], [], []
        for t in range(max_len):
            PHt = P @ sys.H.T
            V = sys.H @ PHt + sys.Sigma2
            V = 0.5 * (V + V.T)
            L = _chol(V, t + 1)
            gain = cho_solve((L, True), PHt.T).T
            As.append(sys.F @ gain)
            Ls.append(solve_triangular(L, np.eye(sys.r), lower=True))
            lds.append(float(np.log(np.diag(L)).sum()))
            P_next = sys.F @ (P - gain @ PHt.T) @ sys.F.T + sys.Sigma1
            P_next = 0.5 * (P_next + P_next.T)
            if np.abs(P_next - P).max() <= tol * (1.0 + np.abs(P).max()):
                break
            P = P_next
        return cls(np.array(As), np.array(Ls), np.array(lds))


@dataclass(eq=False)
class ParticleCloud:
    particles: np.ndarray  # (M, p)
    logw: np.ndarray  # (M,), normalised
    loglik: float = 0.0
    step: int = 0

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.exp(2.0 * self.logw).sum())

    @classmethod
    def stationary(cls, sys: LinearSystem, n_particles: int, rng: np.random.Generator) -> "ParticleCloud":
        root = psd_sqrt(sys.stationary_cov())
        x = sys.stationary_mean() + rng.standard_normal((n_particles, sys.p)) @ root.T
        return cls(x, np.full(n_particles, -math.log(n_particles)))

    @classmethod
    def point(cls, x0, n_particles: int = 1) -> "ParticleCloud":
        x = np.tile(np.atleast_1d(np.asarray(x0, dtype=float)), (n_particles, 1))
        return cls(x, np.full(n_particles, -math.log(n_particles)))


def systematic_resample(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    M = logw.size
    cdf = np.cumsum(np.exp(logw))
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(M)) / M
    return np.searchsorted(cdf, positions, side="right").clip(max=M - 1)


def particle_step(cloud: ParticleCloud, sys: LinearSystem, y, rng: np.random.Generator) -> float:
    """Bootstrap step in place; returns the incremental log-likelihood estimate."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    step = cloud.step + 1
    x = cloud.particles @ sys.F.T + sys.state_offset
    root = psd_sqrt(sys.Sigma1)
    if np.any(root):
        x += rng.standard_normal(x.shape) @ root.T
    try:
        L = np.linalg.cholesky(sys.Sigma2)
    except np.linalg.LinAlgError:
        raise FilterError("particle filter needs a positive definite observation covariance", step) from None
    resid = y - x @ sys.H.T - sys.obs_offset
    alpha = solve_triangular(L, resid.T, lower=True, check_finite=False)
    logf = -0.5 * (alpha * alpha).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * sys.r * LOG_2PI
    if not np.isfinite(logf).any():
        raise FilterError("particle collapse: every particle likelihood underflowed", step)
    incr = float(logsumexp(cloud.logw + logf))
    logw = cloud.logw + logf - incr
    logw -= logsumexp(logw)
    cloud.particles = x
    cloud.logw = logw
    cloud.loglik += incr
    cloud.step = step
    if cloud.ess < cloud.size / 2:
        idx = systematic_resample(logw, rng)
        cloud.particles = x[idx]
        cloud.logw = np.full(cloud.size, -math.log(cloud.size))
    return incr


def particle_loglik(sys: LinearSystem, ys, n_particles: int, rng: np.random.Generator) -> float:
    cloud = ParticleCloud.stationary(sys, n_particles, rng)
    for y in np.asarray(ys, dtype=float).reshape(len(ys), -1):
        particle_step(cloud, sys, y, rng)
    return cloud.loglik
