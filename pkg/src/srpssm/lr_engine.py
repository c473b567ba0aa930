"""Running likelihood ratios, Shiryayev-Roberts sums and their prior mixture.

The log-likelihood-ratio increment for a candidate theta is the difference
of one-step predictive log densities of two filters run on the same data,
one at theta and one at theta0.  Because LR_n^k = LR_n / LR_k, the SR sum
over change times obeys R_n = beta_n (1 + R_{n-1}), which is all that is
ever stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .filters import GainTable, KalmanState, kalman_step
from .ssm_core import ModelSpec


def softplus(t: float) -> float:
    """log(1 + e^t) without overflow; softplus(-inf) = 0."""
    if t > 0:
        return t + math.log1p(math.exp(-t))
    return math.log1p(math.exp(t))


@dataclass(frozen=True, eq=False)
class PriorGrid:
    """Discretised mixing measure on J = (lo, hi)."""

    nodes: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        if self.nodes.ndim != 1 or self.nodes.size == 0:
            raise ValueError("grid needs at least one node")
        if np.any(np.diff(self.nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("grid weights must be positive and sum to 1")

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def check_theta0(self, theta0: float) -> None:
        if not self.lo > theta0:
            raise ValueError(f"prior interval ({self.lo}, {self.hi}) must lie above theta0={theta0}")

    @classmethod
    def gauss_legendre(
        cls, lo: float, hi: float, m: int = 33, density: Callable[[np.ndarray], np.ndarray] | None = None
    ) -> "PriorGrid":
        """m Gauss-Legendre nodes on (lo, hi); weights = rule weights x F'(node), renormalised.

        ``density`` defaults to the uniform density 1 / (hi - lo).
        """
        if not hi > lo:
            raise ValueError("need lo < hi")
        x, w = np.polynomial.legendre.leggauss(m)
        nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        dens = np.full(m, 1.0 / (hi - lo)) if density is None else np.asarray(density(nodes), dtype=float)
        if np.any(dens <= 0):
            raise ValueError("prior density must be positive on the grid")
        weights = w * dens
        return cls(nodes, weights / weights.sum(), dens, lo, hi)

    @classmethod
    def point(cls, theta: float) -> "PriorGrid":
        return cls(np.array([float(theta)]), np.ones(1), np.ones(1), float(theta), float(theta))

    def density_at(self, theta: float) -> float:
        """F'(theta) by linear interpolation of the tabulated density."""
        return float(np.interp(theta, self.nodes, self.density))


@dataclass(frozen=True, eq=False)
class NodeSet:
    """Per-node filter arrays for the batch kernel; node 0 is theta0."""

    thetas: np.ndarray
    F: np.ndarray  # (m1, p, p)
    c: np.ndarray  # (m1, p)
    H: np.ndarray  # (m1, r, p)
    d: np.ndarray  # (m1, r)
    A: np.ndarray  # (m1, T, p, r)
    Linv: np.ndarray  # (m1, T, r, r)
    half_logdet: np.ndarray  # (m1, T)
    tlen: np.ndarray  # (m1,)
    init_mean: np.ndarray  # (m1, p)

    @classmethod
    def build(cls, model: ModelSpec, theta0: float, thetas: Sequence[float]) -> "NodeSet":
        all_thetas = np.concatenate([[theta0], np.asarray(thetas, dtype=float)])
        systems = [model.at(th) for th in all_thetas]
        tables = [GainTable.build(s) for s in systems]
        T = max(t.length for t in tables)
        m1, p, r = len(systems), model.p, model.r
        A = np.zeros((m1, T, p, r))
        Linv = np.zeros((m1, T, r, r))
        hl = np.zeros((m1, T))
        for j, tab in enumerate(tables):
            A[j, : tab.length] = tab.A
            Linv[j, : tab.length] = tab.Linv
            hl[j, : tab.length] = tab.half_logdet
        c = np.ascontiguousarray
        return cls(
            all_thetas,
            c(np.stack([s.F for s in systems])),
            c(np.stack([s.state_offset for s in systems])),
            c(np.stack([s.H for s in systems])),
            c(np.stack([s.obs_offset for s in systems])),
            A,
            Linv,
            hl,
            np.array([t.length for t in tables], dtype=np.int64),
            c(np.stack([s.stationary_mean() for s in systems])),
        )


class LRProcess:
    """Single-stream likelihood-ratio state, one observation at a time.

    Holds a theta0 Kalman filter, one filter per grid node, the running
    log LR_n per node and log R_n per node.  This is the reference path;
    the batch kernels compute the same quantities for many streams.
    """

    def __init__(self, model: ModelSpec, theta0: float, grid: PriorGrid, log_r0=None, q: float = 1.0):
        self.model = model
        self.grid = grid
        self.sys0 = model.at(theta0)
        self.systems = [model.at(th) for th in grid.nodes]
        self.state0 = KalmanState.stationary(self.sys0)
        self.states = [KalmanState.stationary(s) for s in self.systems]
        self.log_lr = np.zeros(grid.size)
        if log_r0 is None:
            log_r0 = np.full(grid.size, -np.inf)
        self.log_r = np.array(np.broadcast_to(log_r0, (grid.size,)), dtype=float)
        self.neg_log_q = -math.log(q)
        self.n = 0
        self._pending: np.ndarray | None = None

    def advance(self, y) -> np.ndarray:
        """Run every filter on ``y`` and return the increments g_n per node."""
        self.state0, inn0 = kalman_step(self.state0, self.sys0, y)
        g = np.empty(self.grid.size)
        for i, sys in enumerate(self.systems):
            self.states[i], inn = kalman_step(self.states[i], sys, y)
            g[i] = inn.loglik - inn0.loglik
        self.n += 1
        self._pending = g
        return g

    def loglr_increment(self, node: int, y=None) -> float:
        """Increment for ``node``; advances the filters first when ``y`` is given."""
        if y is not None:
            self.advance(y)
        if self._pending is None:
            raise RuntimeError("filters have not been advanced")
        return float(self._pending[node])

    def sr_update(self, y) -> np.ndarray:
        g = self.advance(y)
        self.log_lr += g
        self.log_r = g + self.neg_log_q + np.array([softplus(t) for t in self.log_r])
        return self.log_r

    def weighted_stat(self) -> float:
        """log sum_i w_i R_n(theta_i)."""
        return float(logsumexp(self.grid.log_weights + self.log_r))


def log_ndtr_diff(hi: float, lo: float) -> float:
    """log(Phi(hi) - Phi(lo)) for hi > lo, stable in both tails."""
    if lo >= 0:
        # upper tail: Phi(hi)-Phi(lo) = Phi(-lo) - Phi(-hi)
        hi, lo = -lo, -hi
    if hi <= 0:
        a, b = log_ndtr(hi), log_ndtr(lo)
        return float(a + np.log1p(-np.exp(b - a)))
    # lo < 0 < hi: Phi(hi) - Phi(lo) = 1 - Phi(lo) - Phi(-hi), both terms < 1/2
    return float(np.log1p(-(math.exp(log_ndtr(lo)) + math.exp(log_ndtr(-hi)))))


def uniform_mixture_closed_form(
    e, a_seq, sigmas, e0, sigmas0, theta0: float = 0.0, lo: float = 0.0, hi: float = 1.0
) -> float:
    """Log of  int_lo^hi prod_l exp{-(e_l - theta - a_l)^2 / 2 s_l^2 + (e0_l - theta0)^2 / 2 s0_l^2} d theta.

    With (lo, hi) = (0, 1) this is the mixture likelihood ratio under a
    uniform prior on the unit interval.  The integral is w.r.t. d theta,
    not normalised by the interval length.
    """
    e = np.asarray(e, dtype=float)
    a_seq = np.asarray(a_seq, dtype=float)
    s2 = np.asarray(sigmas, dtype=float) ** 2
    s02 = np.asarray(sigmas0, dtype=float) ** 2
    if np.any(s2 <= 0) or np.any(s02 <= 0):
        raise ValueError("scales must be positive")
    dev = e - a_seq
    alpha = float(np.sum(1.0 / s2))
    S = float(np.sum(dev / s2))
    sa = math.sqrt(alpha)
    log_const = float(np.sum((np.asarray(e0, dtype=float) - theta0) ** 2 / (2 * s02)) - np.sum(dev**2 / (2 * s2)))
    upper = sa * hi - S / sa
    lower = sa * lo - S / sa
    return log_const + S * S / (2 * alpha) + 0.5 * math.log(2 * math.pi / alpha) + log_ndtr_diff(upper, lower)
