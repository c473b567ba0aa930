"""Constants of the second-order delay expansion and the regularity checks.

All random-walk quantities are computed from S_n = log LR_n(theta) simulated
under the post-change law from time 1, with the hidden state started from
the theta0 stationary law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .detectors import BatchEngine, DetectorConfig, estimate_psi
from .lr_engine import PriorGrid
from .results import MCEstimate, combined_se, ratio_estimate
from .ssm_core import ChangeScenario, ModelSpec, rep_rng

E_ABS_NORMAL = 2.0 / math.sqrt(2.0 * math.pi)
LADDER_CAP = 1_000_000


class DriftError(RuntimeError):
    """The log-likelihood-ratio walk does not drift upward."""


# -- increment sources -------------------------------------------------------


class ModelWalk:
    """Increments of log LR_n(theta) vs theta0 with data generated at ``data_theta``."""

    def __init__(self, model: ModelSpec, theta: float, theta0: float, data_theta: float | None = None):
        if theta == theta0:
            raise ValueError("theta must differ from theta0")
        self.model, self.theta, self.theta0 = model, float(theta), float(theta0)
        data_theta = self.theta if data_theta is None else float(data_theta)
        scen = ChangeScenario(theta0, data_theta, 1) if data_theta != theta0 else ChangeScenario(theta0, theta0)
        cfg = DetectorConfig(b=math.inf, grid=PriorGrid.point(theta), rule="lr", max_steps=2**62)
        self.engine = BatchEngine(model, scen, cfg)

    def walk(self, rep_ids, seed, consume, max_steps) -> int:
        def inner(g, live):
            return consume(g[:, :, 0], live)

        return self.engine.walk(np.asarray(rep_ids), seed, inner, max_steps)


class GaussianWalk:
    """i.i.d. N(mu, sigma^2) increments; ``sigma=0`` gives a deterministic walk."""

    def __init__(self, mu: float, sigma: float = 1.0):
        self.mu, self.sigma = float(mu), float(sigma)

    def walk(self, rep_ids, seed, consume, max_steps) -> int:
        rep_ids = np.asarray(rep_ids)
        rngs = [rep_rng(seed, int(i)) for i in rep_ids]
        live = np.arange(rep_ids.size)
        steps = 0
        L = 32
        while live.size and steps < max_steps:
            L = min(L, max_steps - steps)
            g = np.empty((live.size, L))
            for row, i in enumerate(live):
                g[row] = self.mu + self.sigma * rngs[i].standard_normal(L)
            done = consume(g, live)
            live = live[~done]
            steps += L
            L = min(2 * L, 1024)
        return int(live.size)


def _as_walk(model, theta, theta0):
    if hasattr(model, "walk"):
        return model
    return ModelWalk(model, theta, theta0)


def _walk_all(walk, n_reps, seed, consume, max_steps, chunk=4096) -> int:
    left = 0
    for start in range(0, n_reps, chunk):
        ids = np.arange(start, min(n_reps, start + chunk))
        left += walk.walk(ids, seed, lambda g, live, s=start: consume(g, live + s), max_steps)
    return left


def _fixed_length(walk, n_reps, n_steps, seed) -> np.ndarray:
    out = np.empty((n_reps, n_steps))
    pos = np.zeros(n_reps, dtype=np.int64)

    def consume(g, live):
        for row, i in enumerate(live):
            k = min(g.shape[1], n_steps - pos[i])
            out[i, pos[i] : pos[i] + k] = g[row, :k]
            pos[i] += k
        return pos[live] >= n_steps

    _walk_all(walk, n_reps, seed, consume, n_steps)
    return out


# -- estimators ---------------------------------------------------------------


def estimate_kl(model, theta=None, theta0=None, n_steps: int = 500, n_reps: int = 1000, seed: int = 0) -> MCEstimate:
    """Per-observation mean of log LR_n(theta) under the post-change law."""
    if theta is not None and theta == theta0:
        raise ValueError("theta must differ from theta0 (K(theta0, theta0) = 0)")
    walk = _as_walk(model, theta, theta0)
    g = _fixed_length(walk, n_reps, n_steps, seed)
    est = MCEstimate.from_samples(g.sum(axis=1) / n_steps, seed=seed)
    if est.mean + 3 * est.se <= 0:
        est = MCEstimate(est.mean, est.se, est.n_effective, 0, seed, ("NONPOSITIVE_KL",))
    return est


def _require_drift(walk, seed) -> float:
    pilot = estimate_kl(walk, n_steps=200, n_reps=200, seed=seed + 7919)
    if pilot.mean <= 0:
        raise DriftError(f"log-LR walk has non-positive drift (pilot K = {pilot.mean:.4g})")
    return pilot.mean


@dataclass(frozen=True)
class LadderStats:
    mean_height: float
    mean_sq_height: float
    rho: float
    rho_se: float
    direct: dict  # b -> MCEstimate of the overshoot
    n_reps: int
    n_aborted: int


def _first_passage(walk, n_reps, seed, levels: Sequence[float], strict: bool, max_steps: int):
    """S at the first passage over each level (NaN if not reached)."""
    levels = np.asarray(levels, dtype=float)
    s_cur = np.zeros(n_reps)
    hit = np.full((n_reps, levels.size), np.nan)

    def consume(g, live):
        cs = s_cur[live, None] + np.nancumsum(g, axis=1)
        valid = ~np.isnan(g)
        for j, lev in enumerate(levels):
            todo = np.isnan(hit[live, j])
            cross = (cs > lev) if strict else (cs >= lev)
            cross &= valid
            any_c = cross.any(axis=1) & todo
            if any_c.any():
                first = cross.argmax(axis=1)
                rows = np.flatnonzero(any_c)
                hit[live[rows], j] = cs[rows, first[rows]]
        last = valid.sum(axis=1) - 1
        s_cur[live] = cs[np.arange(live.size), np.maximum(last, 0)]
        return ~np.isnan(hit[live]).any(axis=1)

    aborted = _walk_all(walk, n_reps, seed, consume, max_steps)
    return hit, aborted


def ladder_simulate(
    model,
    theta=None,
    theta0=None,
    n_reps: int = 100_000,
    seed: int = 0,
    direct_levels: Sequence[float] = (10.0, 20.0),
    n_direct: int | None = None,
    data_theta: float | None = None,
) -> LadderStats:
    """First strict ascent ladder heights and direct overshoots.

    The overshoot limit is estimated as E S^2 / (2 E S) over ladder heights
    and compared against the mean overshoot at each of ``direct_levels``.
    """
    walk = model if hasattr(model, "walk") else ModelWalk(model, theta, theta0, data_theta)
    _require_drift(walk, seed)
    heights, aborted = _first_passage(walk, n_reps, seed, [0.0], True, LADDER_CAP)
    h = heights[:, 0]
    h = h[~np.isnan(h)]
    rho, rho_se = ratio_estimate(h * h, 2.0 * h)
    direct = {}
    if direct_levels:
        nd = n_direct or n_reps
        hits, _ = _first_passage(walk, nd, seed + 1, direct_levels, False, LADDER_CAP)
        for j, lev in enumerate(direct_levels):
            col = hits[:, j]
            ok = ~np.isnan(col)
            direct[float(lev)] = MCEstimate.from_samples(col[ok] - lev, seed=seed + 1, n_censored=int((~ok).sum()))
    return LadderStats(float(h.mean()), float((h * h).mean()), rho, rho_se, direct, n_reps, aborted)


def gamma_estimate(
    model,
    theta=None,
    theta0=None,
    trunc_eps: float = 1e-8,
    n_reps: int = 10_000,
    seed: int = 0,
    kl: float | None = None,
    run_length: int = 20,
) -> MCEstimate:
    """E log(1 + sum_{k>=1} exp(-S_k)), each series truncated once it is negligible.

    A replication stops after ``run_length`` consecutive terms below
    ``trunc_eps`` and more than 10 / K steps.
    """
    if not 0 < trunc_eps < 1:
        raise ValueError("trunc_eps must be in (0, 1)")
    walk = _as_walk(model, theta, theta0)
    if kl is None:
        kl = _require_drift(walk, seed)
    elif kl <= 0:
        raise DriftError("K must be positive")
    min_k = 10.0 / kl
    s_cur = np.zeros(n_reps)
    acc = np.zeros(n_reps)
    calm = np.zeros(n_reps, dtype=np.int64)
    k_cur = np.zeros(n_reps, dtype=np.int64)
    done_at = np.zeros(n_reps, dtype=bool)

    def consume(g, live):
        for row, i in enumerate(live):
            gi = g[row]
            gi = gi[~np.isnan(gi)]
            cs = s_cur[i] + np.cumsum(gi)
            terms = np.exp(-cs)
            small = terms < trunc_eps
            ks = k_cur[i] + np.arange(1, gi.size + 1)
            run = calm[i]
            stop = -1
            for t in range(gi.size):
                run = run + 1 if small[t] else 0
                if run >= run_length and ks[t] > min_k:
                    stop = t
                    break
            upto = gi.size if stop < 0 else stop + 1
            acc[i] += terms[:upto].sum()
            s_cur[i] = cs[upto - 1]
            k_cur[i] = ks[upto - 1]
            calm[i] = run
            done_at[i] = stop >= 0
        return done_at[live]

    left = _walk_all(walk, n_reps, seed, consume, LADDER_CAP)
    if left:
        raise DriftError(f"{left} replications did not converge within {LADDER_CAP} steps")
    return MCEstimate.from_samples(np.log1p(acc), seed=seed)


def lambda2_estimate(
    model, theta=None, theta0=None, n_steps: int = 3000, n_reps: int = 200, seed: int = 0, n_batches: int = 30
) -> MCEstimate:
    """Asymptotic variance of S_n / sqrt(n) by batch means."""
    if n_steps < 1000:
        raise ValueError("n_steps must be >= 1000")
    if n_batches < 30:
        raise ValueError("need at least 30 batches")
    walk = _as_walk(model, theta, theta0)
    g = _fixed_length(walk, n_reps, n_steps, seed)
    blen = n_steps // n_batches
    sums = g[:, : blen * n_batches].reshape(n_reps, n_batches, blen).sum(axis=2)
    per_rep = sums.var(axis=1, ddof=1) / blen
    est = MCEstimate.from_samples(per_rep, seed=seed)
    if est.mean < 1e-12:
        est = MCEstimate(est.mean, est.se, est.n_effective, 0, seed, ("DEGENERATE",))
    return est


# -- delay expansion ----------------------------------------------------------


@dataclass(frozen=True)
class ApproxTerms:
    kl: float
    gamma: float = 0.0
    lambda2: float = 1.0
    density: float = 1.0
    rho: float = 0.0
    c_emp: float = 0.0

    def partial_constant(self) -> float:
        """C with the Poisson-equation and eigenfunction terms set to zero."""
        return self.rho - self.gamma - 0.5 * math.log(2 * math.pi * self.density / self.lambda2) - 0.5


def predicted_delay(terms: ApproxTerms, b: float, constant: str = "empirical") -> float:
    """(1/K)(b + log(b/K)/2 + C) with C the empirical or the partial constant."""
    if terms.kl <= 0:
        raise ValueError("K must be positive")
    if b <= 1:
        raise ValueError("b must exceed 1")
    c = terms.c_emp if constant == "empirical" else terms.partial_constant()
    return (b + 0.5 * math.log(b / terms.kl) + c) / terms.kl


@dataclass(frozen=True)
class ZPoint:
    b: float
    z: float
    se: float
    delay: MCEstimate
    censored_fraction: float
    flags: tuple[str, ...] = ()


def empirical_constant(
    model: ModelSpec,
    scenario: ChangeScenario,
    config: DetectorConfig,
    b_grid: Sequence[float],
    n_reps: int,
    seed: int,
    kl: MCEstimate | float | None = None,
    threads: int = 1,
    psi_particles: int = 20_000,
) -> list[ZPoint]:
    """Z(b) = K E_1 N_b - b - log(b/K)/2 at every b in ``b_grid``."""
    b_grid = [float(b) for b in b_grid]
    if any(b2 <= b1 for b1, b2 in zip(b_grid, b_grid[1:])):
        raise ValueError("b_grid must be increasing")
    if kl is None:
        kl = estimate_kl(model, scenario.theta_true, scenario.theta0, n_steps=500, n_reps=2000, seed=seed + 1)
    k, k_se = (kl.mean, kl.se) if isinstance(kl, MCEstimate) else (float(kl), 0.0)
    scen1 = ChangeScenario(scenario.theta0, scenario.theta_true, 1)
    out = []
    for b in b_grid:
        cfg = config.with_b(b)
        if config.init_mode == "psi":
            from dataclasses import replace

            psi = estimate_psi(model, scenario.theta0, replace(cfg, init_mode="zero", psi=None), psi_particles, seed=seed)
            cfg = replace(cfg, psi=psi)
        res = BatchEngine(model, scen1, cfg).run(n_reps, seed, threads=threads)
        n_c = int(res.censored.sum())
        delay = MCEstimate.from_samples(res.stop_time, seed=seed, n_censored=n_c)
        z = k * delay.mean - b - 0.5 * math.log(b / k)
        dz_dk = delay.mean - 0.5 / k
        se = combined_se(k * delay.se, dz_dk * k_se)
        frac = n_c / n_reps
        out.append(ZPoint(b, z, se, delay, frac, ("CENSORED",) if frac > 0.01 else ()))
    return out


def delay_slope(b_grid, delays: Sequence[MCEstimate], offset: Callable[[float], float] | None = None):
    """Weighted least-squares slope of E_1 N_b (minus ``offset(b)``) against b."""
    b = np.asarray(b_grid, dtype=float)
    y = np.array([d.mean for d in delays]) - (np.array([offset(x) for x in b]) if offset else 0.0)
    w = 1.0 / np.array([d.se for d in delays]) ** 2
    X = np.column_stack([np.ones_like(b), b])
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    beta = cov @ (X.T @ (w * y))
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


# -- regularity checks --------------------------------------------------------


@dataclass(frozen=True)
class C2Check:
    a: float
    passed: bool
    h_closed: float | None = None


def check_c2_linear_gaussian(Sigma1, Sigma2, H) -> C2Check:
    """Determinant bound |S1^-1 + H' S2^-1 H|^{-1/2} / ((2 pi)^{d/2} |S1|^{1/2} |S2|^{1/2}) < 1.

    For the d = 2 equicorrelated case with H = I also returns the closed
    form 1 / (2 pi sqrt(4 - (rho1 + rho2)^2)); a non-positive radicand is
    reported as a violation.
    """
    S1 = np.atleast_2d(np.asarray(Sigma1, dtype=float))
    S2 = np.atleast_2d(np.asarray(Sigma2, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = S1.shape[0]
    h_closed = None
    if d == 2 and np.allclose(H, np.eye(2)) and np.allclose(np.diag(S1), 1) and np.allclose(np.diag(S2), 1):
        s = S1[0, 1] + S2[0, 1]
        rad = 4.0 - s * s
        if rad <= 0:
            return C2Check(math.inf, False, math.inf)
        h_closed = 1.0 / (2 * math.pi * math.sqrt(rad))
    try:
        info = np.linalg.inv(S1) + H.T @ np.linalg.inv(S2) @ H
    except np.linalg.LinAlgError:
        return C2Check(math.inf, False, h_closed)
    det_info = np.linalg.det(info)
    denom = (2 * math.pi) ** (d / 2) * math.sqrt(np.linalg.det(S1) * np.linalg.det(S2))
    if det_info <= 0 or denom <= 0:
        return C2Check(math.inf, False, h_closed)
    a = det_info**-0.5 / denom
    return C2Check(float(a), bool(a < 1), h_closed)


def d2_correlation_threshold() -> float:
    """Largest |rho1 + rho2| for which the d = 2 determinant bound holds, by root finding."""

    def excess(s):
        r = s / 2
        S = np.array([[1.0, r], [r, 1.0]])
        return check_c2_linear_gaussian(S, S, np.eye(2)).a - 1.0

    return brentq(excess, 0.0, 2.0 - 1e-12, xtol=1e-14)


@dataclass(frozen=True)
class AR1Check:
    h: float
    stationary_var: float
    drift_bound: float
    passed: bool


def check_c2_ar1(alpha: float) -> AR1Check:
    """h = 1 / sqrt(2 pi (1 + v)), v = 1 / (1 - alpha^2), and the log drift bound."""
    if not abs(alpha) < 1:
        raise ValueError("|alpha| must be < 1")
    v = 1.0 / (1.0 - alpha * alpha)
    h = 1.0 / math.sqrt(2 * math.pi * (1 + v))
    # sup over |x0| of (|alpha| t + E|eps| + 1) / (t + 1) is at t = 0 or t -> inf
    ratio = max(E_ABS_NORMAL + 1.0, abs(alpha))
    bound = math.log(ratio * h)
    return AR1Check(h, v, bound, bound < 0)
