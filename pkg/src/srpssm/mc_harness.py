"""Replicated operating characteristics of detectors: ARL, delays, equalizer checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detectors import BatchEngine, DetectorConfig
from .results import MCEstimate, combined_se, write_csv
from .ssm_core import ChangeScenario, ModelSpec

DEFAULT_OMEGAS = (1, 2, 3, 5, 10, 20, 50)


@dataclass(frozen=True)
class ConditionalEstimate:
    """Delay over survivors; ``estimate.n_total`` counts survivors, ``discarded`` the rest."""

    estimate: MCEstimate
    discarded: int

    @property
    def survivor_fraction(self) -> float:
        n = self.estimate.n_total
        return n / (n + self.discarded)


@dataclass(frozen=True)
class ExperimentPlan:
    model: ModelSpec
    theta0: float
    thetas: Sequence[float]
    omegas: Sequence[int]
    configs: Sequence[DetectorConfig]
    n_reps: int
    seed: int

    def __post_init__(self):
        if not self.thetas or not self.omegas or not self.configs:
            raise ValueError("plan grids must be non-empty")
        if self.n_reps < 100:
            raise ValueError("need at least 100 replications")


def _censor_flags(n_cens: int, n: int, limit: float, flag: str) -> tuple[str, ...]:
    return (flag,) if n and n_cens / n > limit else ()


def arl_false_alarm(
    model: ModelSpec, config: DetectorConfig, n_reps: int, seed: int, theta0: float = 0.0, threads: int = 1
) -> MCEstimate:
    """E_inf N_b.  Censored runs enter at the cap, so the mean is then a lower bound."""
    res = BatchEngine(model, ChangeScenario(theta0, theta0), config).run(n_reps, seed, threads=threads)
    n_c = int(res.censored.sum())
    return MCEstimate.from_samples(
        res.stop_time, seed=seed, n_censored=n_c, flags=_censor_flags(n_c, n_reps, 0.05, "LOWER-BOUND")
    )


def false_alarm_prob(
    model: ModelSpec, config: DetectorConfig, horizon: int, n_reps: int, seed: int, theta0: float = 0.0, threads: int = 1
) -> MCEstimate:
    """P_inf{N <= horizon}."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        return MCEstimate(0.0, 0.0, n_reps, 0, seed)
    from dataclasses import replace

    cfg = replace(config, max_steps=horizon)
    res = BatchEngine(model, ChangeScenario(theta0, theta0), cfg).run(n_reps, seed, threads=threads)
    return MCEstimate.from_samples((~res.censored).astype(float), seed=seed)


def _conditional(model, scenario, config, n_reps, seed, threads, lag: int) -> ConditionalEstimate:
    # survivors: N >= omega - lag; delay: N - omega + lag
    if not math.isfinite(scenario.omega):
        raise ValueError("conditional delay needs a finite change time")
    omega = int(scenario.omega)
    res = BatchEngine(model, scenario, config).run(n_reps, seed, threads=threads)
    keep = res.stop_time >= omega - lag
    n_keep = int(keep.sum())
    n_c = int((keep & res.censored).sum())
    flags = _censor_flags(n_c, n_keep, 0.05, "LOWER-BOUND")
    if n_keep < 0.1 * n_reps:
        flags += ("UNRELIABLE",)
    est = MCEstimate.from_samples(res.stop_time[keep] - omega + lag, seed=seed, n_censored=n_c, flags=flags)
    return ConditionalEstimate(est, n_reps - n_keep)


def conditional_delay(
    model: ModelSpec, scenario: ChangeScenario, config: DetectorConfig, n_reps: int, seed: int, threads: int = 1
) -> ConditionalEstimate:
    """E_omega(N - omega | N >= omega) by discarding replications that alarm before omega."""
    return _conditional(model, scenario, config, n_reps, seed, threads, lag=0)


@dataclass(frozen=True)
class SupDelay:
    rows: list = field(default_factory=list)  # dicts with omega, theta, estimate
    argmax: int = 0

    @property
    def max(self) -> MCEstimate:
        return self.rows[self.argmax]["estimate"]


def sup_delay(
    model: ModelSpec,
    config: DetectorConfig,
    omega_grid: Sequence[int],
    theta_grid: Sequence[float],
    n_reps: int,
    seed: int,
    theta0: float = 0.0,
    threads: int = 1,
) -> SupDelay:
    """Delay table over (omega, theta) and its largest cell."""
    rows = []
    for th in theta_grid:
        for om in omega_grid:
            ce = conditional_delay(model, ChangeScenario(theta0, th, om), config, n_reps, seed, threads)
            rows.append({"omega": om, "theta": th, "estimate": ce.estimate, "discarded": ce.discarded})
    best = int(np.argmax([r["estimate"].mean for r in rows]))
    return SupDelay(rows, best)


@dataclass(frozen=True)
class EqualizerRow:
    k: int
    estimate: MCEstimate
    deviation: float
    combined_se: float

    @property
    def z(self) -> float:
        return 0.0 if self.deviation == 0 else abs(self.deviation) / self.combined_se


def equalizer_check(
    model: ModelSpec,
    config: DetectorConfig,
    k_list: Sequence[int],
    n_reps: int,
    seed: int,
    theta: float,
    theta0: float = 0.0,
    threads: int = 1,
) -> list[EqualizerRow]:
    """E_k(N - k + 1 | N >= k - 1) for each k against E_1 N.

    Every k uses the same master seed so the comparisons share streams up to
    the change time.
    """
    base = _conditional(model, ChangeScenario(theta0, theta, 1), config, n_reps, seed, threads, lag=1).estimate
    rows = []
    for k in k_list:
        if k == 1:
            rows.append(EqualizerRow(1, base, 0.0, base.se))
            continue
        est = _conditional(model, ChangeScenario(theta0, theta, k), config, n_reps, seed, threads, lag=1).estimate
        rows.append(EqualizerRow(k, est, est.mean - base.mean, combined_se(est.se, base.se)))
    return rows


def estimate_rows(rule: str, b: float, omega, theta, est: MCEstimate) -> dict:
    return {
        "rule": rule,
        "b": b,
        "omega": omega,
        "theta": theta,
        "estimate": est.mean,
        "se": est.se,
        "n_eff": est.n_effective,
        "n_cens": est.n_censored,
        "flags": est.flags,
    }


def write_estimates(path, rows: list[dict]) -> None:
    write_csv(path, rows)
