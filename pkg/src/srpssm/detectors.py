"""Stopping rules over observation streams.

``BatchEngine`` runs many independent replications through the compiled
(or fallback) kernel; every replication draws from its own counter-based
stream ``rep_rng(seed, rep)``, so results do not depend on chunking or
thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import ks_2samp

from . import kernels
from .filters import LinearSystem, ParticleCloud, particle_step
from .lr_engine import LRProcess, NodeSet, PriorGrid
from .ssm_core import NEVER, ChangeScenario, ModelSpec, SimParams, rep_rng

CHUNK = 512
RULES = {"weighted_srp": kernels.RULE_SR, "sr_point": kernels.RULE_SR, "cusum": kernels.RULE_CUSUM, "lr": kernels.RULE_LR}


class DetectorError(RuntimeError):
    pass


class QuasiStationarityError(DetectorError):
    """Every particle crossed the threshold in one step."""


@dataclass(frozen=True, eq=False)
class PsiDistribution:
    """Empirical quasi-stationary law of the full detector state."""

    x: np.ndarray  # hidden states (N, p)
    xhat: np.ndarray  # filter means (N, m1, p)
    age: np.ndarray  # filter ages (N,)
    log_r: np.ndarray  # per-node log R*_0 (N, m)
    stat: np.ndarray  # mixture log statistic (N,)
    iterations: int
    ks_history: tuple[float, ...]
    b: float

    @property
    def size(self) -> int:
        return self.stat.size

    @property
    def ks(self) -> float:
        return self.ks_history[-1] if self.ks_history else math.nan

    def mean_r(self) -> float:
        return float(np.mean(np.exp(self.stat)))


@dataclass(frozen=True, eq=False)
class DetectorConfig:
    b: float
    grid: PriorGrid
    rule: str = "weighted_srp"
    init_mode: str = "zero"
    max_steps: int = 1_000_000
    q: float = 1.0
    include_k0: bool = False
    psi: PsiDistribution | None = None

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"threshold b must be > 0, got {self.b}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {sorted(RULES)}")
        if self.rule in ("sr_point", "cusum") and self.grid.size != 1:
            raise ValueError(f"rule {self.rule} needs a single-point grid")
        if self.init_mode not in ("zero", "psi"):
            raise ValueError("init_mode must be 'zero' or 'psi'")
        if self.init_mode == "psi" and self.psi is None:
            raise ValueError("init_mode='psi' needs an estimated PsiDistribution")
        if not 0 < self.q <= 1:
            raise ValueError("q must be in (0, 1]")

    @property
    def rule_id(self) -> int:
        return RULES[self.rule]

    def initial_log_r(self) -> float:
        if self.rule == "lr" or (self.include_k0 and self.rule != "cusum"):
            return 0.0
        return -math.inf

    def with_b(self, b: float) -> "DetectorConfig":
        return replace(self, b=b, psi=None if self.init_mode == "zero" else self.psi)


@dataclass(frozen=True, eq=False)
class StoppingReport:
    stop_time: int
    censored: bool
    stat: float
    overshoot: float
    seed: int
    path: np.ndarray | None = None


@dataclass(eq=False)
class BatchResult:
    stop_time: np.ndarray
    censored: np.ndarray
    stat: np.ndarray
    log_r: np.ndarray
    log_lr: np.ndarray
    rep_ids: np.ndarray
    paths: list | None = None


@dataclass(eq=False)
class _State:
    x: np.ndarray
    xhat: np.ndarray
    age: np.ndarray
    steps: np.ndarray
    log_r: np.ndarray
    log_lr: np.ndarray
    active: np.ndarray
    stop_stat: np.ndarray
    omega: np.ndarray

    @classmethod
    def empty(cls, n: int, m1: int, p: int) -> "_State":
        return cls(
            np.zeros((n, p)),
            np.zeros((n, m1, p)),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros((n, m1 - 1)),
            np.zeros((n, m1 - 1)),
            np.ones(n, dtype=np.uint8),
            np.full(n, np.nan),
            np.full(n, NEVER, dtype=np.int64),
        )

    def take(self, src: np.ndarray, dst: np.ndarray) -> None:
        for name in ("x", "xhat", "age", "log_r", "log_lr"):
            arr = getattr(self, name)
            arr[dst] = arr[src]


class BatchEngine:
    """Binds a model, scenario and detector configuration to the kernel."""

    def __init__(self, model: ModelSpec, scenario: ChangeScenario, config: DetectorConfig, kernel=None):
        if config.grid.size > 1:
            config.grid.check_theta0(scenario.theta0)
        self.model = model
        self.scenario = scenario
        self.config = config
        self.sim = SimParams.build(model, scenario)
        self.nodes = NodeSet.build(model, scenario.theta0, config.grid.nodes)
        self.logw = np.ascontiguousarray(config.grid.log_weights)
        self.kernel = kernel or kernels.run_block

    # -- state -----------------------------------------------------------
    def fresh_state(self, n: int, rngs: Sequence[np.random.Generator] | None, psi: PsiDistribution | None = None):
        nd = self.nodes
        st = _State.empty(n, nd.thetas.size, self.model.p)
        st.omega[:] = self.scenario.omega_index
        if psi is not None:
            pick = np.array([rng.integers(psi.size) for rng in rngs], dtype=np.int64)
            st.x[:] = psi.x[pick]
            st.xhat[:] = psi.xhat[pick]
            st.age[:] = psi.age[pick]
            st.log_r[:] = psi.log_r[pick]
            return st
        st.xhat[:] = nd.init_mean[None]
        st.log_r[:] = self.config.initial_log_r()
        p = self.model.p
        if rngs is not None:
            for i, rng in enumerate(rngs):
                st.x[i] = self.sim.x0_mean + self.sim.x0_sqrt @ rng.standard_normal(p)
        return st

    def step(self, st: _State, noise=None, obs=None, b=None, g_out=None, path_out=None, max_steps=None):
        s, nd = self.sim, self.nodes
        self.kernel(
            st.x, st.xhat, st.age, st.steps, st.log_r, st.log_lr, st.active, st.stop_stat,
            noise, obs, st.omega,
            s.F, s.c, s.L, s.H, s.d, s.M,
            nd.F, nd.c, nd.H, nd.d, nd.A, nd.Linv, nd.half_logdet, nd.tlen,
            self.logw, -math.log(self.config.q), float(self.config.b if b is None else b),
            self.config.rule_id, int(self.config.max_steps if max_steps is None else max_steps),
            g_out, path_out,
        )

    # -- replications ----------------------------------------------------
    def _run_chunk(self, rep_ids: np.ndarray, seed: int, record_path: bool) -> BatchResult:
        n = rep_ids.size
        rngs = [rep_rng(seed, int(i)) for i in rep_ids]
        psi = self.config.psi if self.config.init_mode == "psi" else None
        st = self.fresh_state(n, rngs, psi)
        nz = self.sim.noise_dim
        max_steps = self.config.max_steps
        L = 32
        paths = [[] for _ in range(n)] if record_path else None
        while True:
            live = np.flatnonzero((st.active != 0) & (st.steps < max_steps))
            if live.size == 0:
                break
            L = min(L, max_steps)
            noise = np.empty((n, L, nz))
            for i in live:
                rngs[i].standard_normal(out=noise[i])
            path_out = np.full((n, L), np.nan) if record_path else None
            self.step(st, noise=noise, path_out=path_out)
            if record_path:
                for i in live:
                    row = path_out[i]
                    paths[i].append(row[~np.isnan(row)])
            L = min(2 * L, 1024)
        censored = st.active != 0
        return BatchResult(
            st.steps.copy(), censored, st.stop_stat, st.log_r, st.log_lr, rep_ids,
            [np.concatenate(p) for p in paths] if record_path else None,
        )

    def run(self, n_reps: int, seed: int, threads: int = 1, rep_offset: int = 0, record_path: bool = False) -> BatchResult:
        ids = np.arange(rep_offset, rep_offset + n_reps)
        chunks = [ids[i : i + CHUNK] for i in range(0, n_reps, CHUNK)]
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(lambda c: self._run_chunk(c, seed, record_path), chunks))
        else:
            parts = [self._run_chunk(c, seed, record_path) for c in chunks]
        return BatchResult(
            np.concatenate([p.stop_time for p in parts]),
            np.concatenate([p.censored for p in parts]),
            np.concatenate([p.stat for p in parts]),
            np.concatenate([p.log_r for p in parts]),
            np.concatenate([p.log_lr for p in parts]),
            ids,
            sum((p.paths for p in parts), []) if record_path else None,
        )

    def walk(
        self, rep_ids: np.ndarray, seed: int, consume: Callable[[np.ndarray, np.ndarray], np.ndarray], max_steps: int
    ) -> int:
        """Stream log-LR increments without stopping.

        ``consume(g_block, live)`` receives increments of shape
        ``(len(live), L, m)`` for the live replications and returns a
        boolean mask of those that are finished.  Returns the number of
        replications still unfinished at ``max_steps``.
        """
        n = rep_ids.size
        rngs = [rep_rng(seed, int(i)) for i in rep_ids]
        st = self.fresh_state(n, rngs)
        st.log_r[:] = 0.0
        nz = self.sim.noise_dim
        m = self.nodes.thetas.size - 1
        L = 32
        while True:
            live = np.flatnonzero((st.active != 0) & (st.steps < max_steps))
            if live.size == 0:
                break
            L = min(L, max_steps - int(st.steps[live].min()))
            noise = np.empty((n, L, nz))
            for i in live:
                rngs[i].standard_normal(out=noise[i])
            g = np.full((n, L, m), np.nan)
            self.step(st, noise=noise, b=math.inf, g_out=g, max_steps=max_steps)
            done = consume(g[live], live)
            st.active[live[done]] = 0
            L = min(2 * L, 1024)
        return int(np.count_nonzero(st.active))


# -- single streams ---------------------------------------------------------


def run_detector(
    model: ModelSpec, scenario: ChangeScenario, config: DetectorConfig, seed: int, rep: int = 0, record_path: bool = True
) -> StoppingReport:
    """One replication; the stream is replication ``rep`` of ``seed``."""
    eng = BatchEngine(model, scenario, config)
    res = eng.run(1, seed, rep_offset=rep, record_path=record_path)
    return _report(res, 0, config.b, seed)


def _report(res: BatchResult, i: int, b: float, seed: int) -> StoppingReport:
    cens = bool(res.censored[i])
    stat = float(res.paths[i][-1]) if res.paths is not None and len(res.paths[i]) else float(res.stat[i])
    return StoppingReport(int(res.stop_time[i]), cens, stat, math.nan if cens else stat - b, seed, res.paths[i] if res.paths else None)


def detect_stream(model: ModelSpec, theta0: float, config: DetectorConfig, observations) -> StoppingReport:
    """Run the configured rule on an external observation sequence."""
    obs = np.asarray(observations, dtype=float)
    obs = obs.reshape(obs.shape[0], -1)
    if obs.shape[1] != model.r:
        raise ValueError(f"observations have {obs.shape[1]} fields, model expects {model.r}")
    eng = BatchEngine(model, ChangeScenario(theta0, theta0), config)
    st = eng.fresh_state(1, None)
    st.x[:] = np.nan
    n = min(obs.shape[0], config.max_steps)
    path = np.full((1, n), np.nan)
    eng.step(st, obs=np.ascontiguousarray(obs[None, :n]), path_out=path)
    path = path[0, : int(st.steps[0])]
    stopped = st.active[0] == 0
    stat = float(path[-1]) if path.size else math.nan
    return StoppingReport(int(st.steps[0]), not stopped, stat, stat - config.b if stopped else math.nan, -1, path)


def cusum_run(model: ModelSpec, scenario: ChangeScenario, theta: float, b: float, seed: int, max_steps: int = 1_000_000):
    cfg = DetectorConfig(b=b, grid=PriorGrid.point(theta), rule="cusum", max_steps=max_steps)
    return run_detector(model, scenario, cfg, seed)


class StreamingDetector:
    """Observation-at-a-time SR / weighted SRP detector built on :class:`LRProcess`."""

    def __init__(self, model: ModelSpec, theta0: float, config: DetectorConfig):
        self.config = config
        log_r0 = config.initial_log_r()
        self.proc = LRProcess(model, theta0, config.grid, log_r0=log_r0, q=config.q)
        self.alarm = False

    def update(self, y) -> float:
        if self.config.rule == "cusum":
            g = self.proc.advance(y)
            self.proc.log_r = g + np.maximum(self.proc.log_r, 0.0)
        elif self.config.rule == "lr":
            g = self.proc.advance(y)
            self.proc.log_r = self.proc.log_r + g
        else:
            self.proc.sr_update(y)
        stat = self.proc.weighted_stat()
        self.alarm = stat >= self.config.b
        return stat

    @property
    def n(self) -> int:
        return self.proc.n


def run_detector_particle(
    model: ModelSpec,
    scenario: ChangeScenario,
    config: DetectorConfig,
    seed: int,
    n_particles: int,
    rep: int = 0,
) -> StoppingReport:
    """Same rule with particle-filter likelihoods; observations match ``run_detector``."""
    if config.init_mode != "zero":
        raise ValueError("particle engine supports zero initialisation only")
    sp = SimParams.build(model, scenario)
    obs_rng = rep_rng(seed, rep)
    pf_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(rep), 1))))
    p = model.p
    x = sp.x0_mean + sp.x0_sqrt @ obs_rng.standard_normal(p)
    systems: list[LinearSystem] = [model.at(scenario.theta0)] + [model.at(t) for t in config.grid.nodes]
    clouds = [ParticleCloud.stationary(s, n_particles, pf_rng) for s in systems]
    log_r = np.full(config.grid.size, config.initial_log_r())
    logw = config.grid.log_weights
    w = scenario.omega_index
    stat = -math.inf
    for k in range(1, config.max_steps + 1):
        reg = 1 if k >= w else 0
        z = obs_rng.standard_normal(sp.noise_dim)
        x = sp.F[reg] @ x + sp.c[reg] + sp.L[reg] @ z[:p]
        y = sp.H[reg] @ x + sp.d[reg] + sp.M[reg] @ z[p:]
        incr = np.array([particle_step(c, s, y, pf_rng) for c, s in zip(clouds, systems)])
        g = incr[1:] - incr[0]
        if config.rule == "cusum":
            log_r = g + np.maximum(log_r, 0.0)
        elif config.rule == "lr":
            log_r = g + log_r
        else:
            log_r = g - math.log(config.q) + np.logaddexp(0.0, log_r)
        v = logw + log_r
        stat = float(np.logaddexp.reduce(v))
        if stat >= config.b:
            return StoppingReport(k, False, stat, stat - config.b, seed)
    return StoppingReport(config.max_steps, True, stat, math.nan, seed)


# -- quasi-stationary initialisation ----------------------------------------


def _psi_engine(model: ModelSpec, theta0: float, config: DetectorConfig) -> BatchEngine:
    zero_cfg = replace(config, init_mode="zero", psi=None, max_steps=2**62)
    return BatchEngine(model, ChangeScenario(theta0, theta0), zero_cfg)


def _apply_tb(eng: BatchEngine, st: _State, rng: np.random.Generator, it: int) -> np.ndarray:
    """One conditioned step of the particle population; returns the new statistic sample."""
    n = st.x.shape[0]
    st.active[:] = 1
    st.steps[:] = 0
    path = np.empty((n, 1))
    eng.step(st, noise=rng.standard_normal((n, 1, eng.sim.noise_dim)), path_out=path)
    killed = np.flatnonzero(st.active == 0)
    alive = np.flatnonzero(st.active != 0)
    if alive.size == 0:
        raise QuasiStationarityError(f"all {n} particles crossed b={eng.config.b} at iteration {it}")
    stat = path[:, 0]
    if killed.size:
        src = alive[rng.integers(alive.size, size=killed.size)]
        st.take(src, killed)
        stat[killed] = stat[src]
    return stat


def estimate_psi(
    model: ModelSpec,
    theta0: float,
    config: DetectorConfig,
    n_particles: int = 20_000,
    n_iters: int = 2_000,
    seed: int = 0,
    min_iters: int = 50,
    tol: float = 0.01,
    patience: int = 5,
) -> PsiDistribution:
    """Conditioned-particle approximation of the fixed point of T_B.

    A population of full detector states is advanced one observation under
    no change; particles whose statistic reaches b are killed and replaced
    by uniformly chosen survivors.  Iteration stops once the KS distance
    between successive laws of the statistic stays below ``tol`` for
    ``patience`` iterations (after ``min_iters``), or at ``n_iters``.
    """
    if n_particles < 1000:
        raise ValueError("n_particles must be >= 1000")
    eng = _psi_engine(model, theta0, config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(2**31,))))
    st = eng.fresh_state(n_particles, None)
    st.x[:] = eng.sim.x0_mean + rng.standard_normal((n_particles, model.p)) @ eng.sim.x0_sqrt.T
    prev = None
    ks_hist: list[float] = []
    calm = 0
    it = 0
    for it in range(1, n_iters + 1):
        stat = _apply_tb(eng, st, rng, it)
        if prev is not None:
            ks_hist.append(float(ks_2samp(stat, prev).statistic))
            calm = calm + 1 if ks_hist[-1] < tol else 0
        prev = stat.copy()
        if it >= min_iters and calm >= patience:
            break
    return PsiDistribution(st.x.copy(), st.xhat.copy(), st.age.copy(), st.log_r.copy(), prev, it, tuple(ks_hist), config.b)


def iterate_psi(
    model: ModelSpec, theta0: float, config: DetectorConfig, psi: PsiDistribution, iterations: int, seed: int
) -> PsiDistribution:
    """Apply T_B ``iterations`` more times to an estimated law."""
    eng = _psi_engine(model, theta0, config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(2**31 + 1,))))
    st = eng.fresh_state(psi.size, None)
    st.x[:] = psi.x
    st.xhat[:] = psi.xhat
    st.age[:] = psi.age
    st.log_r[:] = psi.log_r
    stat = psi.stat.copy()
    ks_hist = []
    for it in range(1, iterations + 1):
        new = _apply_tb(eng, st, rng, it)
        ks_hist.append(float(ks_2samp(new, stat).statistic))
        stat = new.copy()
    return PsiDistribution(
        st.x.copy(), st.xhat.copy(), st.age.copy(), st.log_r.copy(), stat, psi.iterations + iterations, tuple(ks_hist), psi.b
    )
