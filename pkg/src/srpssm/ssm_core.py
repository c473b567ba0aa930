"""State space model families and change-point trajectory simulation.

Every model family is reduced to one linear-Gaussian system

    X_k = F X_{k-1} + G u + delta_k,      delta_k ~ N(0, Sigma1)
    Y_k = H X_k     + J u + eps_k,        eps_k   ~ N(0, Sigma2)

evaluated at a scalar parameter theta.  ``ModelSpec.at(theta)`` returns that
system; filters and simulators only ever see :class:`LinearSystem`.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LYAPUNOV_RTOL = 1e-12
LYAPUNOV_MAX_ITER = 100_000
NEVER = np.iinfo(np.int64).max  # omega = infinity


class ModelError(ValueError):
    """Raised when a model violates its stability or covariance invariants."""


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream for replication ``rep`` of master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(rep),))
    return np.random.Generator(np.random.Philox(ss))


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semi-definite matrix."""
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals.size and vals.min() < -1e-10 * max(1.0, abs(vals).max()):
        raise ModelError(f"matrix is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


_BINDING_RE = re.compile(
    r"^\s*(?:(?P<scale>[-+]?[0-9.eE+-]+)\s*\*\s*)?(?P<mat>[FGHJ])\[(?P<i>\d+)\s*,\s*(?P<j>\d+)\]\s*$"
)


@dataclass(frozen=True)
class ParamBinding:
    """Which matrix entry theta sets: ``entry = scale * theta``."""

    matrix: str
    row: int
    col: int
    scale: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "ParamBinding":
        m = _BINDING_RE.match(text)
        if m is None:
            raise ModelError(f"cannot parse parameter binding {text!r}; expected e.g. 'H[0,0]' or '0.5*G[0,0]'")
        scale = float(m.group("scale")) if m.group("scale") else 1.0
        return cls(m.group("mat"), int(m.group("i")), int(m.group("j")), scale)

    def __str__(self) -> str:
        prefix = "" if self.scale == 1.0 else f"{self.scale!r}*"
        return f"{prefix}{self.matrix}[{self.row},{self.col}]"


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """A fully specified linear-Gaussian system at one parameter value."""

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    J: np.ndarray
    Sigma1: np.ndarray
    Sigma2: np.ndarray
    u: np.ndarray

    @property
    def p(self) -> int:
        return self.F.shape[0]

    @property
    def r(self) -> int:
        return self.H.shape[0]

    @property
    def state_offset(self) -> np.ndarray:
        return self.G @ self.u

    @property
    def obs_offset(self) -> np.ndarray:
        return self.J @ self.u

    def stationary_mean(self) -> np.ndarray:
        return np.linalg.solve(np.eye(self.p) - self.F, self.state_offset)

    def stationary_cov(self) -> np.ndarray:
        """Solve P = F P F^T + Sigma1 by fixed-point iteration."""
        F, S1 = self.F, self.Sigma1
        P = S1.copy()
        for _ in range(LYAPUNOV_MAX_ITER):
            P_next = F @ P @ F.T + S1
            P_next = 0.5 * (P_next + P_next.T)
            scale = max(np.abs(P_next).max(), 1e-300)
            if np.abs(P_next - P).max() <= LYAPUNOV_RTOL * scale:
                return P_next
            P = P_next
        raise ModelError(f"Lyapunov iteration did not converge in {LYAPUNOV_MAX_ITER} steps")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A state space model family with one scalar parameter theta.

    Use the constructors :meth:`linear_gaussian`, :meth:`ar_mean_shift` and
    :meth:`iid_gaussian` rather than building this directly.
    """

    variant: str
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    J: np.ndarray
    Sigma1: np.ndarray
    Sigma2: np.ndarray
    u: np.ndarray
    binding: ParamBinding
    ar_coefs: tuple[float, ...] = field(default=())
    sigma2: float = 1.0

    # -- constructors -----------------------------------------------------
    @classmethod
    def linear_gaussian(
        cls,
        F,
        H,
        Sigma1,
        Sigma2,
        binding: str | ParamBinding,
        G=None,
        J=None,
        u=None,
    ) -> "ModelSpec":
        F = np.atleast_2d(np.asarray(F, dtype=float))
        H = np.atleast_2d(np.asarray(H, dtype=float))
        S1 = np.atleast_2d(np.asarray(Sigma1, dtype=float))
        S2 = np.atleast_2d(np.asarray(Sigma2, dtype=float))
        p, r = F.shape[0], H.shape[0]
        if u is None:
            q = 1 if G is None and J is None else np.atleast_2d(G if G is not None else J).shape[1]
            u = np.zeros(q)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        q = u.shape[0]
        G = np.zeros((p, q)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
        J = np.zeros((r, q)) if J is None else np.atleast_2d(np.asarray(J, dtype=float))
        if isinstance(binding, str):
            binding = ParamBinding.parse(binding)
        model = cls("LinearGaussian", F, G, H, J, S1, S2, u, binding)
        model._check_shapes()
        if not np.allclose(S2, S2.T) or np.linalg.eigvalsh(0.5 * (S2 + S2.T)).min() <= 0:
            raise ModelError("Sigma2 must be symmetric positive definite")
        if not np.allclose(S1, S1.T) or np.linalg.eigvalsh(0.5 * (S1 + S1.T)).min() < -1e-12:
            raise ModelError("Sigma1 must be symmetric positive semi-definite")
        model._check_stable(model._nominal_theta())
        return model

    @classmethod
    def process_mean(cls, alpha: float, sigma_eps: float = 1.0, sigma_eta: float = 1.0) -> "ModelSpec":
        """Scalar process-mean model Y = X + eps, X - mu = alpha (X_prev - mu) + eta; theta = mu."""
        return cls.linear_gaussian(
            F=[[alpha]],
            H=[[1.0]],
            Sigma1=[[sigma_eta**2]],
            Sigma2=[[sigma_eps**2]],
            G=[[0.0]],
            u=[1.0],
            binding=ParamBinding("G", 0, 0, 1.0 - alpha),
        )

    @classmethod
    def ar_mean_shift(cls, coefs: Sequence[float], sigma2: float = 1.0) -> "ModelSpec":
        """AR(p) observed directly, theta is the process mean."""
        a = np.asarray(coefs, dtype=float)
        p = a.size
        if p < 1:
            raise ModelError("need at least one AR coefficient")
        if sigma2 <= 0:
            raise ModelError("AR noise variance must be positive")
        F = np.zeros((p, p))
        F[0] = a
        F[1:, :-1] += np.eye(p - 1)
        if np.abs(np.linalg.eigvals(F)).max() >= 1:
            raise ModelError("AR companion matrix has spectral radius >= 1")
        S1 = np.zeros((p, p))
        S1[0, 0] = sigma2
        H = np.zeros((1, p))
        H[0, 0] = 1.0
        return cls(
            "ARMeanShift",
            F,
            np.zeros((p, 1)),
            H,
            np.zeros((1, 1)),
            S1,
            np.zeros((1, 1)),
            np.ones(1),
            ParamBinding("G", 0, 0, 1.0 - float(a.sum())),
            tuple(float(c) for c in a),
            float(sigma2),
        )

    @classmethod
    def iid_gaussian(cls) -> "ModelSpec":
        """Y_k ~ N(theta, 1) i.i.d.; the state is trivial."""
        z = np.zeros((1, 1))
        return cls("IIDGaussian", z, z.copy(), z.copy(), z.copy(), z.copy(), np.eye(1), np.ones(1), ParamBinding("J", 0, 0))

    # -- evaluation -------------------------------------------------------
    def _nominal_theta(self) -> float:
        mat = getattr(self, self.binding.matrix)
        return float(mat[self.binding.row, self.binding.col]) / self.binding.scale if self.binding.scale else 0.0

    def _check_shapes(self) -> None:
        p, r, q = self.F.shape[0], self.H.shape[0], self.u.shape[0]
        expect = {"F": (p, p), "G": (p, q), "H": (r, p), "J": (r, q), "Sigma1": (p, p), "Sigma2": (r, r)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        mat = getattr(self, self.binding.matrix)
        if not (self.binding.row < mat.shape[0] and self.binding.col < mat.shape[1]):
            raise ModelError(f"binding {self.binding} is outside {self.binding.matrix} of shape {mat.shape}")

    def _check_stable(self, theta: float) -> None:
        F = self.at(theta, check=False).F
        if self.variant == "LinearGaussian":
            if np.linalg.norm(F, 2) >= 1:
                raise ModelError(f"operator norm of F is {np.linalg.norm(F, 2):.4g} >= 1 at theta={theta}")
        elif np.abs(np.linalg.eigvals(F)).max() >= 1:
            raise ModelError(f"spectral radius of F >= 1 at theta={theta}")

    def at(self, theta: float, check: bool = True) -> LinearSystem:
        mats = {k: getattr(self, k).copy() for k in ("F", "G", "H", "J")}
        b = self.binding
        mats[b.matrix][b.row, b.col] = b.scale * float(theta)
        sys = LinearSystem(mats["F"], mats["G"], mats["H"], mats["J"], self.Sigma1, self.Sigma2, self.u)
        if check and b.matrix == "F":
            self._check_stable(theta)
        return sys

    @property
    def p(self) -> int:
        return self.F.shape[0]

    @property
    def r(self) -> int:
        return self.H.shape[0]

    def describe(self) -> dict:
        d = {"variant": self.variant, "binding": str(self.binding)}
        if self.variant == "ARMeanShift":
            d.update(coefs=list(self.ar_coefs), sigma2=self.sigma2)
        elif self.variant == "LinearGaussian":
            for k in ("F", "G", "H", "J", "Sigma1", "Sigma2"):
                d[k] = getattr(self, k).tolist()
            d["u"] = self.u.tolist()
        return d


@dataclass(frozen=True)
class ChangeScenario:
    """Pre-change theta0, post-change theta_true, first changed index omega."""

    theta0: float
    theta_true: float
    omega: float = math.inf

    def __post_init__(self):
        if not (self.omega >= 1):
            raise ValueError(f"omega must be >= 1, got {self.omega}")
        if math.isfinite(self.omega) and self.omega != int(self.omega):
            raise ValueError("omega must be an integer or infinity")
        if math.isfinite(self.omega) and self.theta_true == self.theta0:
            raise ValueError("theta_true must differ from theta0 when a change occurs")

    @property
    def omega_index(self) -> int:
        return NEVER if math.isinf(self.omega) else int(self.omega)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (n+1, p), X_0..X_n
    observations: np.ndarray  # (n, r), Y_1..Y_n
    scenario: ChangeScenario
    seed: int

    @property
    def regimes(self) -> list[str]:
        w = self.scenario.omega
        return ["post" if k >= w else "pre" for k in range(1, len(self.observations) + 1)]

    def to_csv(self, path) -> None:
        r = self.observations.shape[1]
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"y_{i + 1}" for i in range(r)] + ["regime"])
            for k, (y, reg) in enumerate(zip(self.observations, self.regimes), start=1):
                w.writerow([k, *(repr(float(v)) for v in y), reg])


@dataclass(frozen=True, eq=False)
class SimParams:
    """Stacked (pre, post) system arrays in the form the kernels consume."""

    F: np.ndarray  # (2, p, p)
    c: np.ndarray  # (2, p)
    L: np.ndarray  # (2, p, p)
    H: np.ndarray  # (2, r, p)
    d: np.ndarray  # (2, r)
    M: np.ndarray  # (2, r, r)
    x0_mean: np.ndarray  # (p,)
    x0_sqrt: np.ndarray  # (p, p)

    @property
    def noise_dim(self) -> int:
        return self.F.shape[1] + self.H.shape[1]

    @classmethod
    def build(cls, model: ModelSpec, scenario: ChangeScenario) -> "SimParams":
        pre = model.at(scenario.theta0)
        post = model.at(scenario.theta_true)
        st = lambda f: np.ascontiguousarray(np.stack([f(pre), f(post)]), dtype=float)  # noqa: E731
        return cls(
            st(lambda s: s.F),
            st(lambda s: s.state_offset),
            st(lambda s: psd_sqrt(s.Sigma1)),
            st(lambda s: s.H),
            st(lambda s: s.obs_offset),
            st(lambda s: psd_sqrt(s.Sigma2)),
            pre.stationary_mean(),
            psd_sqrt(pre.stationary_cov()),
        )


def stationary_draw(model: ModelSpec, theta: float, seed: int | np.random.Generator) -> np.ndarray:
    """One draw of the state from its stationary law at ``theta``."""
    rng = seed if isinstance(seed, np.random.Generator) else rep_rng(seed, 0)
    sys = model.at(theta)
    if model.variant == "ARMeanShift" and model.p == 1:
        a = model.ar_coefs[0]
        cov = np.array([[model.sigma2 / (1.0 - a * a)]])
    else:
        cov = sys.stationary_cov()
    return sys.stationary_mean() + psd_sqrt(cov) @ rng.standard_normal(sys.p)


def simulate_trajectory(model: ModelSpec, scenario: ChangeScenario, n: int, seed: int, rep: int = 0) -> Trajectory:
    """Simulate X_0..X_n, Y_1..Y_n with the change at ``scenario.omega``.

    X_0 always comes from the theta0 stationary law.  The random stream is
    the one the Monte Carlo kernels use for replication ``rep``, so a
    trajectory here is bit-identical to what a batch run sees.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sp = SimParams.build(model, scenario)
    rng = rep_rng(seed, rep)
    p = model.p
    x = sp.x0_mean + sp.x0_sqrt @ rng.standard_normal(p)
    noise = rng.standard_normal((n, sp.noise_dim))
    states = np.empty((n + 1, p))
    obs = np.empty((n, model.r))
    states[0] = x
    w = scenario.omega_index
    for k in range(1, n + 1):
        reg = 1 if k >= w else 0
        z = noise[k - 1]
        x = sp.F[reg] @ x + sp.c[reg] + sp.L[reg] @ z[:p]
        states[k] = x
        obs[k - 1] = sp.H[reg] @ x + sp.d[reg] + sp.M[reg] @ z[p:]
    return Trajectory(states, obs, scenario, seed)
