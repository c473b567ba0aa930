"""Monte Carlo estimates and their CSV / JSON serialisation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    se: float
    n_effective: int
    n_censored: int = 0
    seed: int | None = None
    flags: tuple[str, ...] = field(default=())

    @property
    def n_total(self) -> int:
        return self.n_effective + self.n_censored

    @classmethod
    def from_samples(cls, x, seed=None, n_censored: int = 0, flags: Iterable[str] = ()) -> "MCEstimate":
        x = np.asarray(x, dtype=float)
        n = x.size
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return cls(float(x.mean()) if n else math.nan, se, n - n_censored, n_censored, seed, tuple(flags))

    def within(self, value: float, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.se

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d


def combined_se(*ses: float) -> float:
    return math.sqrt(sum(s * s for s in ses))


def ratio_estimate(num, den) -> tuple[float, float]:
    """mean(num) / mean(den) with a delta-method standard error."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    n = num.size
    a, b = num.mean(), den.mean()
    ratio = a / b
    resid = (num - ratio * den) / b
    return float(ratio), float(resid.std(ddof=1) / math.sqrt(n))


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _plain(v) for k, v in r.items()})


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, MCEstimate):
        return o.to_dict()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_json_default, allow_nan=True))
