"""Bootstrap confidence intervals and a paired bootstrap significance test.

Inputs are sorted into a canonical order before resampling, so results do not
depend on the order in which cases were listed.  Resample indices are drawn
row by row from one generator; growing ``resamples`` keeps earlier rows intact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 100
    ci_level: float = 0.95
    seed: int = 0
    alpha: float = 0.01

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resamples must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must be in (0, 1)")


class BootstrapCI(NamedTuple):
    point: float
    ci_lo: float
    ci_hi: float

    @property
    def covers_point(self) -> bool:
        return self.ci_lo <= self.point <= self.ci_hi


class PairedTest(NamedTuple):
    p_value: float
    significant: bool
    mean_difference: float


_STATS = {"mean": np.mean, "median": np.median}


def resample_indices(n: int, cfg: BootstrapConfig) -> np.ndarray:
    """``(resamples, n)`` with-replacement index draws for a sample of size ``n``."""
    rng = np.random.default_rng(cfg.seed)
    return rng.integers(0, n, size=(cfg.resamples, n))


def bootstrap_ci(values, stat: str = "mean", cfg: BootstrapConfig = BootstrapConfig()) -> BootstrapCI:
    """Percentile-method bootstrap CI for ``stat`` over per-case values."""
    if stat not in _STATS:
        raise ValueError(f"stat must be one of {sorted(_STATS)}")
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    fn = _STATS[stat]
    point = float(fn(x))
    boots = fn(x[resample_indices(x.size, cfg)], axis=1)
    tail = (1.0 - cfg.ci_level) / 2.0
    lo, hi = np.quantile(boots, [tail, 1.0 - tail])
    return BootstrapCI(point, float(lo), float(hi))


def paired_difference_test(a, b, cfg: BootstrapConfig = BootstrapConfig()) -> PairedTest:
    """Two-tailed paired bootstrap test on the mean of ``a - b``.

    p = 2 * min(#(d* <= 0) + 1, #(d* >= 0) + 1) / (B + 1), capped at 1.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("paired test needs at least two pairs")
    order = np.lexsort((b, a))
    diff = (a - b)[order]
    boots = diff[resample_indices(diff.size, cfg)].mean(axis=1)
    n = cfg.resamples
    le = (np.count_nonzero(boots <= 0) + 1) / (n + 1)
    ge = (np.count_nonzero(boots >= 0) + 1) / (n + 1)
    p = min(1.0, 2.0 * min(le, ge))
    return PairedTest(p, p < cfg.alpha, float(diff.mean()))
