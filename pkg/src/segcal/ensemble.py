"""Probability-space ensembling, MC-dropout averaging and the ensemble-size sweep."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import calibration as cal
from .calibration import fmt_real
from .segmetrics import dice_coefficient, union_foreground_box
from .stats import BootstrapConfig, bootstrap_ci
from .volume import LabelVolume, ProbabilityVolume, argmax_labels, check_same_grid

DEFAULT_SIZES = (1, 2, 5, 10, 25, 50)
METRICS = ("nll", "brier", "ece", "dice")
REGIONS = ("whole", "box")


class InsufficientMembersError(ValueError):
    pass


def ensemble_mean(members: Sequence[ProbabilityVolume]) -> ProbabilityVolume:
    """Average member probabilities voxel- and class-wise."""
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    meta = check_same_grid(*members)
    k = members[0].classes
    if any(m.classes != k for m in members):
        raise ValueError("members disagree on the number of classes")
    acc = np.zeros(members[0].probs.shape, dtype=np.float64)
    for m in members:
        acc += m.probs
    return ProbabilityVolume(meta, k, acc / len(members),
                             normalized=all(m.normalized for m in members))


def mc_dropout_mean(sampler: Callable, x, samples: int = 50, seed: int = 0) -> ProbabilityVolume:
    """Mean of ``samples`` stochastic passes ``sampler(x, rng)`` from one seeded stream."""
    if samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    rng = np.random.default_rng(seed)
    first = sampler(x, rng)
    acc = first.probs.astype(np.float64)
    for _ in range(samples - 1):
        acc += sampler(x, rng).probs
    return ProbabilityVolume(first.meta, first.classes, acc / samples, normalized=first.normalized)


@dataclass(frozen=True)
class EnsembleConfig:
    members: int
    subsample_sizes: tuple[int, ...] = DEFAULT_SIZES
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.members < 1:
            raise ValueError("need at least one member")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        sizes = tuple(int(s) for s in self.subsample_sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("subsample sizes must be >= 1")
        object.__setattr__(self, "subsample_sizes", sizes)

    @classmethod
    def truncated(cls, members: int, sizes=DEFAULT_SIZES, **kw) -> "EnsembleConfig":
        """Drop the sizes that exceed the available member count."""
        return cls(members, tuple(s for s in sizes if s <= members), **kw)

    def check(self):
        too_big = [s for s in self.subsample_sizes if s > self.members]
        if too_big:
            raise InsufficientMembersError(
                f"ensemble sizes {too_big} exceed the {self.members} available members")


def subset(cfg: EnsembleConfig, size: int, repeat: int) -> np.ndarray:
    """Sorted member indices for one repeat; depends only on (seed, size, repeat)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, size, repeat]))
    return np.sort(rng.choice(cfg.members, size=size, replace=False))


def case_metric(p: ProbabilityVolume, y: LabelVolume, metric: str, region: str = "whole",
                num_bins: int = cal.DEFAULT_BINS) -> float | None:
    """One per-case number. Dice is the mean foreground Dice on the whole volume."""
    if metric == "dice":
        pred = argmax_labels(p)
        scores = [d for k in range(1, y.classes) if (d := dice_coefficient(pred, y, k)) is not None]
        return float(np.mean(scores)) if scores else None
    mask = union_foreground_box(y) if region == "box" else None
    if metric == "nll":
        return cal.nll(p, y, mask)
    if metric == "brier":
        return cal.brier(p, y, mask)
    if metric == "ece":
        return cal.reliability(p, y, mask, num_bins).ece
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class SweepRow:
    size: int
    repeat_count: int
    metric: str
    region: str
    mean: float
    ci_lo: float
    ci_hi: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    # per_case[i, c]: metric of case c averaged over the repeats of sizes[i]
    sizes: tuple[int, ...]
    per_case: np.ndarray
    # per_repeat[i][r]: case-averaged metric of repeat r at sizes[i]
    per_repeat: list[np.ndarray] = field(default_factory=list)


def m_sweep(member_preds: Sequence[Sequence[ProbabilityVolume]], truths: Sequence[LabelVolume],
            cfg: EnsembleConfig, metric: str = "nll", region: str = "box",
            boot: BootstrapConfig | None = None) -> SweepResult:
    """Ensemble-size sweep.

    ``member_preds[m][c]`` is member ``m``'s prediction for case ``c``. For each
    size, ``cfg.repeats`` member subsets are drawn without replacement; each
    repeat contributes the case-averaged metric, and the table reports the
    mean and bootstrap CI of those repeat values.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}")
    if len(member_preds) != cfg.members:
        raise ValueError(f"config expects {cfg.members} members, got {len(member_preds)}")
    cfg.check()
    boot = boot or BootstrapConfig(seed=cfg.seed)
    ncase = len(truths)
    rows, per_case, per_repeat = [], [], []
    for size in cfg.subsample_sizes:
        vals = np.full((cfg.repeats, ncase), np.nan)
        cache: dict[tuple[int, ...], list] = {}
        for r in range(cfg.repeats):
            idx = tuple(subset(cfg, size, r))
            if idx not in cache:
                cache[idx] = [case_metric(ensemble_mean([member_preds[m][c] for m in idx]),
                                          truths[c], metric, region) for c in range(ncase)]
            vals[r] = [np.nan if v is None else v for v in cache[idx]]
        repeat_means = np.nanmean(vals, axis=1)
        ci = bootstrap_ci(repeat_means, "mean", boot)
        rows.append(SweepRow(size, cfg.repeats, metric, region, ci.point, ci.ci_lo, ci.ci_hi))
        per_case.append(np.nanmean(vals, axis=0))
        per_repeat.append(repeat_means)
    return SweepResult(rows, cfg.subsample_sizes, np.array(per_case), per_repeat)


SWEEP_HEADER = ("M", "repeat_count", "metric", "region", "mean", "ci_lo", "ci_hi")


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    out = io.StringIO()
    out.write(",".join(SWEEP_HEADER) + "\n")
    for r in rows:
        out.write(f"{r.size},{r.repeat_count},{r.metric},{r.region},"
                  f"{fmt_real(r.mean)},{fmt_real(r.ci_lo)},{fmt_real(r.ci_hi)}\n")
    return out.getvalue()
