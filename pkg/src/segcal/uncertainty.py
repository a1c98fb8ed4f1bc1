"""Segment-level predictive uncertainty and its relation to segmentation quality."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .segmetrics import EmptySegmentWarning
from .volume import ProbabilityVolume, argmax_labels

DEFAULT_LOGIT_EPS = 1e-4


@dataclass(frozen=True)
class SegmentUncertainty:
    class_id: int
    mean_entropy: float
    segment_size: int


@dataclass(frozen=True)
class CorrelationResult:
    n: int
    r: float | None
    p_value: float | None
    slope: float | None
    intercept: float | None
    clamp_eps: float = DEFAULT_LOGIT_EPS

    @property
    def degenerate(self) -> bool:
        return self.r is None


def binary_entropy(q) -> np.ndarray:
    """Entropy in nats of Bernoulli(q), with 0 ln 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(q > 0, q * np.log(q), 0.0)
        b = np.where(q < 1, (1 - q) * np.log1p(-q), 0.0)
    return -(a + b)


def masked_segment_entropy(p: ProbabilityVolume, k: int, mask: np.ndarray) -> SegmentUncertainty | None:
    """Mean binary entropy of class ``k`` over an explicit voxel mask."""
    mask = np.asarray(mask, dtype=bool).reshape(p.meta.shape)
    size = int(mask.sum())
    if size == 0:
        warnings.warn(f"class {k}: empty predicted segment, entropy undefined",
                      EmptySegmentWarning, stacklevel=2)
        return None
    q = p.probs[..., k][mask].astype(np.float64)
    return SegmentUncertainty(k, math.fsum(binary_entropy(q)) / size, size)


def mean_segment_entropy(p: ProbabilityVolume, k: int) -> SegmentUncertainty | None:
    """Average binary entropy of ``p(class k)`` over the predicted segment of ``k``."""
    seg = argmax_labels(p).labels == k
    return masked_segment_entropy(p, k, seg)


def logit(p, clamp_eps: float = DEFAULT_LOGIT_EPS):
    if not 0 < clamp_eps < 0.5:
        raise ValueError("clamp_eps must be in (0, 0.5)")
    p = np.clip(np.asarray(p, dtype=np.float64), clamp_eps, 1 - clamp_eps)
    out = np.log(p / (1 - p))
    return float(out) if out.ndim == 0 else out


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only below the mean; use the symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_tailed(t: float, dof: int) -> float:
    """Two-tailed p-value of Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def correlate(records, clamp_eps: float = DEFAULT_LOGIT_EPS) -> CorrelationResult:
    """Pearson r between mean entropy and logit(Dice), with its regression line.

    ``records`` is an iterable of ``(mean_entropy, dice)`` pairs.
    """
    arr = np.asarray(list(records), dtype=np.float64).reshape(-1, 2)
    n = arr.shape[0]
    if n < 3:
        raise ValueError(f"correlation needs at least 3 records, got {n}")
    x = arr[:, 0]
    y = logit(arr[:, 1], clamp_eps)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy, sxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return CorrelationResult(n, None, None, None, None, clamp_eps)
    r = max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    dof = n - 2
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt(dof / (1.0 - r * r))
        p = t_two_tailed(t, dof)
    return CorrelationResult(n, r, p, slope, intercept, clamp_eps)


@dataclass(frozen=True)
class OODFlag:
    flagged: bool
    score: float


def ood_flag(u: SegmentUncertainty, threshold: float) -> OODFlag:
    return OODFlag(u.mean_entropy > threshold, u.mean_entropy)


def auroc(scores_neg, scores_pos) -> float:
    """Probability that a positive outscores a negative (ties count one half)."""
    neg = np.asarray(scores_neg, dtype=np.float64)
    pos = np.asarray(scores_pos, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both populations must be nonempty")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))
