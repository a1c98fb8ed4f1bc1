"""Proper scoring rules and reliability analysis for probabilistic segmentations.

All metrics accept an optional :class:`VoxelMask` restricting the voxels that
are scored. Sums are accumulated in float64 with ``math.fsum`` where the
result must be reproducible to the last bit.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, ProbabilityVolume, VoxelMask, check_same_grid

EPS_LOG = 1e-12
DEFAULT_BINS = 10
RENORM_FLOOR = 1e-12


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    accuracy: float | None
    mean_confidence: float | None

    @property
    def gap(self) -> float:
        if self.count == 0:
            return 0.0
        return abs(self.accuracy - self.mean_confidence)


@dataclass(frozen=True)
class ReliabilityReport:
    bins: tuple[ReliabilityBin, ...]
    total: int
    ece: float

    @property
    def num_bins(self) -> int:
        return len(self.bins)


def _check_pair(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None):
    check_same_grid(p, y, region)
    if p.classes != y.classes:
        raise ValueError(f"class count mismatch: {p.classes} vs {y.classes}")


def _flat(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None):
    """Flattened (probs, labels) for the scored voxels, probs in float64."""
    _check_pair(p, y, region)
    probs = p.probs.reshape(-1, p.classes).astype(np.float64)
    labels = y.labels.reshape(-1).astype(np.intp)
    if region is not None:
        sel = region.mask.reshape(-1)
        probs, labels = probs[sel], labels[sel]
    if labels.size == 0:
        raise EmptyRegionError("no voxels to score")
    return probs, labels


def renormalize(probs: np.ndarray) -> np.ndarray:
    """Divide each voxel's channels by their sum; uniform where the sum vanishes."""
    probs = np.asarray(probs, dtype=np.float64)
    sums = probs.sum(axis=-1, keepdims=True)
    k = probs.shape[-1]
    safe = sums >= RENORM_FLOOR
    out = np.where(safe, probs / np.where(safe, sums, 1.0), 1.0 / k)
    return out


def _distribution(p: ProbabilityVolume, probs: np.ndarray, renorm: bool) -> np.ndarray:
    if renorm and not p.normalized:
        return renormalize(probs)
    return probs


def nll(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None = None,
        renorm: bool = True) -> float:
    probs, labels = _flat(p, y, region)
    probs = _distribution(p, probs, renorm)
    true_p = np.clip(probs[np.arange(labels.size), labels], EPS_LOG, 1.0)
    return -math.fsum(np.log(true_p)) / labels.size


def brier(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None = None) -> float:
    """Multi-class Brier score averaged over classes as well as voxels.

    Raw channels are used even for unnormalized volumes.
    """
    probs, labels = _flat(p, y, region)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    per_voxel = ((probs - onehot) ** 2).sum(axis=1) / p.classes
    return math.fsum(per_voxel) / labels.size


def confidence_samples(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None = None,
                       renorm: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(confidence of the argmax class, correctness) for every scored voxel."""
    probs, labels = _flat(p, y, region)
    probs = _distribution(p, probs, renorm)
    # argmax picks the lowest index on ties, matching argmax_labels
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(labels.size), pred]
    return conf, pred == labels


def reliability_from_samples(confidence, correct, num_bins: int = DEFAULT_BINS) -> ReliabilityReport:
    """Bin samples into ``((m-1)/M, m/M]`` and compute the ECE."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size != corr.size:
        raise ValueError("confidence and correctness lengths differ")
    n = conf.size
    if n == 0:
        raise EmptyRegionError("no samples")
    edges = np.arange(num_bins + 1, dtype=np.float64) / num_bins
    # right-closed bins: m is the smallest index with conf <= edges[m]
    idx = np.searchsorted(edges, conf, side="left") - 1
    idx = np.clip(idx, 0, num_bins - 1)

    counts = np.bincount(idx, minlength=num_bins)
    order = np.argsort(idx, kind="stable")
    splits = np.cumsum(counts)[:-1]
    conf_groups = np.split(conf[order], splits)
    corr_groups = np.split(corr[order], splits)

    bins = []
    for m in range(num_bins):
        c = int(counts[m])
        if c:
            acc = int(corr_groups[m].sum()) / c
            mean_conf = math.fsum(conf_groups[m]) / c
        else:
            acc = mean_conf = None
        bins.append(ReliabilityBin(float(edges[m]), float(edges[m + 1]), c, acc, mean_conf))
    ece = ece_from_bins(bins, n)
    return ReliabilityReport(tuple(bins), n, ece)


def ece_from_bins(bins, total: int) -> float:
    return math.fsum(b.count / total * b.gap for b in bins if b.count)


def reliability(p: ProbabilityVolume, y: LabelVolume, region: VoxelMask | None = None,
                num_bins: int = DEFAULT_BINS, renorm: bool = True) -> ReliabilityReport:
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf, corr = confidence_samples(p, y, region, renorm)
    return reliability_from_samples(conf, corr, num_bins)


def ece_percent(report: ReliabilityReport) -> float:
    return 100.0 * report.ece


def merge_reports(reports) -> ReliabilityReport:
    """Pool per-case reports that share a binning into one report."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    nb = reports[0].num_bins
    if any(r.num_bins != nb for r in reports):
        raise ValueError("reports use different binnings")
    bins = []
    for m in range(nb):
        parts = [r.bins[m] for r in reports if r.bins[m].count]
        count = sum(b.count for b in parts)
        if count:
            acc = math.fsum(b.accuracy * b.count for b in parts) / count
            conf = math.fsum(b.mean_confidence * b.count for b in parts) / count
        else:
            acc = conf = None
        ref = reports[0].bins[m]
        bins.append(ReliabilityBin(ref.lo, ref.hi, count, acc, conf))
    total = sum(r.total for r in reports)
    return ReliabilityReport(tuple(bins), total, ece_from_bins(bins, total))


def fmt_real(x: float) -> str:
    """Nine significant digits, the precision used by every CSV output."""
    return f"{x:.9g}"


RELIABILITY_HEADER = ("bin_lo", "bin_hi", "count", "accuracy", "mean_confidence")


def render_reliability_csv(report: ReliabilityReport, min_count: int = 0) -> str:
    """CSV of the bins holding strictly more than ``min_count`` samples."""
    out = io.StringIO()
    out.write(",".join(RELIABILITY_HEADER) + "\n")
    for b in report.bins:
        if b.count > min_count and b.count > 0:
            out.write(",".join([fmt_real(b.lo), fmt_real(b.hi), str(b.count),
                                fmt_real(b.accuracy), fmt_real(b.mean_confidence)]) + "\n")
    return out.getvalue()
