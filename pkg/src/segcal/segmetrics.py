"""Segment overlap and surface-free Hausdorff metrics, plus evaluation boxes."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, VoxelMask, check_same_grid

EMPTY_SEGMENT = "empty_segment"


class EmptySegmentWarning(UserWarning):
    code = EMPTY_SEGMENT


class EmptySegmentError(ValueError):
    code = EMPTY_SEGMENT


def dice_coefficient(pred: LabelVolume, truth: LabelVolume, k: int) -> float | None:
    """Dice overlap of class ``k``; ``None`` when both segments are empty."""
    check_same_grid(pred, truth)
    if k < 1:
        raise ValueError("dice is defined for foreground classes k >= 1")
    a = pred.labels == k
    b = truth.labels == k
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from every voxel of ``src`` to the nearest voxel of ``dst``.

    ``spacing`` is ``(sx, sy, sz)``; masks are ``(nz, ny, nx)``.
    """
    sampling = tuple(reversed(spacing))
    # exact Euclidean distance transform: distance of each voxel to nearest dst voxel
    dt = ndimage.distance_transform_edt(~dst, sampling=sampling)
    return dt[src]


def hausdorff95(pred: LabelVolume, truth: LabelVolume, k: int) -> float | None:
    """95th percentile of the pooled directed voxel-to-set distances, in mm.

    Returns ``None`` with an :class:`EmptySegmentWarning` when either segment
    is empty.
    """
    meta = check_same_grid(pred, truth)
    a = pred.labels == k
    b = truth.labels == k
    if not a.any() or not b.any():
        warnings.warn(f"class {k}: empty segment, HD95 undefined", EmptySegmentWarning, stacklevel=2)
        return None
    d = np.concatenate([directed_distances(a, b, meta.spacing),
                        directed_distances(b, a, meta.spacing)])
    return float(np.percentile(d, 95))


def dilated_bounding_box(truth: LabelVolume, k: int, inplane_mm: float = 8.0,
                         slices: int = 2) -> VoxelMask:
    seg = truth.labels == k
    if not seg.any():
        raise EmptySegmentError(f"class {k} has no voxels")
    sx, sy, _ = truth.meta.spacing
    pads = (int(slices), math.ceil(inplane_mm / sy), math.ceil(inplane_mm / sx))
    mask = np.zeros(truth.meta.shape, dtype=bool)
    box = []
    for axis, pad in enumerate(pads):
        other = tuple(i for i in range(3) if i != axis)
        idx = np.flatnonzero(seg.any(axis=other))
        lo = max(int(idx[0]) - pad, 0)
        hi = min(int(idx[-1]) + pad, seg.shape[axis] - 1)
        box.append(slice(lo, hi + 1))
    mask[tuple(box)] = True
    return VoxelMask(truth.meta, mask)


def union_foreground_box(truth: LabelVolume, inplane_mm: float = 8.0,
                         slices: int = 2) -> VoxelMask:
    mask = np.zeros(truth.meta.shape, dtype=bool)
    found = False
    for k in range(1, truth.classes):
        if (truth.labels == k).any():
            mask |= dilated_bounding_box(truth, k, inplane_mm, slices).mask
            found = True
    if not found:
        raise EmptySegmentError("volume has no foreground voxels")
    return VoxelMask(truth.meta, mask)
