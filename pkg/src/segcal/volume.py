"""Volumetric data types and the SEGV1 file format.

Arrays are held in C order with z slowest: labels have shape ``(nz, ny, nx)``
and probabilities ``(nz, ny, nx, K)`` with the class channel fastest.
Every constructor validates, so downstream code never sees a probability
outside [0, 1] or a label >= K.

SEGV1 layout::

    SEGV1\\n
    {"classes":K,"dims":[nx,ny,nz],"dtype":"f32","kind":"probs","normalized":true,"spacing":[sx,sy,sz]}\\n
    <raw little-endian payload>

Labels are stored as u8, probabilities as f32.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"SEGV1\n"
NORMALIZED_TOL = 1e-5
MAX_CLASSES = 256


class VolumeFormatError(ValueError):
    """Invalid SEGV1 content. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class MetaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GridMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("dims and spacing must have three components")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be finite and > 0, got {spacing}")
        if dims[0] * dims[1] * dims[2] > np.iinfo(np.intp).max:
            raise ValueError("grid too large for this platform")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabelVolume:
    meta: GridMeta
    classes: int
    labels: np.ndarray

    def __post_init__(self):
        k = int(self.classes)
        if not 2 <= k <= MAX_CLASSES:
            raise ValueError(f"classes must be in [2, {MAX_CLASSES}], got {k}")
        labels = np.asarray(self.labels)
        if labels.shape != self.meta.shape:
            if labels.size != self.meta.size:
                raise ValueError(
                    f"label array has {labels.size} entries, grid needs {self.meta.size}")
            labels = labels.reshape(self.meta.shape)
        if labels.dtype.kind not in "iub":
            raise ValueError("labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k - 1}]")
        object.__setattr__(self, "classes", k)
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (self.meta == other.meta and self.classes == other.classes
                and np.array_equal(self.labels, other.labels))

    __hash__ = None

    def segment(self, k: int) -> np.ndarray:
        return self.labels == k


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-voxel class probabilities, stored as float32.

    ``normalized`` asserts that channels sum to one per voxel. Sigmoid-head
    outputs are left unnormalized. Feature images for the toy segmenter use
    this type too, with ``classes`` equal to the input channel count.
    """

    meta: GridMeta
    classes: int
    probs: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        k = int(self.classes)
        if not 1 <= k <= MAX_CLASSES:
            raise ValueError(f"classes must be in [1, {MAX_CLASSES}], got {k}")
        probs = np.asarray(self.probs)
        shape = self.meta.shape + (k,)
        if probs.shape != shape:
            if probs.size != self.meta.size * k:
                raise ValueError(
                    f"probability array has {probs.size} entries, grid needs {self.meta.size * k}")
            probs = probs.reshape(shape)
        probs = probs.astype(np.float32)
        bad = _first_out_of_range(probs)
        if bad is not None:
            raise ValueError(f"probability {probs.reshape(-1)[bad]!r} at index {bad} outside [0, 1]")
        normalized = bool(self.normalized)
        if normalized:
            bad = _first_unnormalized(probs)
            if bad is not None:
                raise ValueError(f"voxel {bad} channel sum deviates from 1 by more than {NORMALIZED_TOL}")
        object.__setattr__(self, "classes", k)
        object.__setattr__(self, "normalized", normalized)
        object.__setattr__(self, "probs", _frozen(probs))

    def __eq__(self, other):
        if not isinstance(other, ProbabilityVolume):
            return NotImplemented
        return (self.meta == other.meta and self.classes == other.classes
                and self.normalized == other.normalized
                and np.array_equal(self.probs.view(np.uint32), other.probs.view(np.uint32)))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VoxelMask:
    meta: GridMeta
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.meta.shape:
            if mask.size != self.meta.size:
                raise ValueError(f"mask has {mask.size} entries, grid needs {self.meta.size}")
            mask = mask.reshape(self.meta.shape)
        object.__setattr__(self, "mask", _frozen(mask))

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.mask, other.mask)

    __hash__ = None

    @property
    def count(self) -> int:
        return int(self.mask.sum())


Volume = Union[LabelVolume, ProbabilityVolume]


def _first_out_of_range(flat: np.ndarray) -> int | None:
    flat = flat.reshape(-1)
    bad = ~((flat >= 0) & (flat <= 1))  # NaN fails both comparisons
    if bad.any():
        return int(np.argmax(bad))
    return None


def _first_unnormalized(probs: np.ndarray) -> int | None:
    sums = probs.reshape(-1, probs.shape[-1]).astype(np.float64).sum(axis=1)
    bad = np.abs(sums - 1.0) > NORMALIZED_TOL
    if bad.any():
        return int(np.argmax(bad))
    return None


def check_same_grid(*vols) -> GridMeta:
    """Return the shared meta of ``vols`` (``None`` entries skipped)."""
    vols = [v for v in vols if v is not None]
    meta = vols[0].meta
    for v in vols[1:]:
        if v.meta != meta:
            raise MetaMismatchError(f"grid mismatch: {meta} vs {v.meta}")
    return meta


def argmax_labels(p: ProbabilityVolume) -> LabelVolume:
    """Hard prediction; ties go to the lowest class index."""
    if p.classes < 2:
        raise ValueError("argmax needs at least two classes")
    # np.argmax returns the first maximal index, which is the tie rule
    return LabelVolume(p.meta, p.classes, np.argmax(p.probs, axis=-1))


# -- SEGV1 -------------------------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _header(vol: Volume) -> dict:
    head = {
        "classes": vol.classes,
        "dims": list(vol.meta.dims),
        "spacing": list(vol.meta.spacing),
    }
    if isinstance(vol, LabelVolume):
        head.update(kind="labels", dtype="u8")
    else:
        head.update(kind="probs", dtype="f32", normalized=vol.normalized)
    return head


def to_bytes(vol: Volume) -> bytes:
    head = MAGIC + canonical_json(_header(vol)) + b"\n"
    if isinstance(vol, LabelVolume):
        payload = vol.labels.astype("<u1").tobytes(order="C")
    elif isinstance(vol, ProbabilityVolume):
        payload = vol.probs.astype("<f4").tobytes(order="C")
    else:
        raise TypeError(f"cannot serialize {type(vol).__name__}")
    return head + payload


def write_volume(vol: Volume, path) -> None:
    data = to_bytes(vol)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


_HEADER_KEYS = {
    "labels": {"classes", "dims", "dtype", "kind", "spacing"},
    "probs": {"classes", "dims", "dtype", "kind", "normalized", "spacing"},
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def from_bytes(data: bytes) -> Volume:
    if not data.startswith(MAGIC):
        raise VolumeFormatError("missing SEGV1 magic line", 0)
    start = len(MAGIC)
    end = data.find(b"\n", start)
    if end < 0:
        raise VolumeFormatError("unterminated header line", start)
    raw = data[start:end]
    try:
        head = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", None) or getattr(exc, "start", 0)
        raise VolumeFormatError(f"header is not valid JSON: {exc}", start + pos) from None
    if not isinstance(head, dict):
        raise VolumeFormatError("header must be a JSON object", start)
    kind = head.get("kind")
    if kind not in _HEADER_KEYS:
        raise VolumeFormatError(f"unknown kind {kind!r}", start)
    if set(head) != _HEADER_KEYS[kind]:
        raise VolumeFormatError(f"header keys {sorted(head)} do not match kind {kind!r}", start)
    if head["dtype"] != ("u8" if kind == "labels" else "f32"):
        raise VolumeFormatError(f"dtype {head['dtype']!r} invalid for kind {kind!r}", start)
    dims, spacing, classes = head["dims"], head["spacing"], head["classes"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(_is_int(d) for d in dims)):
        raise VolumeFormatError("dims must be three integers", start)
    if not (isinstance(spacing, list) and len(spacing) == 3
            and all(isinstance(s, float) for s in spacing)):
        raise VolumeFormatError("spacing must be three reals", start)
    if not _is_int(classes):
        raise VolumeFormatError("classes must be an integer", start)
    if kind == "probs" and not isinstance(head["normalized"], bool):
        raise VolumeFormatError("normalized must be a boolean", start)
    if canonical_json(head) != raw:
        raise VolumeFormatError("header JSON is not canonical", start)
    try:
        meta = GridMeta(tuple(dims), tuple(spacing))
    except ValueError as exc:
        raise VolumeFormatError(str(exc), start) from None
    lo = 2 if kind == "labels" else 1
    if not lo <= classes <= MAX_CLASSES:
        raise VolumeFormatError(f"classes {classes} outside [{lo}, {MAX_CLASSES}]", start)

    offset = end + 1
    payload = data[offset:]
    itemsize = 1 if kind == "labels" else 4
    count = meta.size * (1 if kind == "labels" else classes)
    expected = count * itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}", offset)

    if kind == "labels":
        arr = np.frombuffer(payload, dtype="<u1")
        bad = np.flatnonzero(arr >= classes)
        if bad.size:
            i = int(bad[0])
            raise VolumeFormatError(f"label {arr[i]} >= classes {classes}", offset + i)
        return LabelVolume(meta, classes, arr.reshape(meta.shape))

    arr = np.frombuffer(payload, dtype="<f4")
    i = _first_out_of_range(arr)
    if i is not None:
        raise VolumeFormatError(f"probability {arr[i]!r} outside [0, 1]", offset + 4 * i)
    probs = arr.reshape(meta.shape + (classes,))
    if head["normalized"]:
        v = _first_unnormalized(probs)
        if v is not None:
            raise VolumeFormatError(
                f"voxel {v} channel sum deviates from 1 by more than {NORMALIZED_TOL}",
                offset + 4 * classes * v)
    return ProbabilityVolume(meta, classes, probs, head["normalized"])


def read_volume(path) -> Volume:
    with open(os.fspath(path), "rb") as fh:
        return from_bytes(fh.read())
