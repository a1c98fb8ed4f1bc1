"""Seeded synthetic segmentation phantoms with a domain-shift knob.

Each phantom draws its own random stream from ``(seed, index)``, so the first
``n`` phantoms of a run do not depend on how many were requested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume import GridMeta, LabelVolume, ProbabilityVolume

SHAPES = ("blobs", "rings", "nested")
RING_INNER = 0.5
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class Shift:
    """Intensity bias, in-plane box blur radius (voxels) and contrast multiplier.

    Contrast is scaled about mid-gray: ``v -> 0.5 + contrast * (v - 0.5)``.
    """

    bias: float = 0.0
    blur_radius: int = 0
    contrast: float = 1.0

    def __post_init__(self):
        if self.blur_radius < 0 or self.contrast < 0:
            raise ValueError("blur_radius and contrast must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return self.bias == 0 and self.blur_radius == 0 and self.contrast == 1


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 2)
    spacing: tuple[float, float, float] = (2.0, 2.0, 3.0)
    classes: int = 2
    shape: str = "blobs"
    contrast: float = 0.5
    noise_sigma: float = 0.15
    fg_fraction: float = 0.12
    in_channels: int = 1
    shift: Shift = field(default_factory=Shift)
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if not self.contrast > 0:
            raise ValueError("contrast must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.fg_fraction < 1:
            raise ValueError("fg_fraction must lie in (0, 1)")
        if self.classes < 2 or self.in_channels < 1:
            raise ValueError("need classes >= 2 and in_channels >= 1")

    @property
    def meta(self) -> GridMeta:
        return GridMeta(self.dims, self.spacing)

    def class_means(self) -> np.ndarray:
        k = np.arange(self.classes)
        return 0.5 + self.contrast * (k / (self.classes - 1) - 0.5)


# Frozen benchmark presets. Changing any value invalidates acceptance results.
# Difficulty grows with noise_sigma / contrast: 0.2, 0.4, 1.0.
PRESETS: dict[str, PhantomConfig] = {
    "easy": PhantomConfig(contrast=0.6, noise_sigma=0.12),
    "medium": PhantomConfig(contrast=0.5, noise_sigma=0.2),
    "hard": PhantomConfig(contrast=0.25, noise_sigma=0.25),
    "shifted": PhantomConfig(contrast=0.5, noise_sigma=0.2,
                             shift=Shift(bias=0.1, blur_radius=1, contrast=0.5)),
}


def preset(name: str, seed: int = 0, **overrides) -> PhantomConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], seed=seed, **overrides)


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_axes(rng, radius):
    stretch = rng.uniform(0.75, 1.0 / 0.75)
    return radius * stretch, radius / stretch, rng.uniform(0, math.pi)


def _place(shapes, width, height, margin, rng):
    """One attempt at non-overlapping placement; ``None`` on collision."""
    placed = []  # (cx, cy, a, b, theta)
    for r, _ in shapes:
        a, b, theta = _draw_axes(rng, r)
        reach = max(a, b) + margin
        if 2 * reach >= min(width, height):
            raise ValueError("shapes do not fit the grid; lower fg_fraction or enlarge dims")
        cx = rng.uniform(reach, width - reach)
        cy = rng.uniform(reach, height - reach)
        if any(math.hypot(cx - p[0], cy - p[1]) <= max(a, b) + max(p[2], p[3]) for p in placed):
            return None
        placed.append((cx, cy, a, b, theta))
    return placed


def _render_labels(cfg: PhantomConfig, rng) -> np.ndarray:
    nx, ny, nz = cfg.dims
    sx, sy, _ = cfg.spacing
    width, height = nx * sx, ny * sy
    area = width * height
    # voxel-center coordinates in mm
    yy, xx = np.meshgrid((np.arange(ny) + 0.5) * sy, (np.arange(nx) + 0.5) * sx, indexing="ij")
    nfg = cfg.classes - 1

    if cfg.shape == "nested":
        radius = math.sqrt(cfg.fg_fraction * area / math.pi)
        scales = [math.sqrt((nfg - j) / nfg) for j in range(nfg)]
        shapes = [(radius, scales)]
    elif cfg.shape == "rings":
        radius = math.sqrt(cfg.fg_fraction / nfg * area / (math.pi * (1 - RING_INNER**2)))
        shapes = [(radius, None)] * nfg
    else:
        radius = math.sqrt(cfg.fg_fraction / nfg * area / math.pi)
        shapes = [(radius, None)] * nfg

    for _ in range(MAX_PLACEMENT_TRIES):
        placed = _place(shapes, width, height, max(sx, sy), rng)
        if placed is not None:
            break
    else:
        raise ValueError("could not place non-overlapping shapes; lower fg_fraction")

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    centers = [(p[0], p[1]) for p in placed]
    for z in range(nz):
        sl = labels[z]
        for j, ((_, scales), (_, _, a, b, theta)) in enumerate(zip(shapes, placed)):
            if z:
                # slow drift of the shape center between slices
                cx, cy = centers[j]
                centers[j] = (cx + rng.normal(0.0, 0.5 * sx), cy + rng.normal(0.0, 0.5 * sy))
            cx, cy = centers[j]
            if cfg.shape == "nested":
                for k, s in enumerate(scales, start=1):
                    sl[_ellipse(xx, yy, cx, cy, a * s, b * s, theta)] = k
            elif cfg.shape == "rings":
                ring = _ellipse(xx, yy, cx, cy, a, b, theta) & ~_ellipse(
                    xx, yy, cx, cy, a * RING_INNER, b * RING_INNER, theta)
                sl[ring] = j + 1
            else:
                sl[_ellipse(xx, yy, cx, cy, a, b, theta)] = j + 1
    return labels


def render_features(cfg: PhantomConfig, labels: np.ndarray, rng) -> np.ndarray:
    means = cfg.class_means()[labels]
    chans = [means + rng.normal(0.0, cfg.noise_sigma, size=labels.shape) if cfg.noise_sigma
             else means.copy() for _ in range(cfg.in_channels)]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def shift_array(x: np.ndarray, shift: Shift) -> np.ndarray:
    """Bias, box blur, contrast, then clip to [0, 1]. ``x`` is ``(nz, ny, nx, C)``."""
    x = np.asarray(x, dtype=np.float64) + shift.bias
    if shift.blur_radius:
        size = 2 * shift.blur_radius + 1
        x = ndimage.uniform_filter(x, size=(1, size, size, 1), mode="nearest")
    x = 0.5 + shift.contrast * (x - 0.5)
    return np.clip(x, 0.0, 1.0)


def apply_shift(vol: ProbabilityVolume, shift: Shift) -> ProbabilityVolume:
    if shift.is_identity:
        return vol
    return ProbabilityVolume(vol.meta, vol.classes, shift_array(vol.probs, shift), normalized=False)


def phantom_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_one(cfg: PhantomConfig, index: int) -> tuple[ProbabilityVolume, LabelVolume]:
    rng = phantom_rng(cfg.seed, index)
    labels = _render_labels(cfg, rng)
    feats = render_features(cfg, labels, rng)
    if not cfg.shift.is_identity:
        feats = shift_array(feats, cfg.shift)
    meta = cfg.meta
    return (ProbabilityVolume(meta, cfg.in_channels, feats, normalized=False),
            LabelVolume(meta, cfg.classes, labels))


def generate(cfg: PhantomConfig, count: int) -> list[tuple[ProbabilityVolume, LabelVolume]]:
    """``count`` i.i.d. phantoms as (features, labels) pairs."""
    if count < 0:
        raise ValueError("count must be >= 0")
    return [generate_one(cfg, i) for i in range(count)]
