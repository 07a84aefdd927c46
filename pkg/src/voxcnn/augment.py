"""Stochastic volume augmentation on the raw 0..255 intensity scale.

Seven operations: additive Gaussian noise, per-slice Gaussian blur,
in-plane rotation, vertical/horizontal flips, cutout rectangles, and
gamma contrast. Noise, blur, the two flips, and gamma are each gated on
with probability ``gate_rate``; rotation and cutout are always applied
unless ``gate_geometry`` opts them into the same gating. Included ops run
in a uniformly shuffled order.

Geometric ops (rotation, flips, cutout) and blur act per slice with
identical parameters on every slice, so a scan stays anatomically
coherent; parameters are drawn once per volume. Every op clamps its
output to [0, 255] and preserves shape.

Plans are sampled separately from application (:func:`sample_plan` /
:func:`apply_plan`): gate statistics can be tested without touching voxel
data, and a stored plan makes a preview reproducible. All draws come from
labeled child streams of one volume-specific rng, so adding or removing
an op never shifts another op's parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .rng import Rng

GATE_ORDER = ("noise", "blur", "rotate", "flip_v", "flip_h", "cutout", "gamma")
RATE_GATED = frozenset(("noise", "blur", "flip_v", "flip_h", "gamma"))

NOISE_STD_RANGE = (0.0, 20.0)
BLUR_STD_RANGE = (0.0, 2.0)
ROTATION_DEG_RANGE = (-30.0, 30.0)
CUTOUT_COUNT_RANGE = (0, 4)
CUTOUT_FRAC = 0.20
CUTOUT_FILL = 128.0
GAMMA_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class AugmentConfig:
    noise_std_range: Tuple[float, float] = NOISE_STD_RANGE
    blur_std_range: Tuple[float, float] = BLUR_STD_RANGE
    rotation_deg_range: Tuple[float, float] = ROTATION_DEG_RANGE
    cutout_count_range: Tuple[int, int] = CUTOUT_COUNT_RANGE
    cutout_frac: float = CUTOUT_FRAC
    gamma_range: Tuple[float, float] = GAMMA_RANGE
    gate_rate: float = 0.5
    gate_geometry: bool = False

    def __post_init__(self):
        for name in ("noise_std_range", "blur_std_range", "rotation_deg_range",
                     "cutout_count_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered: {(lo, hi)}")
        if not 0.0 <= self.gate_rate <= 1.0:
            raise ValueError(f"gate_rate must lie in [0, 1], got {self.gate_rate}")
        if not 0.0 < self.cutout_frac <= 1.0:
            raise ValueError(f"cutout_frac must lie in (0, 1], got {self.cutout_frac}")
        if self.cutout_count_range[0] < 0:
            raise ValueError("cutout counts must be nonnegative")


def _check_volume(vol: np.ndarray) -> np.ndarray:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError(f"expected a (D, H, W) volume, got shape {vol.shape}")
    return vol


def _clamp(vol: np.ndarray) -> np.ndarray:
    return np.clip(vol, 0.0, 255.0)


# ---------------------------------------------------------------------------
# Individual operations
# ---------------------------------------------------------------------------

def add_gaussian_noise(vol: np.ndarray, rng: Rng, std: float) -> np.ndarray:
    vol = _check_volume(vol)
    if not NOISE_STD_RANGE[0] <= std <= NOISE_STD_RANGE[1]:
        raise ValueError(f"noise std {std} outside {NOISE_STD_RANGE}")
    if std == 0.0:
        return vol.copy()
    noise = rng.normal(0.0, std, size=vol.shape).astype(vol.dtype)
    return _clamp(vol + noise)


def _reflect_indices(n: int, radius: int) -> np.ndarray:
    """Mirror-without-edge-repeat index run of length n + 2*radius."""
    if n == 1:
        return np.zeros(n + 2 * radius, dtype=np.int64)
    idx = np.abs(np.arange(-radius, n + radius, dtype=np.int64))
    period = 2 * n - 2
    idx %= period
    return np.where(idx >= n, period - idx, idx)


def _gauss_kernel(std: float) -> np.ndarray:
    radius = math.ceil(3.0 * std)
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1, dtype=np.float64) / std) ** 2)
    return taps / taps.sum()


def gaussian_blur(vol: np.ndarray, rng: Optional[Rng], std: float) -> np.ndarray:
    """Separable per-slice Gaussian blur, kernel radius ceil(3*std).

    ``rng`` is unused (kept for pipeline signature uniformity); the std is
    the only stochastic input and is drawn by the caller.
    """
    vol = _check_volume(vol)
    if not BLUR_STD_RANGE[0] <= std <= BLUR_STD_RANGE[1]:
        raise ValueError(f"blur std {std} outside {BLUR_STD_RANGE}")
    if std == 0.0:
        return vol.copy()
    taps = _gauss_kernel(std)
    radius = (len(taps) - 1) // 2
    out = vol.astype(np.float64)
    for axis, extent in ((1, vol.shape[1]), (2, vol.shape[2])):
        padded = np.take(out, _reflect_indices(extent, radius), axis=axis)
        acc = np.zeros_like(out)
        for i, k in enumerate(taps):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + extent)
            acc += k * padded[tuple(sl)]
        out = acc
    return _clamp(out).astype(vol.dtype)


def rotate_inplane(vol: np.ndarray, rng: Optional[Rng], angle_deg: float) -> np.ndarray:
    """Rotate every slice by the same angle about the slice center.

    Bilinear interpolation on the inverse-mapped grid; samples falling
    outside the source slice read as 0. ``rng`` is unused.
    """
    vol = _check_volume(vol)
    if angle_deg == 0.0:
        return vol.copy()
    d, h, w = vol.shape
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = ys - cy, xs - cx
    src_y = cy + cos_a * dy + sin_a * dx
    src_x = cx - sin_a * dy + cos_a * dx
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = (src_y - y0).astype(vol.dtype)
    wx = (src_x - x0).astype(vol.dtype)
    out = np.zeros_like(vol)
    for oy, ox, weight in (
            (0, 0, (1 - wy) * (1 - wx)),
            (0, 1, (1 - wy) * wx),
            (1, 0, wy * (1 - wx)),
            (1, 1, wy * wx)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc, xc = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
        out += vol[:, yc, xc] * (weight * valid)
    return _clamp(out)


def flip(vol: np.ndarray, axis: str) -> np.ndarray:
    """Reverse the slice rows ("vertical") or columns ("horizontal")."""
    vol = _check_volume(vol)
    if axis == "vertical":
        return np.ascontiguousarray(vol[:, ::-1, :])
    if axis == "horizontal":
        return np.ascontiguousarray(vol[:, :, ::-1])
    raise ValueError(f"flip axis must be 'vertical' or 'horizontal', got {axis!r}")


def _draw_cutout_rects(rng: Rng, shape, count_range=CUTOUT_COUNT_RANGE,
                       frac: float = CUTOUT_FRAC) -> Tuple[Tuple[int, int, int, int], ...]:
    _, h, w = shape
    n = rng.integers(count_range[0], count_range[1] + 1)
    rh = max(1, int(frac * h))
    rw = max(1, int(frac * w))
    rects = []
    for _ in range(n):
        top = rng.integers(0, h - rh + 1)
        left = rng.integers(0, w - rw + 1)
        rects.append((top, left, rh, rw))
    return tuple(rects)


def apply_cutout_rects(vol: np.ndarray, rects) -> np.ndarray:
    vol = _check_volume(vol).copy()
    for top, left, rh, rw in rects:
        vol[:, top:top + rh, left:left + rw] = CUTOUT_FILL
    return vol


def cutout(vol: np.ndarray, rng: Rng, count_range=CUTOUT_COUNT_RANGE,
           frac: float = CUTOUT_FRAC) -> np.ndarray:
    """Overwrite n ~ uniform{0..4} mid-gray rectangles of 0.2H x 0.2W.

    Rectangle positions are uniform over placements fully inside the
    slice, identical across slices.
    """
    vol = _check_volume(vol)
    return apply_cutout_rects(vol, _draw_cutout_rects(rng, vol.shape, count_range, frac))


def gamma_contrast(vol: np.ndarray, rng: Optional[Rng], gamma: float) -> np.ndarray:
    """Power-law remap v -> 255 * (v/255)^gamma. ``rng`` is unused."""
    vol = _check_volume(vol)
    if not GAMMA_RANGE[0] <= gamma <= GAMMA_RANGE[1]:
        raise ValueError(f"gamma {gamma} outside {GAMMA_RANGE}")
    if gamma == 1.0:
        return vol.copy()
    out = 255.0 * np.power(vol.astype(np.float64) / 255.0, gamma)
    return _clamp(out).astype(vol.dtype)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class AugmentPlan:
    """A fully drawn augmentation: ops in application order plus parameters."""

    shape: Tuple[int, int, int]
    ops: Tuple[str, ...]
    noise_std: float
    blur_std: float
    angle_deg: float
    gamma: float
    cutout_rects: Tuple[Tuple[int, int, int, int], ...]
    noise_rng: Optional[Rng] = field(default=None, repr=False)


def sample_plan(rng: Rng, cfg: AugmentConfig, shape) -> AugmentPlan:
    """Draw gates, parameters, and application order for one volume.

    Gate uniforms are drawn for all seven ops every time (an always-on op
    just uses threshold 1.0), keeping the stream layout fixed across
    config changes.
    """
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"bad volume shape {shape}")
    gates = rng.child("gates").uniform(0.0, 1.0, size=len(GATE_ORDER))
    included = []
    for i, op in enumerate(GATE_ORDER):
        gated = op in RATE_GATED or cfg.gate_geometry
        threshold = cfg.gate_rate if gated else 1.0
        if gates[i] < threshold:
            included.append(op)
    order = rng.child("order").permutation(len(included))
    ops = tuple(included[i] for i in order)
    return AugmentPlan(
        shape=tuple(int(s) for s in shape),
        ops=ops,
        noise_std=rng.child("noise.std").uniform(*cfg.noise_std_range),
        blur_std=rng.child("blur.std").uniform(*cfg.blur_std_range),
        angle_deg=rng.child("rotate.angle").uniform(*cfg.rotation_deg_range),
        gamma=rng.child("gamma.value").uniform(*cfg.gamma_range),
        cutout_rects=_draw_cutout_rects(rng.child("cutout"), shape,
                                        cfg.cutout_count_range, cfg.cutout_frac),
        noise_rng=rng.child("noise.values"),
    )


def apply_plan(vol: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    vol = _check_volume(vol)
    if tuple(vol.shape) != plan.shape:
        raise ValueError(f"volume shape {vol.shape} does not match plan {plan.shape}")
    out = vol.copy()
    for op in plan.ops:
        if op == "noise":
            out = add_gaussian_noise(out, plan.noise_rng, plan.noise_std)
        elif op == "blur":
            out = gaussian_blur(out, None, plan.blur_std)
        elif op == "rotate":
            out = rotate_inplane(out, None, plan.angle_deg)
        elif op == "flip_v":
            out = flip(out, "vertical")
        elif op == "flip_h":
            out = flip(out, "horizontal")
        elif op == "cutout":
            out = apply_cutout_rects(out, plan.cutout_rects)
        elif op == "gamma":
            out = gamma_contrast(out, None, plan.gamma)
        else:
            raise ValueError(f"unknown op {op!r} in plan")
    return out


def apply_pipeline(vol: np.ndarray, rng: Rng, cfg: AugmentConfig) -> np.ndarray:
    """Sample a plan from ``rng`` and run it over ``vol``."""
    return apply_plan(vol, sample_plan(rng, cfg, np.asarray(vol).shape))
