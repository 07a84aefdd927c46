"""Synthetic volume datasets for desk-scale training experiments.

The real competition dataset is private, so smoke tests train on
generated volumes instead: every sample is a smooth low-frequency
background; positive/severe classes add bright ellipsoidal blobs whose
count, size, and brightness scale with the class. The generator is a
pure function of (seed, dims, class layout).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .rng import Rng
from .volume import (DETECTION_LABELS, SEVERITY_LABELS, Volume, resample_volume,
                     write_index, write_miav)

DEFAULT_SYNTH_DIMS = (16, 32, 32)

# per-class blob profile: (min count, max count, radius scale, brightness)
_DETECTION_PROFILE = {
    "non-covid": (0, 0, 0.0, 0.0),
    "covid": (1, 5, 0.16, 90.0),
}
_SEVERITY_PROFILE = {
    "mild": (1, 2, 0.10, 70.0),
    "moderate": (3, 4, 0.13, 85.0),
    "severe": (5, 6, 0.16, 100.0),
    "critical": (7, 8, 0.19, 115.0),
}


def _background(rng: Rng, dims) -> np.ndarray:
    """Smooth low-frequency field: a tiny uniform grid spline-upsampled."""
    coarse = rng.uniform(60.0, 140.0, size=(4, 5, 5)).astype(np.float32)
    return resample_volume(Volume(coarse, "raw255", "bg"), dims).voxels


def _add_blobs(vox: np.ndarray, rng: Rng, count_range, radius_scale: float,
               brightness: float) -> np.ndarray:
    lo, hi = count_range
    n = lo if lo == hi else rng.integers(lo, hi + 1)
    if n == 0:
        return vox
    dims = vox.shape
    grids = np.indices(dims).astype(np.float64)
    out = vox.astype(np.float64)
    for _ in range(n):
        center = [rng.uniform(0.2 * e, 0.8 * e) for e in dims]
        radii = [max(1.0, radius_scale * e * rng.uniform(0.7, 1.3)) for e in dims]
        dist2 = sum(((grids[k] - center[k]) / radii[k]) ** 2 for k in range(3))
        out += brightness * np.exp(-dist2)
    return out


def synth_volume(rng: Rng, dims, label: str, profile) -> Volume:
    vox = _background(rng.child("background"), dims)
    count_range = profile[label][:2]
    vox = _add_blobs(vox, rng.child("blobs"), count_range,
                     profile[label][2], profile[label][3])
    return Volume(np.clip(vox, 0.0, 255.0).astype(np.float32), "raw255")


def generate_synthetic_dataset(out_dir, n_per_class: int,
                               dims: Sequence[int] = DEFAULT_SYNTH_DIMS,
                               seed: int = 0,
                               task: str = "detection") -> Tuple[Path, Path]:
    """Write a balanced MIAV dataset plus train/validation index files.

    The validation index lists the same samples as the training index:
    the generator exists for overfit smoke tests, where best-weights
    selection should track the training-set metric. Returns the two index
    paths.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"bad synthetic dims {dims}")
    if task == "detection":
        labels, profile = DETECTION_LABELS, _DETECTION_PROFILE
    elif task == "severity":
        labels, profile = SEVERITY_LABELS, _SEVERITY_PROFILE
    else:
        raise ValueError(f"task must be 'detection' or 'severity', got {task!r}")
    root = Path(out_dir)
    rng = Rng(seed)
    entries = []
    for label in labels:
        class_dir = root / "volumes" / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            vol = synth_volume(rng.child(f"{label}/{i}"), dims, label, profile)
            rel = Path("volumes") / label / f"{label}_{i:03d}.miav"
            write_miav(vol, root / rel)
            entries.append((rel.as_posix(), label))
    train_path = root / "train.tsv"
    val_path = root / "validation.tsv"
    write_index(train_path, entries)
    write_index(val_path, entries)
    return train_path, val_path
