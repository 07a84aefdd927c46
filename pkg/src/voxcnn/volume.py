"""Volume ingestion, resampling, and the MIAV raw-volume format.

A CT scan arrives as a directory of grayscale slice images (natural
numeric filename order) or as a MIAV file. Volumes carry an intensity
scale tag: ``raw255`` for the storage/augmentation range, ``normalized01``
for the network input range. MIAV files always hold raw255 data.

MIAV layout (little-endian): magic ``MIAV``, version u32 = 1, dtype tag
u8 (0 = float32), D/H/W as u32, then D*H*W raw float32 voxels.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

MIAV_MAGIC = b"MIAV"
MIAV_VERSION = 1
MIAV_DTYPE_F32 = 0
DEFAULT_TARGET_DIMS = (64, 224, 224)  # (D, H, W)

SLICE_EXTENSIONS = {".pgm", ".pbm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp",
                    ".tif", ".tiff"}

DETECTION_LABELS = ("covid", "non-covid")
SEVERITY_LABELS = ("mild", "moderate", "severe", "critical")


@dataclass
class Volume:
    """A (D, H, W) voxel block plus its intensity scale and origin id."""

    voxels: np.ndarray
    scale: str = "raw255"
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be (D, H, W) with positive extents, "
                             f"got shape {v.shape}")
        if self.scale not in ("raw255", "normalized01"):
            raise ValueError(f"unknown intensity scale {self.scale!r}")
        hi = 255.0 if self.scale == "raw255" else 1.0
        lo, top = float(v.min()), float(v.max())
        if lo < 0.0 or top > hi:
            raise ValueError(f"{self.scale} volume has values outside [0, {hi}]: "
                             f"[{lo}, {top}]")
        self.voxels = v

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def normalized(self) -> "Volume":
        """raw255 -> normalized01 network input scale."""
        if self.scale == "normalized01":
            return self
        return Volume(self.voxels / np.float32(255.0), "normalized01", self.source_id)


def natural_key(name: str):
    """Sort key where embedded integers compare numerically (2 < 10)."""
    parts = re.split(r"(\d+)", name)
    return tuple((0, int(p)) if p.isdigit() else (1, p.lower())
                 for p in parts if p != "")


def _decode_slice(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L"):
                arr = np.asarray(img, dtype=np.float64)
                peak = arr.max()
                scale = 255.0 / 65535.0 if peak > 255 else 1.0
                return (arr * scale).astype(np.float32)
            return np.asarray(img.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode slice image {path}: {exc}") from None


def load_slice_stack(dir_path) -> Volume:
    """Stack a directory of grayscale slice images along depth.

    Filenames order slices by natural numeric sort; all slices must share
    one height/width.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise ValueError(f"{root}: not a directory of slices")
    files = [f for f in root.iterdir()
             if f.is_file() and f.suffix.lower() in SLICE_EXTENSIONS]
    if not files:
        raise ValueError(f"{root}: no decodable slice images found")
    files.sort(key=lambda f: natural_key(f.name))
    slices = [_decode_slice(f) for f in files]
    first = slices[0].shape
    for f, s in zip(files, slices):
        if s.shape != first:
            raise ValueError(f"{root}: slice {f.name} is {s.shape}, "
                             f"others are {first} (mixed dimensions)")
    return Volume(np.clip(np.stack(slices, axis=0), 0.0, 255.0),
                  "raw255", root.name)


def resample_volume(vol: Volume, target: Sequence[int] = DEFAULT_TARGET_DIMS) -> Volume:
    """Separable cubic-spline resample to ``target`` (D, H, W).

    Axis j of the output samples the source at x = (j + 0.5) * (n/m) - 0.5
    (half-voxel alignment), with natural boundary conditions. Output is
    clamped back to the volume's intensity range.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"bad target dims {target}")
    arr = vol.voxels.astype(np.float64)
    for axis in range(3):
        n, m = arr.shape[axis], target[axis]
        if n == m:
            continue
        if n < 2:
            raise ValueError(f"cannot resample degenerate axis {axis} "
                             f"of extent {n}")
        coords = (np.arange(m, dtype=np.float64) + 0.5) * (n / m) - 0.5
        spline = CubicSpline(np.arange(n, dtype=np.float64), arr,
                             axis=axis, bc_type="natural")
        arr = spline(coords)
    hi = 255.0 if vol.scale == "raw255" else 1.0
    return Volume(np.clip(arr, 0.0, hi).astype(np.float32), vol.scale, vol.source_id)


# ---------------------------------------------------------------------------
# MIAV binary format
# ---------------------------------------------------------------------------

def write_miav(vol: Volume, path) -> None:
    if vol.scale != "raw255":
        raise ValueError("MIAV stores raw 0..255 volumes; write before normalizing")
    d, h, w = vol.dims
    header = MIAV_MAGIC + struct.pack("<IBIII", MIAV_VERSION, MIAV_DTYPE_F32, d, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(
        vol.voxels, dtype="<f4").tobytes())


def read_miav(path) -> Volume:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MIAV_MAGIC:
        raise ValueError(f"{path}: not a MIAV file")
    if len(blob) < 21:
        raise ValueError(f"{path}: truncated MIAV header")
    version, dtype_tag, d, h, w = struct.unpack("<IBIII", blob[4:21])
    if version != MIAV_VERSION:
        raise ValueError(f"{path}: unsupported MIAV version {version}")
    if dtype_tag != MIAV_DTYPE_F32:
        raise ValueError(f"{path}: unsupported MIAV dtype tag {dtype_tag}")
    if min(d, h, w) < 1:
        raise ValueError(f"{path}: nonpositive MIAV dims {(d, h, w)}")
    expected = 4 * d * h * w
    payload = blob[21:]
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated MIAV payload "
                         f"({len(payload)} bytes, header declares {expected})")
    if len(payload) > expected:
        raise ValueError(f"{path}: {len(payload) - expected} trailing bytes "
                         f"after MIAV payload")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).copy()
    return Volume(voxels, "raw255", Path(path).stem)


def write_pgm(image2d: np.ndarray, path) -> None:
    """Write one slice as a binary (P5) PGM, rounding to 8-bit."""
    img = np.asarray(image2d)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def load_sample(path) -> Volume:
    """Load one sample from either storage form (MIAV file or slice dir)."""
    p = Path(path)
    if p.is_dir():
        return load_slice_stack(p)
    if not p.is_file():
        raise ValueError(f"{p}: no such volume file or slice directory")
    return read_miav(p)


# ---------------------------------------------------------------------------
# Dataset indexes
# ---------------------------------------------------------------------------

@dataclass
class DatasetIndex:
    """Sample paths and labels for one split, bound to a label space."""

    samples: Tuple[Tuple[Path, str], ...]
    split: str
    label_space: Tuple[str, ...]

    def __post_init__(self):
        for _, label in self.samples:
            if label not in self.label_space:
                raise ValueError(f"label {label!r} outside space {self.label_space}")

    def __len__(self) -> int:
        return len(self.samples)

    def label_ints(self) -> np.ndarray:
        return np.asarray([self.label_space.index(lab) for _, lab in self.samples],
                          dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        ints = self.label_ints()
        return np.bincount(ints, minlength=len(self.label_space)).astype(np.int64)


def infer_label_space(labels) -> Tuple[str, ...]:
    present = set(labels)
    for space in (DETECTION_LABELS, SEVERITY_LABELS):
        if present <= set(space):
            return space
    raise ValueError(f"labels {sorted(present)} fit neither the detection space "
                     f"{DETECTION_LABELS} nor the severity space {SEVERITY_LABELS}")


def read_index(path, split: str = "train") -> DatasetIndex:
    """Parse a `path<TAB>label` index file; paths resolve against its parent."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read index {p}: {exc}") from None
    entries: List[Tuple[Path, str]] = []
    seen = set()
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ValueError(f"{p}:{ln}: expected 'path<TAB>label', got {line!r}")
        rel, label = parts
        if rel in seen:
            raise ValueError(f"{p}:{ln}: duplicate sample path {rel!r}")
        seen.add(rel)
        entries.append((p.parent / rel, label))
    if not entries:
        raise ValueError(f"{p}: index is empty")
    space = infer_label_space(lab for _, lab in entries)
    return DatasetIndex(tuple(entries), split, space)


def write_index(path, entries) -> None:
    """Write (relative-path, label) pairs as a `path<TAB>label` file."""
    lines = [f"{rel}\t{label}" for rel, label in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def preprocess_tree(in_dir, out_dir, dims: Sequence[int] = DEFAULT_TARGET_DIMS):
    """Resample every scan under ``in_dir`` and cache the results as MIAV.

    Expects the layout ``<split>/<class>/<scan_id>/<slice images>`` with
    splits named train/validation; writes ``<split>/<class>/<scan>.miav``
    plus one ``<split>.tsv`` index per split under ``out_dir``. Returns
    the written index paths.
    """
    src = Path(in_dir)
    dst = Path(out_dir)
    splits = [s for s in ("train", "validation") if (src / s).is_dir()]
    if not splits:
        raise ValueError(f"{src}: no train/ or validation/ split directories")
    index_paths = []
    labels_seen = set()
    for split in splits:
        entries = []
        class_dirs = sorted((src / split).iterdir(), key=lambda d: d.name)
        for class_dir in class_dirs:
            if not class_dir.is_dir():
                continue
            labels_seen.add(class_dir.name)
            infer_label_space(labels_seen)  # fail fast on an unknown class name
            scan_dirs = [d for d in class_dir.iterdir() if d.is_dir()]
            scan_dirs.sort(key=lambda d: natural_key(d.name))
            for scan in scan_dirs:
                vol = resample_volume(load_slice_stack(scan), dims)
                rel = Path(split) / class_dir.name / f"{scan.name}.miav"
                (dst / rel).parent.mkdir(parents=True, exist_ok=True)
                write_miav(vol, dst / rel)
                entries.append((rel.as_posix(), class_dir.name))
        if not entries:
            raise ValueError(f"{src / split}: split contains no scan directories")
        index_path = dst / f"{split}.tsv"
        write_index(index_path, entries)
        index_paths.append(index_path)
    return index_paths
