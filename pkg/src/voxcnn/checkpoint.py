"""MIAC checkpoint files: named float32 arrays in a little-endian container.

Layout: magic ``MIAC``, format version u32, variant tag u8 (0 detection,
1 severity), entry count u32, then per entry: name length u16 + UTF-8
name, rank u8, one u32 extent per axis, raw little-endian float32 payload.

Three name namespaces share the container:

* model parameters and running statistics (``block1.conv.weight``...),
* ``meta.*`` arrays encoding the architecture so a model can be rebuilt
  from the file alone,
* ``optim.*`` arrays for optimizer state (optional, ignored on load into
  a bare model).

Round trips are bit-exact for every payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ConvBlockSpec, Model, ModelSpec
from .rng import Rng
from .tensor import DTYPE

MAGIC = b"MIAC"
VERSION = 1
VARIANT_TAGS = {"detection": 0, "severity": 1}
TAG_VARIANTS = {v: k for k, v in VARIANT_TAGS.items()}
# meta floats are round-tripped through float32; architecture numbers are
# short decimals, so 6 decimal places recover them exactly
_META_DECIMALS = 6


def _meta_entries(spec: ModelSpec) -> Dict[str, np.ndarray]:
    f32 = lambda xs: np.asarray(xs, dtype=np.float32)
    return {
        "meta.input_dims": f32(spec.input_dims),
        "meta.conv_filters": f32([b.filters for b in spec.conv_blocks]),
        "meta.conv_l2": f32([b.l2_weight_factor for b in spec.conv_blocks]),
        "meta.conv_batchnorm": f32([float(b.has_batchnorm) for b in spec.conv_blocks]),
        "meta.conv_dropout": f32([float(b.has_dropout) for b in spec.conv_blocks]),
        "meta.fc_neurons": f32(spec.fc_blocks),
        "meta.output_classes": f32([spec.output_classes]),
        "meta.dropout_rate": f32([spec.dropout_rate]),
    }


def _spec_from_meta(variant: str, entries: Dict[str, np.ndarray]) -> ModelSpec:
    def take(name):
        if name not in entries:
            raise ValueError(f"checkpoint is missing required entry {name!r}")
        return entries.pop(name)

    dims = tuple(int(x) for x in take("meta.input_dims"))
    filters = [int(x) for x in take("meta.conv_filters")]
    l2 = [round(float(x), _META_DECIMALS) for x in take("meta.conv_l2")]
    has_bn = [bool(int(x)) for x in take("meta.conv_batchnorm")]
    has_do = [bool(int(x)) for x in take("meta.conv_dropout")]
    fc = tuple(int(x) for x in take("meta.fc_neurons"))
    classes = int(take("meta.output_classes")[0])
    rate = round(float(take("meta.dropout_rate")[0]), _META_DECIMALS)
    if not len(filters) == len(l2) == len(has_bn) == len(has_do):
        raise ValueError("checkpoint meta arrays disagree on the conv block count")
    blocks = tuple(ConvBlockSpec(f, w, bn, do)
                   for f, w, bn, do in zip(filters, l2, has_bn, has_do))
    return ModelSpec(variant, blocks, fc, classes, dims, rate)


def save_checkpoint(path, model: Model,
                    extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write the model (and optional ``optim.*`` arrays) to ``path``."""
    entries = dict(model.persistent_arrays())
    entries.update(_meta_entries(model.spec))
    if extra:
        for name in extra:
            if not name.startswith("optim."):
                raise ValueError(f"extra checkpoint entries must be namespaced "
                                 f"'optim.*', got {name!r}")
        entries.update(extra)
    chunks = [MAGIC,
              struct.pack("<IBI", VERSION, VARIANT_TAGS[model.spec.variant], len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float32)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError(f"entry rank too large: {name!r}")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Tuple[str, Dict[str, np.ndarray]]:
    """Read a MIAC file; returns (variant name, entries by name)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a MIAC checkpoint file")
    off = 4

    def need(n: int, what: str):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint (while reading {what})")
        part = blob[off:off + n]
        off += n
        return part

    version, tag, count = struct.unpack("<IBI", need(9, "header"))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if tag not in TAG_VARIANTS:
        raise ValueError(f"{path}: unknown model variant tag {tag}")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "entry name length"))
        name = need(name_len, "entry name").decode("utf-8")
        if name in entries:
            raise ValueError(f"{path}: duplicate checkpoint entry {name!r}")
        (rank,) = struct.unpack("<B", need(1, "entry rank"))
        shape = struct.unpack(f"<{rank}I", need(4 * rank, f"extents of {name!r}"))
        n_elem = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = need(4 * n_elem, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after last entry")
    return TAG_VARIANTS[tag], entries


def model_from_checkpoint(path, dtype=DTYPE) -> Tuple[Model, Dict[str, np.ndarray]]:
    """Rebuild the model a checkpoint describes; returns (model, optim state)."""
    variant, entries = load_checkpoint(path)
    spec = _spec_from_meta(variant, entries)
    optim_state = {k: entries.pop(k) for k in list(entries) if k.startswith("optim.")}
    model = Model(spec, Rng(0), dtype)  # init draws are discarded by restore
    arrays = model.persistent_arrays()
    if set(entries) != set(arrays):
        extra = sorted(set(entries) - set(arrays))
        missing = sorted(set(arrays) - set(entries))
        raise ValueError(f"{path}: parameter set mismatch "
                         f"(unexpected {extra}, missing {missing})")
    for name, arr in arrays.items():
        if entries[name].shape != arr.shape:
            raise ValueError(f"{path}: entry {name!r} has shape {entries[name].shape}, "
                             f"model expects {arr.shape}")
        arr[...] = entries[name].astype(dtype)
    return model, optim_state
