"""Training configuration: flat `key = value` files and task defaults.

Detection defaults: RAdam, batch 5, early-stop patience 80, epoch cap
500, augmentation on. Severity defaults: SGD with momentum 0.9, patience
50, cap 1000, augmentation on. Both share initial lr 1e-4 and the
plateau scheduler (factor 0.5, patience 20).

Unknown keys are rejected so a misspelled hyperparameter fails loudly
instead of silently training with a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

from .model import (DEFAULT_INPUT_DIMS, DETECTION_FILTERS, DETECTION_L2,
                    FC_NEURONS, SEVERITY_FILTERS, SEVERITY_L2, ConvBlockSpec,
                    ModelSpec)

TASK_DEFAULTS = {
    "detection": dict(optimizer="radam", early_stop_patience=80, max_epochs=500,
                      augment=True),
    "severity": dict(optimizer="sgd_momentum", early_stop_patience=50,
                     max_epochs=1000, augment=True),
}


@dataclass
class TrainConfig:
    task: str = "detection"
    seed: int = 0
    batch_size: int = 5
    optimizer: str = "radam"
    initial_lr: float = 1e-4
    scheduler_factor: float = 0.5
    scheduler_patience: int = 20
    early_stop_patience: int = 80
    max_epochs: int = 500
    augment: bool = True
    class_weights: str = "balanced"
    input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS
    conv_filters: Optional[Tuple[int, ...]] = None
    conv_l2: Optional[Tuple[float, ...]] = None
    conv_batchnorm: Optional[Tuple[bool, ...]] = None
    conv_dropout: Optional[Tuple[bool, ...]] = None
    fc_neurons: Optional[Tuple[int, ...]] = None
    aug_gate_rate: float = 0.5
    aug_gate_geometry: bool = False

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"task must be one of {sorted(TASK_DEFAULTS)}, "
                             f"got {self.task!r}")
        if self.optimizer not in ("radam", "sgd_momentum"):
            raise ValueError(f"optimizer must be 'radam' or 'sgd_momentum', "
                             f"got {self.optimizer!r}")
        if self.class_weights not in ("balanced", "none"):
            raise ValueError(f"class_weights must be 'balanced' or 'none', "
                             f"got {self.class_weights!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"bad input_dims {self.input_dims}")

    def model_spec(self) -> ModelSpec:
        """ModelSpec for this run: task defaults with any explicit overrides."""
        if self.task == "detection":
            def_filters, def_l2 = DETECTION_FILTERS, DETECTION_L2
            def_bn = def_do = True
            classes = 2
        else:
            def_filters, def_l2 = SEVERITY_FILTERS, SEVERITY_L2
            def_bn = def_do = False
            classes = 4
        filters = self.conv_filters if self.conv_filters is not None else def_filters
        if self.conv_l2 is not None:
            l2 = self.conv_l2
        elif len(filters) == len(def_filters):
            l2 = def_l2
        else:
            raise ValueError("custom conv_filters needs a matching conv_l2 list")
        bn = self._flags(self.conv_batchnorm, len(filters), def_bn, "conv_batchnorm")
        do = self._flags(self.conv_dropout, len(filters), def_do, "conv_dropout")
        if len(l2) != len(filters):
            raise ValueError(f"conv_l2 has {len(l2)} entries for "
                             f"{len(filters)} conv blocks")
        blocks = tuple(ConvBlockSpec(f, w, b, d)
                       for f, w, b, d in zip(filters, l2, bn, do))
        fc = self.fc_neurons if self.fc_neurons is not None else FC_NEURONS
        return ModelSpec(self.task, blocks, tuple(fc), classes,
                         tuple(self.input_dims))

    @staticmethod
    def _flags(value, n: int, default: bool, key: str) -> Tuple[bool, ...]:
        if value is None:
            return (default,) * n
        if len(value) == 1:
            return (value[0],) * n
        if len(value) != n:
            raise ValueError(f"{key} has {len(value)} entries for {n} conv blocks")
        return tuple(value)


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: expected an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: expected a number, got {raw!r}") from None


def _parse_dims(key: str, raw: str) -> Tuple[int, int, int]:
    parts = raw.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"config key {key!r}: expected DxHxW, got {raw!r}")
    return tuple(_parse_int(key, p.strip()) for p in parts)


def _parse_list(key: str, raw: str, one):
    return tuple(one(key, p.strip()) for p in raw.split(",") if p.strip() != "")


_PARSERS = {
    "task": lambda k, v: v,
    "seed": _parse_int,
    "batch_size": _parse_int,
    "optimizer": lambda k, v: v,
    "initial_lr": _parse_float,
    "scheduler_factor": _parse_float,
    "scheduler_patience": _parse_int,
    "early_stop_patience": _parse_int,
    "max_epochs": _parse_int,
    "augment": _parse_bool,
    "class_weights": lambda k, v: v,
    "input_dims": _parse_dims,
    "conv_filters": lambda k, v: _parse_list(k, v, _parse_int),
    "conv_l2": lambda k, v: _parse_list(k, v, _parse_float),
    "conv_batchnorm": lambda k, v: _parse_list(k, v, _parse_bool),
    "conv_dropout": lambda k, v: _parse_list(k, v, _parse_bool),
    "fc_neurons": lambda k, v: _parse_list(k, v, _parse_int),
    "aug_gate_rate": _parse_float,
    "aug_gate_geometry": _parse_bool,
}


def parse_config_text(text: str) -> TrainConfig:
    """Parse flat `key = value` lines; '#' starts a comment line."""
    raw = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _PARSERS:
            raise ValueError(f"config line {ln}: unknown config key {key!r}")
        if key in raw:
            raise ValueError(f"config line {ln}: duplicate config key {key!r}")
        raw[key] = _PARSERS[key](key, value)
    task = raw.get("task", "detection")
    if task not in TASK_DEFAULTS:
        raise ValueError(f"task must be one of {sorted(TASK_DEFAULTS)}, got {task!r}")
    values = dict(TASK_DEFAULTS[task], task=task)
    allowed = {f.name for f in fields(TrainConfig)}
    for key, parsed in raw.items():
        assert key in allowed  # _PARSERS mirrors the dataclass fields
        values[key] = parsed
    return TrainConfig(**values)


def parse_config_file(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
