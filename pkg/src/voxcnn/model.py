"""Network assembly for the detection and severity classifiers.

Both variants share one skeleton: a stack of convolutional blocks, global
average pooling, two fully connected blocks, and a softmax output layer.
A convolutional block runs conv -> ReLU -> maxpool, then optionally batch
normalization and dropout (the detection variant enables both in every
block, the severity variant in none). Fully connected blocks run
dense -> ReLU -> dropout.

Parameters are addressed by stable dotted names (``block1.conv.weight``,
``fc2.bias``, ``out.weight``...) so checkpoints and optimizer state can
refer to them across process boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers
from .rng import Rng
from .tensor import DTYPE

DETECTION_CLASSES = 2
SEVERITY_CLASSES = 4
DEFAULT_INPUT_DIMS = (64, 224, 224)  # (D, H, W)
FC_NEURONS = (1024, 512)
DROPOUT_RATE = 0.5

DETECTION_FILTERS = (64, 64, 128, 128, 256, 256)
DETECTION_L2 = (0.01, 0.01, 0.05, 0.05, 0.05, 0.05)
SEVERITY_FILTERS = (64, 64, 128, 256)
SEVERITY_L2 = (0.05, 0.05, 0.10, 0.10)


@dataclass(frozen=True)
class ConvBlockSpec:
    filters: int
    l2_weight_factor: float
    has_batchnorm: bool
    has_dropout: bool


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one network variant.

    The two production variants come from :func:`detection_spec` and
    :func:`severity_spec`; tests build miniature specs with fewer blocks
    and small input dims so desk-scale checks stay cheap.
    """

    variant: str
    conv_blocks: Tuple[ConvBlockSpec, ...]
    fc_blocks: Tuple[int, ...]
    output_classes: int
    input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS
    dropout_rate: float = DROPOUT_RATE

    def __post_init__(self):
        if self.variant not in ("detection", "severity"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        if not self.conv_blocks:
            raise ValueError("model needs at least one conv block")
        if self.output_classes < 2:
            raise ValueError("output_classes must be >= 2")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"bad input dims {self.input_dims}")
        for b in self.conv_blocks:
            if b.filters < 1:
                raise ValueError(f"conv block filter count must be >= 1, got {b.filters}")
            if b.l2_weight_factor < 0:
                raise ValueError("L2 weight factor must be nonnegative")
        for n in self.fc_blocks:
            if n < 1:
                raise ValueError(f"fc neuron count must be >= 1, got {n}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        self.pool_trail()  # raises if some extent collapses below 1

    def pool_trail(self) -> List[Tuple[int, int, int]]:
        """Spatial dims after each pooling step, starting at input_dims."""
        trail = [tuple(self.input_dims)]
        d, h, w = self.input_dims
        for i in range(len(self.conv_blocks)):
            if min(d, h, w) < 2:
                raise ValueError(
                    f"pooling trail collapses below 1 voxel at block {i + 1}: "
                    f"extent {(d, h, w)} cannot be pooled")
            d, h, w = d // 2, h // 2, w // 2
            trail.append((d, h, w))
        return trail


def detection_spec(input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS) -> ModelSpec:
    blocks = tuple(ConvBlockSpec(f, l2, True, True)
                   for f, l2 in zip(DETECTION_FILTERS, DETECTION_L2))
    return ModelSpec("detection", blocks, FC_NEURONS, DETECTION_CLASSES, tuple(input_dims))


def severity_spec(input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS,
                  has_batchnorm: bool = False, has_dropout: bool = False) -> ModelSpec:
    """Severity variant; conv blocks carry no BN/dropout unless re-enabled."""
    blocks = tuple(ConvBlockSpec(f, l2, has_batchnorm, has_dropout)
                   for f, l2 in zip(SEVERITY_FILTERS, SEVERITY_L2))
    return ModelSpec("severity", blocks, FC_NEURONS, SEVERITY_CLASSES, tuple(input_dims))


@dataclass
class _ConvBlock:
    conv: layers.Conv3d
    bn: Optional[layers.BatchNorm3d]
    has_dropout: bool


@dataclass
class _ForwardCache:
    """Per-layer states recorded by one training-mode forward pass."""
    block_states: list = field(default_factory=list)
    gap_shape: tuple = None
    fc_states: list = field(default_factory=list)
    out_state: np.ndarray = None


class Model:
    """A built network: parameters plus forward/backward machinery."""

    def __init__(self, spec: ModelSpec, rng: Rng, dtype=DTYPE):
        self.spec = spec
        self.dtype = dtype
        self.training = False
        self._cache: Optional[_ForwardCache] = None
        init = rng.child("init")
        self.blocks: List[_ConvBlock] = []
        in_ch = 1
        for i, bs in enumerate(spec.conv_blocks, start=1):
            conv = layers.Conv3d(in_ch, bs.filters, init.child(f"block{i}"),
                                 l2_weight_factor=bs.l2_weight_factor, dtype=dtype)
            bn = layers.BatchNorm3d(bs.filters, dtype=dtype) if bs.has_batchnorm else None
            self.blocks.append(_ConvBlock(conv=conv, bn=bn, has_dropout=bs.has_dropout))
            in_ch = bs.filters
        self.fc: List[layers.Dense] = []
        fan = in_ch  # global average pooling keeps the channel count
        for j, n in enumerate(spec.fc_blocks, start=1):
            self.fc.append(layers.Dense(fan, n, init.child(f"fc{j}"), dtype=dtype))
            fan = n
        self.out = layers.Dense(fan, spec.output_classes, init.child("out"), dtype=dtype)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> Dict[str, np.ndarray]:
        """Learnable parameters by name, as live views (optimizer mutates them)."""
        params: Dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.blocks, start=1):
            params[f"block{i}.conv.weight"] = blk.conv.weight
            params[f"block{i}.conv.bias"] = blk.conv.bias
            if blk.bn is not None:
                params[f"block{i}.bn.gamma"] = blk.bn.gamma
                params[f"block{i}.bn.beta"] = blk.bn.beta
        for j, fc in enumerate(self.fc, start=1):
            params[f"fc{j}.weight"] = fc.weight
            params[f"fc{j}.bias"] = fc.bias
        params["out.weight"] = self.out.weight
        params["out.bias"] = self.out.bias
        return params

    def persistent_arrays(self) -> Dict[str, np.ndarray]:
        """Everything a checkpoint must carry: parameters plus running stats."""
        arrays = self.parameters()
        for i, blk in enumerate(self.blocks, start=1):
            if blk.bn is not None:
                arrays[f"block{i}.bn.running_mean"] = blk.bn.running_mean
                arrays[f"block{i}.bn.running_var"] = blk.bn.running_var
        return arrays

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.parameters().values())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.persistent_arrays().items()}

    def restore(self, snap: Dict[str, np.ndarray]) -> None:
        arrays = self.persistent_arrays()
        if set(snap) != set(arrays):
            raise ValueError("snapshot does not match this model's parameter set")
        for name, arr in arrays.items():
            arr[...] = snap[name]

    def l2_penalty(self) -> float:
        return sum(blk.conv.l2_penalty() for blk in self.blocks)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False,
                rng: Optional[Rng] = None) -> np.ndarray:
        """Run the network; returns class probabilities of shape (N, K).

        Training mode applies dropout (needs ``rng``) and records the layer
        states consumed by the next :meth:`backward` call. The pre-softmax
        logits of the last forward are kept in ``self.last_logits`` so the
        loss can form its fused gradient.
        """
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected batch shape (N, 1, D, H, W), got {x.shape}")
        if tuple(x.shape[2:]) != tuple(self.spec.input_dims):
            raise ValueError(
                f"batch dims {tuple(x.shape[2:])} do not match model input dims "
                f"{tuple(self.spec.input_dims)}")
        uses_dropout = self.spec.dropout_rate > 0 and (
            bool(self.fc) or any(b.has_dropout for b in self.blocks))
        if training and uses_dropout and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        self.training = training
        cache = _ForwardCache() if training else None
        h = x.astype(self.dtype, copy=False)
        for i, blk in enumerate(self.blocks, start=1):
            h, conv_st = blk.conv.forward(h)
            h, relu_st = layers.relu_forward(h)
            h, pool_st = layers.maxpool3d_forward(h)
            bn_st = None
            if blk.bn is not None:
                h, bn_st = blk.bn.forward(h, training)
            drop_st = None
            if blk.has_dropout:
                h, drop_st = layers.dropout_forward(
                    h, self.spec.dropout_rate,
                    rng.child(f"block{i}") if rng is not None else None, training)
            if training:
                cache.block_states.append((conv_st, relu_st, pool_st, bn_st, drop_st))
        h, gap_shape = layers.global_avg_pool3d_forward(h)
        if training:
            cache.gap_shape = gap_shape
        for j, fc in enumerate(self.fc, start=1):
            h, fc_st = fc.forward(h)
            h, relu_st = layers.relu_forward(h)
            h, drop_st = layers.dropout_forward(
                h, self.spec.dropout_rate,
                rng.child(f"fc{j}") if rng is not None else None, training)
            if training:
                cache.fc_states.append((fc_st, relu_st, drop_st))
        logits, out_st = self.out.forward(h)
        if training:
            cache.out_state = out_st
            self._cache = cache
        self.last_logits = logits
        return layers.softmax(logits)

    def backward(self, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Backpropagate a gradient w.r.t. the logits; returns grads by name.

        Consumes the state of the last training-mode forward. Conv L2
        contributions are folded in by the conv layers themselves.
        """
        if self._cache is None:
            raise ValueError("backward requires a preceding training-mode forward")
        cache, self._cache = self._cache, None
        grads: Dict[str, np.ndarray] = {}
        g, gw, gb = self.out.backward(grad_logits, cache.out_state)
        grads["out.weight"] = gw
        grads["out.bias"] = gb
        for j in range(len(self.fc), 0, -1):
            fc_st, relu_st, drop_st = cache.fc_states[j - 1]
            g = layers.dropout_backward(g, drop_st)
            g = layers.relu_backward(g, relu_st)
            g, gw, gb = self.fc[j - 1].backward(g, fc_st)
            grads[f"fc{j}.weight"] = gw
            grads[f"fc{j}.bias"] = gb
        g = layers.global_avg_pool3d_backward(g, cache.gap_shape)
        for i in range(len(self.blocks), 0, -1):
            blk = self.blocks[i - 1]
            conv_st, relu_st, pool_st, bn_st, drop_st = cache.block_states[i - 1]
            if blk.has_dropout:
                g = layers.dropout_backward(g, drop_st)
            if blk.bn is not None:
                g, ggamma, gbeta = blk.bn.backward(g, bn_st)
                grads[f"block{i}.bn.gamma"] = ggamma
                grads[f"block{i}.bn.beta"] = gbeta
            g = layers.maxpool3d_backward(g, pool_st)
            g = layers.relu_backward(g, relu_st)
            g, gw, gb = blk.conv.backward(g, conv_st)
            grads[f"block{i}.conv.weight"] = gw
            grads[f"block{i}.conv.bias"] = gb
        return grads


def build_detection_model(rng: Rng, input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS,
                          dtype=DTYPE) -> Model:
    return Model(detection_spec(input_dims), rng, dtype)


def build_severity_model(rng: Rng, input_dims: Tuple[int, int, int] = DEFAULT_INPUT_DIMS,
                         dtype=DTYPE) -> Model:
    return Model(severity_spec(input_dims), rng, dtype)
