"""Shared builders and the finite-difference harness used by several suites."""

from __future__ import annotations

import zlib

import numpy as np

from voxcnn import layers, losses
from voxcnn.model import ConvBlockSpec, Model, ModelSpec
from voxcnn.rng import Rng


def mini_spec(variant="detection", blocks=((3, 0.01, True, True), (4, 0.05, True, True)),
              fc=(8, 6), classes=2, dims=(8, 8, 8), dropout=0.5):
    return ModelSpec(variant,
                     tuple(ConvBlockSpec(*b) for b in blocks),
                     tuple(fc), classes, tuple(dims), dropout)


def mini_model(seed=0, dtype=np.float32, **kwargs):
    return Model(mini_spec(**kwargs), Rng(seed), dtype=dtype)


def random_volume(seed, shape=(6, 16, 16), lo=0.0, hi=255.0):
    """A raw-255 float32 volume with reproducible contents."""
    return Rng(seed).uniform(lo, hi, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# Finite-difference machinery
# ---------------------------------------------------------------------------

def fd_max_rel_error(f, target, analytic, eps, sample=None, seed=0,
                     refine_tol=None):
    """Central-difference check of ``analytic`` = d f / d target.

    ``target`` is perturbed in place; ``f()`` must recompute the scalar
    loss from current state. Checks every coordinate, or ``sample``
    random ones. Differences are normalized by the largest gradient
    magnitude involved.

    With ``refine_tol`` set, a coordinate whose error exceeds it is
    re-measured at eps/10 and eps/100 and the smallest error kept. A
    probe that happens to straddle a ReLU or pool-argmax kink poisons
    the quotient even though the subgradient is right; shrinking the
    step moves the probe off the kink, while a genuinely wrong analytic
    value keeps failing at every step size.
    """
    flat_t = target.reshape(-1)
    flat_a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = flat_t.size
    coords = np.arange(n)
    if sample is not None and sample < n:
        coords = np.random.default_rng(seed).choice(n, size=sample, replace=False)
    scale = max(float(np.abs(flat_a).max()), 1e-8)
    worst = 0.0
    for i in coords:
        orig = flat_t[i]

        def measure(step):
            flat_t[i] = orig + step
            fp = f()
            flat_t[i] = orig - step
            fm = f()
            flat_t[i] = orig
            fd = (fp - fm) / (2.0 * step)
            return abs(fd - float(flat_a[i])) / max(scale, abs(fd))

        err = measure(eps)
        if refine_tol is not None and err > refine_tol:
            err = min(err, measure(eps / 10), measure(eps / 100))
        worst = max(worst, err)
    return worst


def _probe_loss(y, probe):
    return float(np.sum(y.astype(np.float64) * probe))


def layer_gradient_checks(dtype, eps, instances, seed0=0, sample=48):
    """Yield (case name, max rel error) for every layer backward pass.

    Each instance draws fresh shapes and values; the scalar loss is the
    inner product of the layer output with a fixed random probe, so the
    upstream gradient is the probe itself.
    """
    results = {}

    def record(name, err):
        results[name] = max(results.get(name, 0.0), err)

    for inst in range(instances):
        nr = np.random.default_rng(seed0 + 1000 * inst)
        n = int(nr.integers(1, 3))
        cin = int(nr.integers(1, 4))
        cout = int(nr.integers(1, 4))
        d, h, w = (int(nr.integers(2, 5)) for _ in range(3))

        # conv3d: gradients w.r.t. input, kernel, bias (L2 factors zero;
        # the penalty fold has its own exact test)
        conv = layers.Conv3d(cin, cout, Rng(seed0 + inst), l2_weight_factor=0.0,
                             l2_bias_factor=0.0, dtype=dtype)
        x = nr.normal(size=(n, cin, d, h, w)).astype(dtype)
        probe = nr.normal(size=(n, cout, d, h, w))
        _, state = conv.forward(x)
        gx, gw, gb = conv.backward(probe.astype(dtype), state)
        f = lambda: _probe_loss(conv.forward(x)[0], probe)
        record("conv3d.x", fd_max_rel_error(f, x, gx, eps, sample, inst))
        record("conv3d.w", fd_max_rel_error(f, conv.weight, gw, eps, sample, inst))
        record("conv3d.b", fd_max_rel_error(f, conv.bias, gb, eps, sample, inst))

        # maxpool: shuffled lattice with value gaps of 5*eps, so a +-eps
        # probe can never flip a window argmax (FD is meaningless at ties)
        dp, hp, wp = d * 2, h * 2, w * 2
        total = n * cin * dp * hp * wp
        vals = (nr.permutation(total) - total / 2) * (5.0 * eps)
        x = vals.reshape(n, cin, dp, hp, wp).astype(dtype)
        probe = nr.normal(size=(n, cin, dp // 2, hp // 2, wp // 2))
        _, st = layers.maxpool3d_forward(x)
        gx = layers.maxpool3d_backward(probe.astype(dtype), st)
        f = lambda: _probe_loss(layers.maxpool3d_forward(x)[0], probe)
        record("maxpool3d.x", fd_max_rel_error(f, x, gx, eps, sample, inst))

        # batchnorm, training mode; running stats reset inside f so the
        # repeated forwards stay side-effect free
        bn = layers.BatchNorm3d(cin, dtype=dtype)
        bn.gamma[...] = nr.normal(1.0, 0.2, size=cin).astype(dtype)
        bn.beta[...] = nr.normal(0.0, 0.2, size=cin).astype(dtype)
        x = nr.normal(size=(2, cin, d, h, w)).astype(dtype)
        probe = nr.normal(size=x.shape)
        rm, rv = bn.running_mean.copy(), bn.running_var.copy()

        def bn_loss():
            bn.running_mean[...] = rm
            bn.running_var[...] = rv
            return _probe_loss(bn.forward(x, training=True)[0], probe)

        _, st = bn.forward(x, training=True)
        gx, ggamma, gbeta = bn.backward(probe.astype(dtype), st)
        record("batchnorm.x", fd_max_rel_error(bn_loss, x, gx, eps, sample, inst))
        record("batchnorm.gamma", fd_max_rel_error(bn_loss, bn.gamma, ggamma, eps, sample, inst))
        record("batchnorm.beta", fd_max_rel_error(bn_loss, bn.beta, gbeta, eps, sample, inst))

        # dropout with a replayed mask
        x = nr.normal(size=(n, cin, d, h, w)).astype(dtype)
        probe = nr.normal(size=x.shape)
        mask_seed = seed0 + 7 * inst
        _, st = layers.dropout_forward(x, 0.5, Rng(mask_seed), training=True)
        gx = layers.dropout_backward(probe.astype(dtype), st)
        f = lambda: _probe_loss(
            layers.dropout_forward(x, 0.5, Rng(mask_seed), training=True)[0], probe)
        record("dropout.x", fd_max_rel_error(f, x, gx, eps, sample, inst))

        # relu away from the kink
        x = nr.normal(size=(n, cin, d, h, w)).astype(dtype)
        x += np.sign(x) * np.asarray(0.2, dtype=dtype)
        probe = nr.normal(size=x.shape)
        _, mask = layers.relu_forward(x)
        gx = layers.relu_backward(probe.astype(dtype), mask)
        f = lambda: _probe_loss(layers.relu_forward(x)[0], probe)
        record("relu.x", fd_max_rel_error(f, x, gx, eps, sample, inst))

        # global average pool
        x = nr.normal(size=(n, cin, d, h, w)).astype(dtype)
        probe = nr.normal(size=(n, cin))
        _, shape = layers.global_avg_pool3d_forward(x)
        gx = layers.global_avg_pool3d_backward(probe.astype(dtype), shape)
        f = lambda: _probe_loss(layers.global_avg_pool3d_forward(x)[0], probe)
        record("gap.x", fd_max_rel_error(f, x, gx, eps, sample, inst))

        # dense
        fi, fo = int(nr.integers(2, 6)), int(nr.integers(2, 6))
        dense = layers.Dense(fi, fo, Rng(seed0 + inst + 1), dtype=dtype)
        x = nr.normal(size=(n, fi)).astype(dtype)
        probe = nr.normal(size=(n, fo))
        _, st = dense.forward(x)
        gx, gw, gb = dense.backward(probe.astype(dtype), st)
        f = lambda: _probe_loss(dense.forward(x)[0], probe)
        record("dense.x", fd_max_rel_error(f, x, gx, eps, sample, inst))
        record("dense.w", fd_max_rel_error(f, dense.weight, gw, eps, sample, inst))
        record("dense.b", fd_max_rel_error(f, dense.bias, gb, eps, sample, inst))

        # fused softmax + weighted cross-entropy gradient w.r.t. logits
        k = int(nr.integers(2, 5))
        logits = nr.normal(size=(4, k)).astype(dtype)
        labels = losses.onehot(nr.integers(0, k, size=4), k)
        weights = nr.uniform(0.5, 2.0, size=k)
        _, grad = losses.weighted_cce(layers.softmax(logits), labels, weights)
        f = lambda: losses.weighted_cce(layers.softmax(logits), labels, weights)[0]
        record("softmax_cce.logits", fd_max_rel_error(f, logits, grad, eps, None, inst))

    return results


def model_gradient_check(dtype, eps, sample_per_param=8, seed=0,
                         dims=(16, 16, 16)):
    """End-to-end check: total loss gradient vs central differences.

    Miniature two-block spec at the given dims; returns the worst relative
    error over sampled coordinates of every learnable parameter.

    Two numerical traps are sidestepped deliberately. Biases start at
    zero, and a dropout mask that blanks a whole sample row then parks
    the next ReLU exactly on its kink, where one-sided slopes make finite
    differences disagree with the (correct) subgradient; jittering the
    biases keeps the check on differentiable ground. And the float32 loss
    surface is too rough for central differences at any usable step (the
    surface wobble exceeds the secant signal well before ReLU and pool
    argmax flips stop polluting larger steps), so the difference quotient
    always runs on a float64 twin holding bit-identical parameter values;
    the gradients under test are still the ones the `dtype` model computes.
    Remaining isolated kink straddles at the base step are resolved by the
    per-coordinate step refinement in :func:`fd_max_rel_error`.
    """
    spec = mini_spec(blocks=((3, 0.01, True, True), (4, 0.05, True, True)),
                     fc=(8, 6), classes=2, dims=dims)
    model = Model(spec, Rng(seed), dtype=dtype)
    nr = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            off = nr.uniform(0.1, 0.3, size=p.shape) * nr.choice([-1.0, 1.0], size=p.shape)
            p += off.astype(dtype)
    x = nr.uniform(0.0, 1.0, size=(2, 1) + tuple(dims)).astype(dtype)
    y = losses.onehot(np.array([0, 1]), 2)
    weights = np.array([1.3, 0.8])
    fwd_rng = Rng(seed + 99)

    twin = Model(spec, Rng(seed), dtype=np.float64)
    twin_params = twin.parameters()
    for name, p in model.parameters().items():
        twin_params[name][...] = p.astype(np.float64)
    x64 = x.astype(np.float64)

    def total():
        probs = twin.forward(x64, training=True, rng=fwd_rng)
        cce, _ = losses.weighted_cce(probs, y, weights)
        return cce + twin.l2_penalty()

    probs = model.forward(x, training=True, rng=fwd_rng)
    _, grad_logits = losses.weighted_cce(probs, y, weights)
    grads = model.backward(grad_logits)
    worst = 0.0
    for name, param in twin_params.items():
        err = fd_max_rel_error(total, param, grads[name], eps,
                               sample=sample_per_param,
                               seed=zlib.crc32(name.encode()),
                               refine_tol=1e-6)
        worst = max(worst, err)
    return worst
