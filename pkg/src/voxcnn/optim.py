"""Optimizers and training-control state machines.

Two update rules (Rectified Adam, SGD with classical momentum) plus the
two per-epoch controllers: reduce-on-plateau learning-rate scheduling and
early stopping with best-weights snapshotting. Controllers maximize their
metric (validation macro F1) and treat only a strict increase as
improvement.
"""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np


def _check_aligned(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ValueError(f"parameter/gradient name sets differ: {sorted(missing)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(
                f"gradient shape {grads[name].shape} does not match parameter "
                f"{name!r} shape {p.shape}")


class RAdam:
    """Rectified Adam.

    Standard Adam moment estimates with the variance-rectification gate:
    while the approximated second-moment sample size rho_t stays <= 4 the
    step uses bias-corrected momentum only (no division by the second
    moment); once rho_t > 4 the adaptive step is scaled by the
    rectification term r_t. ``always_adaptive`` bypasses the gate (plain
    Adam); it exists for convergence sanity checks, not production use.
    """

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 always_adaptive: bool = False):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.always_adaptive = bool(always_adaptive)
        self.t = 0
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        _check_aligned(self.params, grads)
        self.t += 1
        t = self.t
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        rho_t = self.rho_inf - 2.0 * t * self.beta2 ** t / bc2
        adaptive = self.always_adaptive or rho_t > 4.0
        if adaptive and rho_t > 4.0:
            r = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf)
                          / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t))
        else:
            r = 1.0  # gate bypassed: plain Adam scaling
        for name, p in self.params.items():
            g = grads[name].astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            if adaptive:
                v_hat = np.sqrt(v / bc2)
                update = self.lr * r * m_hat / (v_hat + self.eps)
            else:
                update = self.lr * m_hat
            p -= update.astype(p.dtype)


class SgdMomentum:
    """Classical momentum: v <- mu*v - lr*g; p <- p + v."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-4,
                 momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        _check_aligned(self.params, grads)
        for name, p in self.params.items():
            vel = self.velocity[name]
            vel *= self.momentum
            vel -= self.lr * grads[name].astype(np.float64)
            p += vel.astype(p.dtype)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement.

    Maximizing controller: only a strictly greater metric counts. The
    stale counter resets both on improvement and when the reduction fires,
    so successive reductions need a full fresh window each.
    """

    def __init__(self, initial_lr: float, factor: float = 0.5, patience: int = 20):
        if initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {initial_lr}")
        if not 0 < factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.lr = float(initial_lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.best: Optional[float] = None
        self.stale = 0

    def update(self, metric: float) -> float:
        """Feed one epoch's metric; returns the lr now in effect."""
        if self.best is None or metric > self.best:
            self.best = float(metric)
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Stop training after ``patience`` stale epochs or at the epoch cap.

    Every improvement stores the supplied weights snapshot; the training
    loop restores ``best_weights`` after the stop signal. Detection runs
    use patience 80 / cap 500, severity runs patience 50 / cap 1000.
    """

    def __init__(self, patience: int, max_epochs: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        if max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {max_epochs}")
        self.patience = int(patience)
        self.max_epochs = int(max_epochs)
        self.epoch = 0
        self.best: Optional[float] = None
        self.best_epoch = 0
        self.best_weights = None
        self.stale = 0

    def update(self, metric: float, weights) -> bool:
        """Feed one epoch's metric and weights; True means stop now."""
        self.epoch += 1
        if self.best is None or metric > self.best:
            self.best = float(metric)
            self.best_epoch = self.epoch
            self.best_weights = weights
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience or self.epoch >= self.max_epochs
