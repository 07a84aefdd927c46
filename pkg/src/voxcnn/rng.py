"""Seedable deterministic random source with derivable child streams."""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Deterministic random stream backed by the Philox counter generator.

    Philox is counter-based with a 2**256 period and a mathematically fixed
    output function, so sequences for a given key never change across library
    versions. Normal variates come from the generator's ziggurat sampler;
    this choice is frozen because augmentation golden values depend on it.

    Child streams are derived by hashing ``(parent key, label)``, so they are
    independent of how many draws the parent has already made. One stream per
    owner: share work across threads by handing each worker its own child.
    """

    def __init__(self, seed: int, _key: bytes | None = None):
        self.seed = int(seed)
        if _key is None:
            _key = hashlib.sha256(b"voxcnn-rng:" + str(self.seed).encode("ascii")).digest()[:16]
        self._key = _key
        self._gen = np.random.Generator(np.random.Philox(key=np.frombuffer(_key, dtype=np.uint64)))

    def child(self, label: str) -> "Rng":
        """Derive an independent stream identified by ``label``."""
        key = hashlib.sha256(self._key + b"/" + label.encode("utf-8")).digest()[:16]
        return Rng(self.seed, _key=key)

    def uniform(self, lo: float, hi: float, size=None):
        """Sample from [lo, hi). Degenerate lo == hi returns lo exactly."""
        if lo > hi:
            raise ValueError(f"uniform bounds out of order: lo={lo} > hi={hi}")
        out = self._gen.uniform(lo, hi, size=size)
        return float(out) if size is None else out

    def normal(self, mean: float, std: float, size=None):
        """Gaussian sample; std == 0 returns mean exactly."""
        if std < 0:
            raise ValueError(f"negative standard deviation: {std}")
        out = self._gen.normal(mean, std, size=size)
        return float(out) if size is None else out

    def integers(self, lo: int, hi: int, size=None):
        """Integer sample from [lo, hi), numpy half-open semantics."""
        if lo >= hi:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        out = self._gen.integers(lo, hi, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key.hex()})"
