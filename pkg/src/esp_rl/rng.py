"""Seeded random streams with named, independent children."""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """Thin wrapper around a PCG64 generator.

    ``child("name")`` derives a sub-stream from the root seed and the name
    only, so the order in which children are created does not matter.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._path + (zlib.crc32(name.encode()),))

    # convenience passthroughs
    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def dirichlet(self, alpha, size=None):
        return self.gen.dirichlet(alpha, size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self._path), "bit_generator": self.gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng.gen.bit_generator.state = state["bit_generator"]
        return rng
