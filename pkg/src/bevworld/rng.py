"""Counter-based random number generation.

Every draw is keyed by (seed, counter) through a fresh Philox generator, so a
given pair always yields the same samples regardless of platform or call
history. The counter advances by one per draw and never repeats within a run.
Substreams for independent subsystems (world layout, agent motion, weight
init, ...) are derived by hashing (seed, tag) into a new seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox4x64-keyed"


def derive_seed(seed: int, tag: str) -> int:
    """Hash (seed, tag) into a new 64-bit seed. Stable across platforms."""
    digest = hashlib.blake2b(f"{seed}/{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngState:
    """Deterministic stream of draws identified by (seed, counter).

    The state is mutable: each draw consumes one counter value. Two states
    constructed with the same seed produce identical streams.
    """

    seed: int
    counter: int = 0
    algorithm: str = field(default=ALGORITHM)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.counter], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        self.counter += 1
        return gen

    def normal(self, shape=()) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def spawn(self, tag: str) -> "RngState":
        """Independent substream; does not consume this state's counter."""
        return RngState(derive_seed(self.seed, tag))


def sample_normal(rng: RngState, shape):
    """Standard-normal draws wrapped as a non-differentiable graph constant."""
    from .autodiff import Value

    return Value(rng.normal(tuple(shape)))
