"""Named, counter-based random streams.

Every consumer of randomness (data shuffling, noise draws, misalignment
jitter, metric seeds) owns a stream identified by a (name, seed) pair.  The
stream is backed by the Philox4x64 counter-based generator, keyed by a
SHA-256 digest of the name and seed, so the value at a given position is a
pure function of (name, seed, counter) and is identical on any platform.
Normal variates are produced by Box-Muller on the counter-based uniforms
rather than by a stateful ziggurat, which keeps draws reproducible and
order-independent across parallel consumers.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]

# Philox4x64 emits 4 uint64 words per counter increment.
_WORDS_PER_BLOCK = 4


def _derive_key(name: str, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{name}\x1f{int(seed)}".encode()).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


class RngStream:
    """Deterministic stream of uniforms / normals / integers.

    The ``counter`` attribute is the number of Philox blocks consumed so
    far; it fully captures the stream position and round-trips through
    checkpoints.
    """

    def __init__(self, name: str, seed: int, counter: int = 0):
        self.name = name
        self.seed = int(seed)
        self.counter = int(counter)
        self._key = _derive_key(name, seed)

    # -- core draws ------------------------------------------------------

    def _uniform_words(self, n: int) -> np.ndarray:
        """n doubles in [0, 1); advances the counter by whole blocks."""
        bg = np.random.Philox(counter=[self.counter, 0, 0, 0], key=self._key)
        out = np.random.Generator(bg).random(n, dtype=np.float64)
        self.counter += -(-n // _WORDS_PER_BLOCK)  # ceil division
        return out

    def uniform(self, shape=()) -> np.ndarray | float:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = self._uniform_words(n)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray | float:
        """Standard normals via Box-Muller on paired uniforms."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        u = self._uniform_words(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log() finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray | int:
        """Uniform integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = self._uniform_words(n)
        vals = low + np.minimum((u * (high - low)).astype(np.int64), high - low - 1)
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniforms)."""
        return np.argsort(self._uniform_words(n), kind="stable")

    # -- bookkeeping -----------------------------------------------------

    def child(self, suffix: str) -> "RngStream":
        """Independent substream; position of the parent is unaffected."""
        return RngStream(f"{self.name}/{suffix}", self.seed)

    @property
    def state(self) -> dict:
        return {"name": self.name, "seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["name"], state["seed"], state["counter"])

    def __repr__(self) -> str:
        return f"RngStream({self.name!r}, seed={self.seed}, counter={self.counter})"


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
