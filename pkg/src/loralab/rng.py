"""Seeded random streams with reproducible draws.

Built on numpy's Philox bit generator (a counter-based generator with a
published state transition), so a stream is fully determined by its seed
path.  Gaussian variates are produced by an explicit Box-Muller transform on
the raw uniforms rather than numpy's ziggurat, which keeps the normal stream
a pure function of the uniform stream.

Streams form a tree: ``spawn(*keys)`` derives an independent child stream
from integer keys, so every consumer of randomness in a run owns a stream
addressed by (seed, purpose, task, ...) and never competes for draws.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RngStream"]


class RngStream:
    """A seedable stream of uniforms, normals and permutations.

    Identical seed paths produce identical value sequences. Draws advance the
    internal Philox counter; the stream object is mutable but owns no other
    state.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed)
        self._path = tuple(int(k) for k in _path)
        entropy = (self.seed,) + self._path
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def spawn(self, *keys: int) -> "RngStream":
        """Derive an independent child stream from integer keys."""
        return RngStream(self.seed, self._path + tuple(keys))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = self._gen.random((2, n))
        # 1 - u1 lies in (0, 1], keeping the log finite.
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape) if shape else float(z[0])

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self._path})"
