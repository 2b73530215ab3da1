"""Counter-based Gaussian increments.

The normal variate for ``(seed, path, step, coordinate)`` is a pure function
of those four integers: a SplitMix64-style hash yields a uniform, which is
mapped through a rational approximation of the normal quantile (absolute
error below 1e-8).  Paths can therefore be simulated in any order, batch
split or process layout and still see identical noise.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence

import numpy as np

from . import _kernels as K

_MASK = (1 << 64) - 1


def as_seed(seed: int) -> int:
    """Reduce any Python integer to an unsigned 64-bit seed."""
    return int(seed) & _MASK


def derive_seed(seed: int, label: str) -> int:
    """A new 64-bit seed for an independent stream named ``label``."""
    digest = hashlib.blake2b(f"{as_seed(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class NoiseStream:
    """Standard normal draws indexed by path, step and coordinate.

    Parameters
    ----------
    seed:
        64-bit base seed.
    dim:
        Number of Brownian coordinates.
    columns:
        Coordinates that are actually drawn; others are returned as 0.
        Dropping a column does not change the values of the remaining ones.
    """

    def __init__(self, seed: int, dim: int, columns: Sequence[int] | None = None):
        self.seed = as_seed(seed)
        self.dim = int(dim)
        cols = range(self.dim) if columns is None else columns
        self.columns = np.asarray(sorted(set(int(c) for c in cols)), dtype=np.int64)

    def keys(self, paths) -> np.ndarray:
        return K.path_keys(np.uint64(self.seed), np.asarray(paths, dtype=np.int64).reshape(-1))

    def normals(self, keys: np.ndarray, step: int, out: np.ndarray | None = None) -> np.ndarray:
        """``(n, dim)`` standard normals for path keys from :meth:`keys` at ``step``."""
        if out is None:
            out = np.zeros((keys.shape[0], self.dim))
        K.normals(keys, np.int64(step), self.columns, np.int64(self.dim), out)
        return out

    def increments(self, paths, step: int, dt: float) -> np.ndarray:
        """Brownian increments ``sqrt(dt) * N`` for the given path indices."""
        return np.sqrt(dt) * self.normals(self.keys(paths), step)
