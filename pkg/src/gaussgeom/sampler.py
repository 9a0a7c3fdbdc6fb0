"""Deterministic, splittable randomness.

All Monte Carlo work in this package draws from counter-based Philox
streams keyed by a (master, stream) pair of 64-bit integers.  Standard
normals are produced by the inverse CDF applied to open-interval
uniforms, so a (master, stream) pair fixes the exact sample sequence on
every platform with the same numpy/scipy builds.  Parallelism never
shares generator state: work is distributed by splitting seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; a bijection on 64-bit integers."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class SeedSpec:
    """Key of one random stream: (master, stream), both unsigned 64-bit.

    Identical pairs reproduce bit-identical sequences; distinct pairs give
    statistically independent Philox streams.
    """

    master: int = 0
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
            object.__setattr__(self, name, int(v))


def split_seed(seed: SeedSpec, child: int) -> SeedSpec:
    """Derive an independent child stream.

    The map child -> stream is a composition of bijections on u64, so for a
    fixed parent no two children collide.  Pure: same inputs, same output.
    """
    if not isinstance(child, (int, np.integer)) or child < 0:
        raise ValueError(f"child index must be a nonnegative integer, got {child!r}")
    mixed = _mix64(seed.stream ^ _mix64((int(child) + _GOLDEN) & _MASK64))
    return SeedSpec(master=seed.master, stream=mixed)


def philox_generator(seed: SeedSpec) -> np.random.Generator:
    """Counter-based generator keyed by the seed pair."""
    key = np.array([seed.master, seed.stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# Half-ulp shift keeps uniforms strictly inside (0, 1) before the inverse CDF.
_HALF_ULP = 2.0 ** -54
_TOP = 1.0 - 2.0 ** -54


def normal_fill(gen: np.random.Generator, out: np.ndarray) -> np.ndarray:
    """Fill `out` with standard normals drawn from `gen`.

    Inverse-CDF method: uniform doubles on [0,1) are shifted to grid
    midpoints (2k+1)/2^54 and mapped through ndtri.  The shift avoids the
    endpoints exactly; the top clamp guards the one half-ulp rounding case.
    """
    gen.random(out=out)
    out += _HALF_ULP
    np.minimum(out, _TOP, out=out)
    return ndtri(out, out=out)


def gaussian_vector(seed: SeedSpec, n: int) -> np.ndarray:
    """n i.i.d. standard normal variates for this seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return normal_fill(philox_generator(seed), np.empty(n))


def gaussian_matrix(seed: SeedSpec, rows: int, cols: int) -> np.ndarray:
    """rows x cols standard Gaussian matrix, row-major draw order."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got {rows}x{cols}")
    return normal_fill(philox_generator(seed), np.empty((rows, cols)))


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal n x k frame; the column span is the subspace."""

    columns: np.ndarray
    n: int
    k: int

    def __post_init__(self):
        q = np.asarray(self.columns, dtype=float)
        if q.ndim != 2 or q.shape != (self.n, self.k):
            raise ValueError(f"columns must be {self.n}x{self.k}, got shape {q.shape}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        dev = np.abs(q.T @ q - np.eye(self.k)).max()
        if dev > 1e-12:
            raise ValueError(f"columns are not orthonormal (max deviation {dev:.3e})")
        object.__setattr__(self, "columns", q)


def haar_subspace(seed: SeedSpec, n: int, k: int) -> SubspaceBasis:
    """Haar-distributed k-dimensional subspace of R^n.

    QR of an n x k Gaussian matrix with the sign convention that R has a
    positive diagonal.  That convention makes the factorization unique, so
    Q is exactly Haar on the Stiefel manifold (Mezzadri's recipe).
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    g = gaussian_matrix(seed, n, k)
    q, r = np.linalg.qr(g, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    q = q * signs
    return SubspaceBasis(columns=q, n=n, k=k)
