"""Count-Sketch Johnson-Lindenstrauss transform.

``R`` is ``p`` stacked ``s x d`` blocks, each column of each block holding a
single ``+-1`` at a hashed row, scaled by ``1/sqrt(p)``.  Rows and signs come
from seeded 64-bit mixers evaluated per column on demand, so the matrix is
never stored.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import sparse

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser, vectorised over uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_scalar(x: int) -> int:
    return int(splitmix64(np.array([x & _MASK], dtype=np.uint64))[0])


class SketchConfigError(ValueError):
    pass


class CountSketch:
    """Implicit ``k x d`` Count-Sketch matrix with ``p`` blocks of ``s = k / p`` rows.

    ``strict=False`` skips the ``k < d`` check; it exists for oracle tests
    that need square sketches.
    """

    def __init__(self, d: int, k: int, p: int, seed: int, *, strict: bool = True):
        if d < 1 or k < 1 or p < 1:
            raise SketchConfigError("d, k and p must be positive")
        if k % p:
            raise SketchConfigError(f"block count p={p} does not divide k={k}")
        if strict and k >= d:
            raise SketchConfigError(f"compressed dimension k={k} must be below d={d}")
        self.d, self.k, self.p, self.s = d, k, p, k // p
        self.seed = int(seed)
        base = _mix_scalar(self.seed)
        self.hash_seeds = tuple(
            (_mix_scalar(base ^ (2 * i + 1)), _mix_scalar(base ^ (2 * i + 2))) for i in range(p)
        )

    def __repr__(self):
        return f"CountSketch(d={self.d}, k={self.k}, p={self.p}, seed={self.seed})"

    @property
    def rate(self) -> float:
        return self.d / self.k

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Row index within each block and sign, both of shape ``(p, d)``."""
        cols = np.arange(self.d, dtype=np.uint64)[None, :]
        hs = np.array([h for h, _ in self.hash_seeds], dtype=np.uint64)[:, None]
        zs = np.array([z for _, z in self.hash_seeds], dtype=np.uint64)[:, None]
        # multiply-shift range reduction of the high 32 bits onto [0, s)
        high = splitmix64(cols ^ hs) >> np.uint64(32)
        rows = ((high * np.uint64(self.s)) >> np.uint64(32)).astype(np.int64)
        bits = splitmix64(cols ^ zs) >> np.uint64(63)
        return rows, 1.0 - 2.0 * bits.astype(np.float64)

    def _operator(self) -> sparse.csc_matrix:
        rows, signs = self.tables()
        flat = rows + (np.arange(self.p, dtype=np.int64) * self.s)[:, None]
        # column l holds rows flat[:, l], already ascending in block order
        indptr = np.arange(0, self.p * self.d + 1, self.p)
        data = signs.T.ravel() / np.sqrt(self.p)
        return sparse.csc_matrix((data, flat.T.ravel(), indptr), shape=(self.k, self.d))

    def compress(self, v) -> np.ndarray:
        """``R v`` for a vector (d,) or each row of an array (m, d)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.d or v.ndim > 2:
            raise ValueError(f"expected length {self.d}, got shape {v.shape}")
        return np.asarray(self._operator() @ v.T).T

    def decompress(self, c) -> np.ndarray:
        """``R^T c`` for a vector (k,) or each row of an array (m, k)."""
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.k or c.ndim > 2:
            raise ValueError(f"expected length {self.k}, got shape {c.shape}")
        return np.asarray(self._operator().T @ c.T).T

    def roundtrip(self, v) -> np.ndarray:
        """``R^T R v`` with a single table evaluation."""
        op = self._operator()
        v = np.asarray(v, dtype=np.float64)
        return np.asarray(op.T @ (op @ v.T)).T

    def to_dense(self) -> np.ndarray:
        rows, signs = self.tables()
        dense = np.zeros((self.k, self.d))
        cols = np.arange(self.d)
        for i in range(self.p):
            dense[i * self.s + rows[i], cols] = signs[i]
        return dense / np.sqrt(self.p)


class TableSketch(CountSketch):
    """Sketch with explicit row/sign tables; used to build oracle instances in tests."""

    def __init__(self, rows, signs):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
        signs = np.atleast_2d(np.asarray(signs, dtype=np.float64))
        p, d = rows.shape
        s = int(rows.max()) + 1
        self.d, self.k, self.p, self.s = d, p * s, p, s
        self.seed = -1
        self.hash_seeds = ()
        self._rows, self._signs = rows, signs

    def tables(self):
        return self._rows, self._signs


def sketch_for_rate(d: int, rate: float, p: int, seed: int) -> CountSketch:
    """Sketch with ``k = floor(d / rate)`` rounded down to a multiple of ``p``."""
    k = int(d // rate) // p * p
    if k < p:
        raise SketchConfigError(f"rate {rate} leaves fewer than p={p} rows for d={d}")
    return CountSketch(d, k, p, seed)


def spectral_norm_sq(sketch: CountSketch, iters: int, rng: np.random.Generator) -> float:
    """Power-iteration estimate of ``lambda_max(R^T R)`` (the squared spectral norm)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = rng.standard_normal(sketch.d)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = sketch.decompress(sketch.compress(x))
        est = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return est


def distortion_scan(sketch: CountSketch, vectors) -> float:
    """Max over pairs of ``| ||R(u - v)|| / ||u - v|| - 1 |``, skipping coincident pairs."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ValueError("need at least two vectors")
    pairs = list(itertools.combinations(range(vectors.shape[0]), 2))
    i, j = np.array(pairs).T
    diffs = vectors[i] - vectors[j]
    norms = np.linalg.norm(diffs, axis=1)
    keep = norms > 0
    if not keep.any():
        return 0.0
    proj = np.linalg.norm(sketch.compress(diffs[keep]), axis=1)
    return float(np.max(np.abs(proj / norms[keep] - 1.0)))
