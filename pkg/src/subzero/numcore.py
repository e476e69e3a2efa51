"""Deterministic random streams, orthonormal bases, and finite differences.

This module is the numerical floor of the package.  Everything above it
(perturbations, estimators, the trainer) assumes:

* all floating point work is float64;
* parameter matrices are 2-D C-contiguous arrays, vector parameters are 1-D;
* random values come from :class:`GaussianStream`, where the j-th value of a
  stream is a pure function of ``(seed, j)``.  Replaying a seed therefore
  regenerates identical values regardless of how draws were batched, which is
  what lets the estimators re-create a perturbation instead of storing it.

The flattening convention used everywhere is column-major per layer: a 2-D
layer contributes its entries column by column (``order="F"``), a 1-D layer
contributes its entries as is, and layers are concatenated in parameter
order.  Under this convention a low-rank update ``U Z V^T`` flattens to
``(V kron U) vec(Z)``, which the verification module relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RankDeficient, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_STREAM_SALT = 0x8BADF00D5EEDC0DE
_DERIVE_SALT = 0xA0761D6478BD642F

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0 ** -53


def _mix64(x: int) -> int:
    """SplitMix64 finalizer; bijective on 64-bit integers."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *parts: int) -> int:
    """Derive a child seed from a master seed and non-negative integer parts.

    Used for seed lineage: per-step seeds, per-replica seeds and projection
    refresh seeds are all derived from one experiment seed through this
    function, so runs are reproducible from a single integer.
    """
    h = _mix64(master ^ _DERIVE_SALT)
    for p in parts:
        if p < 0:
            raise ValueError("seed parts must be non-negative")
        h = _mix64(h + (_GOLDEN * (p + 1) & _MASK64))
    return h


class GaussianStream:
    """Counter-based stream of independent standard normal values.

    Value ``j`` is produced by hashing ``(seed, j)`` with SplitMix64 and
    feeding two uniforms through the Box-Muller transform.  The stream keeps
    only a counter, so state is O(1), values never depend on batching, and
    ``reset()`` replays the stream exactly.
    """

    __slots__ = ("seed", "_key", "_index")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = _mix64(self.seed ^ _STREAM_SALT)
        self._index = 0

    @property
    def index(self) -> int:
        """Number of normal values consumed so far."""
        return self._index

    def reset(self, index: int = 0) -> None:
        """Rewind (or fast-forward) the stream to a given value index."""
        if index < 0:
            raise ValueError("stream index must be non-negative")
        self._index = index

    def _uniform(self, k: int) -> float:
        # open-interval uniform in (0, 1): top 53 bits, offset by half an ulp
        x = _mix64((self._key + _GOLDEN * (k + 1)) & _MASK64)
        return ((x >> 11) + 0.5) * _INV_2_53

    def normal_at(self, j: int) -> float:
        """The j-th value of the stream, independent of the counter."""
        u1 = self._uniform(2 * j)
        u2 = self._uniform(2 * j + 1)
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def normals(self, n: int) -> np.ndarray:
        """Consume and return the next ``n`` values as a float64 vector."""
        if n < 0:
            raise ValueError("cannot draw a negative number of values")
        base = self._index
        out = np.empty(n, dtype=np.float64)
        key = self._key
        for i in range(n):
            k = 2 * (base + i)
            x1 = _mix64((key + _GOLDEN * (k + 1)) & _MASK64)
            x2 = _mix64((key + _GOLDEN * (k + 2)) & _MASK64)
            u1 = ((x1 >> 11) + 0.5) * _INV_2_53
            u2 = ((x2 >> 11) + 0.5) * _INV_2_53
            out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)
        self._index = base + n
        return out

    def skip(self, n: int) -> None:
        """Advance the counter without generating values."""
        if n < 0:
            raise ValueError("cannot skip a negative number of values")
        self._index += n


def gaussian_matrix(stream: GaussianStream, m: int, n: int) -> np.ndarray:
    """Draw an ``m``-by-``n`` matrix of iid standard normals, row-major fill."""
    if m <= 0 or n <= 0:
        raise ShapeError(f"gaussian_matrix needs positive dimensions, got {(m, n)}")
    return stream.normals(m * n).reshape(m, n)


def qr_orthonormal(a: np.ndarray) -> np.ndarray:
    """Column-orthonormal basis for the range of a tall matrix.

    Thin Householder QR with the sign convention that the diagonal of R is
    positive, which makes the factorization (and everything seeded through
    it) unique.  Raises :class:`RankDeficient` when the smallest ``|R_ii|``
    falls below ``1e-12`` times the largest, since a rank-deficient draw
    would silently shrink the subspace dimension.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"qr_orthonormal expects a matrix, got ndim={a.ndim}")
    m, n = a.shape
    if m < n:
        raise ShapeError(f"qr_orthonormal expects m >= n, got {(m, n)}")
    q, r = np.linalg.qr(a)
    diag = np.diagonal(r)
    largest = np.max(np.abs(diag)) if n else 0.0
    if n and (largest == 0.0 or np.min(np.abs(diag)) < 1e-12 * largest):
        raise RankDeficient(f"QR of a {m}x{n} draw is numerically rank deficient")
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return np.ascontiguousarray(q * signs)


def fro_norm(a: np.ndarray) -> float:
    """Frobenius norm (2-norm of the flattened array)."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def stack_params(params: list[np.ndarray]) -> np.ndarray:
    """Flatten a parameter list into one vector, column-major per 2-D layer."""
    if not params:
        return np.zeros(0)
    parts = []
    for w in params:
        if w.ndim == 2:
            parts.append(w.ravel(order="F"))
        elif w.ndim == 1:
            parts.append(w.ravel())
        else:
            raise ShapeError(f"parameters must be 1-D or 2-D, got ndim={w.ndim}")
    return np.concatenate(parts)


def unstack_params(x: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    """Inverse of :func:`stack_params` for the given layer shapes."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    total = sum(int(np.prod(s)) for s in shapes)
    if x.size != total:
        raise ShapeError(f"vector of size {x.size} does not split into shapes {shapes}")
    out = []
    offset = 0
    for s in shapes:
        size = int(np.prod(s))
        chunk = x[offset : offset + size]
        if len(s) == 2:
            out.append(np.ascontiguousarray(chunk.reshape(s, order="F")))
        else:
            out.append(chunk.copy())
        offset += size
    return out


@dataclass(frozen=True)
class FiniteDiffOracle:
    """Configuration for entrywise central differences."""

    delta: float = 1e-6

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError("finite difference step must be positive")


def fd_gradient(problem, params: list[np.ndarray], batch,
                oracle: FiniteDiffOracle = FiniteDiffOracle()) -> list[np.ndarray]:
    """Central-difference gradient of ``problem.loss`` per parameter entry.

    Slow by construction (two loss evaluations per entry); intended as an
    independent oracle for analytic gradients on desk-scale problems, not
    for use inside training loops.
    """
    delta = oracle.delta
    work = [np.array(w, dtype=np.float64) for w in params]
    grads = []
    for w in work:
        g = np.empty_like(w)
        flat_w = w.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_w.size):
            orig = flat_w[j]
            flat_w[j] = orig + delta
            lp = problem.loss(work, batch)
            flat_w[j] = orig - delta
            lm = problem.loss(work, batch)
            flat_w[j] = orig
            flat_g[j] = (lp - lm) / (2.0 * delta)
        grads.append(g)
    return grads
