"""Layer-wise low-rank perturbations and their projection pairs.

A matrix layer ``W`` of shape ``(m, n)`` is perturbed along ``U Z V^T`` where
``U`` and ``V`` are column-orthonormal ``(m, r)`` and ``(n, r)`` bases drawn
once per refresh period, and ``Z`` is an ``(r, r)`` standard normal draw made
fresh every step.  Vector layers (biases and the like) have no useful
low-rank structure; they fall back to a full Gaussian perturbation and are
marked by a ``None`` entry in the pairs list.

Perturbations are never stored.  ``perturb_params_inplace`` seeds a stream,
walks the layers in order drawing exactly ``r_i**2`` values per matrix layer
(``size`` values per vector layer), and adds the scaled perturbation into the
parameters.  Replaying the same seed with direction ``-2`` then ``+1``
implements the two-sided probe and restore without any per-layer state
beyond one transient buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .numcore import GaussianStream, gaussian_matrix, qr_orthonormal


@dataclass(frozen=True)
class LayerShape:
    """A 2-D layer geometry, possibly the result of a relayout."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ShapeError(f"layer dimensions must be positive, got {self}")

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ProjectionPair:
    """Column-orthonormal factors spanning a rank-r perturbation subspace."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise ShapeError("projection factors must be matrices")
        if self.u.shape[1] != self.v.shape[1]:
            raise ShapeError(
                f"factor ranks disagree: {self.u.shape} vs {self.v.shape}")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> LayerShape:
        """Geometry of the layer this pair perturbs."""
        return LayerShape(self.u.shape[0], self.v.shape[0])


@dataclass(frozen=True)
class PerturbSpec:
    """One pass of the perturb/restore sequence.

    ``direction`` is the signed multiple of ``epsilon`` to apply; the
    two-sided probe uses the sequence ``+1, -2, +1``.
    """

    epsilon: float
    seed: int
    direction: int

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.direction == 0:
            raise ValueError("direction must be nonzero")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def generate_proj_pair(stream: GaussianStream, m: int, n: int, r: int) -> ProjectionPair:
    """Draw and orthonormalize a projection pair for an ``(m, n)`` layer.

    Consumes ``(m + n) * r`` stream values: the ``U`` draw first, then ``V``,
    both row-major.  Requires ``1 <= r <= min(m, n)`` so both QR
    factorizations are tall.
    """
    if r < 1 or r > min(m, n):
        raise ShapeError(f"rank {r} not in [1, min{(m, n)}]")
    u = qr_orthonormal(gaussian_matrix(stream, m, r))
    v = qr_orthonormal(gaussian_matrix(stream, n, r))
    return ProjectionPair(u=u, v=v)


def low_rank_perturbation(pair: ProjectionPair, z: np.ndarray) -> np.ndarray:
    """Materialize ``U Z V^T`` for a given core matrix ``z``."""
    z = np.asarray(z, dtype=np.float64)
    r = pair.rank
    if z.shape != (r, r):
        raise ShapeError(f"core must be {(r, r)}, got {z.shape}")
    return pair.u @ (z @ pair.v.T)


def reshape_near_square(m: int, n: int) -> LayerShape:
    """Most nearly square factorization of ``m * n``.

    Returns the divisor pair ``(a, b)`` of ``m * n`` with ``a >= b`` and
    minimal aspect ratio ``a / b``; equivalently, ``a`` is the smallest
    divisor at or above ``sqrt(m * n)``.  A prime product degenerates to
    ``(m * n, 1)``, which callers may reject but this function reports
    faithfully.
    """
    if m <= 0 or n <= 0:
        raise ShapeError(f"dimensions must be positive, got {(m, n)}")
    total = m * n
    start = math.isqrt(total)
    if start * start < total:
        start += 1
    for a in range(start, total + 1):
        if total % a == 0:
            return LayerShape(a, total // a)
    return LayerShape(total, 1)


def reshaped_view(w: np.ndarray, shape: LayerShape) -> np.ndarray:
    """Row-major view of ``w`` under a new geometry; never copies.

    In-place updates through the view land in the original parameter, which
    is how reshaped layers are trained without a relayout pass.
    """
    if w.size != shape.size:
        raise ShapeError(f"cannot view {w.shape} as {shape}")
    if not w.flags.c_contiguous:
        raise ShapeError("relayout requires a C-contiguous parameter")
    return w.reshape(shape.rows, shape.cols)


def norm_alignment_factor(m: int, n: int, r: int) -> float:
    """Scale that matches a rank-r perturbation's expected Frobenius norm
    to a full Gaussian one for an ``(m, n)`` layer: ``sqrt(m * n) / r``."""
    if r < 1 or r > min(m, n):
        raise ShapeError(f"rank {r} not in [1, min{(m, n)}]")
    return math.sqrt(m * n) / r


@dataclass(frozen=True)
class LayerPlan:
    """How one parameter layer is perturbed: ``shape is None`` marks the
    full-space fallback for vectors, otherwise the (possibly reshaped)
    geometry and the clamped rank of its low-rank subspace."""

    shape: Optional[LayerShape]
    rank: int

    @property
    def draw_count(self) -> int:
        """Stream values one perturbation pass consumes for this layer."""
        return self.rank ** 2


def plan_layers(params: Sequence[np.ndarray], rank: int,
                reshape: str = "auto") -> list[LayerPlan]:
    """Decide geometry and rank per layer for a requested rank.

    ``reshape`` controls relayout of awkward geometries:

    * ``"never"``: use each layer's own shape; rank is clamped to
      ``min(m, n)`` when the layer cannot support the requested rank.
    * ``"always"``: every matrix layer is viewed at its most nearly square
      factorization.
    * ``"auto"``: relayout only layers with ``min(m, n) < rank``, i.e. only
      when the requested rank does not fit the native shape.

    Vector layers always get the full-space fallback, recorded as a plan
    with ``shape=None`` and rank equal to the entry count.
    """
    if rank < 1:
        raise ShapeError(f"rank must be positive, got {rank}")
    if reshape not in ("auto", "always", "never"):
        raise ValueError(f"unknown reshape policy {reshape!r}")
    plans: list[LayerPlan] = []
    for w in params:
        if w.ndim == 1:
            plans.append(LayerPlan(shape=None, rank=w.size))
            continue
        if w.ndim != 2:
            raise ShapeError(f"parameters must be 1-D or 2-D, got ndim={w.ndim}")
        m, n = w.shape
        if reshape == "always" or (reshape == "auto" and min(m, n) < rank):
            geom = reshape_near_square(m, n)
            m, n = geom.rows, geom.cols
        plans.append(LayerPlan(shape=LayerShape(m, n), rank=min(rank, m, n)))
    return plans


def pairs_from_plan(stream: GaussianStream,
                    plans: Sequence[LayerPlan]) -> list[Optional[ProjectionPair]]:
    """Draw fresh projection pairs following a layer plan, in layer order."""
    pairs: list[Optional[ProjectionPair]] = []
    for plan in plans:
        if plan.shape is None:
            pairs.append(None)
        else:
            pairs.append(generate_proj_pair(
                stream, plan.shape.rows, plan.shape.cols, plan.rank))
    return pairs


def build_pairs(stream: GaussianStream, params: Sequence[np.ndarray], rank: int,
                reshape: str = "auto") -> list[Optional[ProjectionPair]]:
    """Generate one projection pair per matrix layer, ``None`` per vector.

    Convenience wrapper around :func:`plan_layers` and
    :func:`pairs_from_plan`; pairs carry the (possibly reshaped) geometry,
    and the perturbation routines detect a geometry whose size matches the
    layer and work through a view.
    """
    return pairs_from_plan(stream, plan_layers(params, rank, reshape))


def iter_perturbation_layers(
    params: Sequence[np.ndarray],
    pairs: Sequence[Optional[ProjectionPair]],
    seed: int,
    z_scales: Optional[Sequence[float]] = None,
) -> Iterator[np.ndarray]:
    """Yield each layer's unit perturbation for a given seed, one at a time.

    Layer ``i`` is ``z`` (full Gaussian, layer-shaped) when ``pairs[i]`` is
    ``None`` and ``scale * U Z V^T`` otherwise, always in the layer's native
    shape.  Draw order and counts match ``perturb_params_inplace``, so the
    same seed reproduces exactly what was added to the parameters, scaled by
    ``direction * epsilon``.
    """
    if len(params) != len(pairs):
        raise ShapeError("params and pairs must align layer by layer")
    if z_scales is not None and len(z_scales) != len(params):
        raise ShapeError("z_scales must align layer by layer")
    stream = GaussianStream(seed)
    for i, (w, pair) in enumerate(zip(params, pairs)):
        scale = 1.0 if z_scales is None else float(z_scales[i])
        if pair is None:
            delta = stream.normals(w.size).reshape(w.shape)
            if scale != 1.0:
                np.multiply(delta, scale, out=delta)
            yield delta
            continue
        u, v = pair.u, pair.v
        if w.size != u.shape[0] * v.shape[0]:
            raise ShapeError(
                f"pair geometry {pair.shape} does not cover a layer of shape {w.shape}")
        r = u.shape[1]
        z = stream.normals(r * r).reshape(r, r)
        delta = u @ (z @ v.T)
        if scale != 1.0:
            np.multiply(delta, scale, out=delta)
        yield delta.reshape(w.shape)


def perturb_params_inplace(
    params: Sequence[np.ndarray],
    pairs: Sequence[Optional[ProjectionPair]],
    spec: PerturbSpec,
    z_scales: Optional[Sequence[float]] = None,
) -> None:
    """Add ``direction * epsilon`` times the seeded perturbation to params.

    Works layer by layer with one transient buffer, so peak extra memory is
    the largest single layer, never the full parameter count.
    """
    step = float(spec.direction) * spec.epsilon
    for w, delta in zip(params, iter_perturbation_layers(params, pairs, spec.seed, z_scales)):
        np.multiply(delta, step, out=delta)
        np.add(w, delta, out=w)


def _plans_of(params: Sequence[np.ndarray],
              pairs: Sequence[Optional[ProjectionPair]]) -> list[LayerPlan]:
    plans = []
    for w, pair in zip(params, pairs):
        if pair is None:
            plans.append(LayerPlan(shape=None, rank=w.size))
        else:
            plans.append(LayerPlan(shape=pair.shape, rank=pair.rank))
    return plans


def plan_alignment_scales(plans: Sequence[LayerPlan],
                          mode: str = "none") -> Optional[list[float]]:
    """Per-layer core scales implementing norm alignment.

    ``"scale_z"`` multiplies each matrix layer's core draw by
    ``sqrt(m * n) / r`` so the low-rank perturbation has the Frobenius norm
    a full Gaussian would; vector layers already are full Gaussians and get
    scale one.  ``"none"`` (and ``"scale_hyper"``, which moves the factor
    into the hyperparameters instead) leaves draws unscaled.
    """
    if mode not in ("none", "scale_z", "scale_hyper"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    if mode != "scale_z":
        return None
    scales = []
    for plan in plans:
        if plan.shape is None:
            scales.append(1.0)
        else:
            scales.append(norm_alignment_factor(
                plan.shape.rows, plan.shape.cols, plan.rank))
    return scales


def alignment_scales(
    params: Sequence[np.ndarray],
    pairs: Sequence[Optional[ProjectionPair]],
    mode: str = "none",
) -> Optional[list[float]]:
    """Alignment scales for an existing pairs list; see
    :func:`plan_alignment_scales`."""
    return plan_alignment_scales(_plans_of(params, pairs), mode)


def plan_uniform_factor(plans: Sequence[LayerPlan]) -> float:
    """The common alignment factor for ``"scale_hyper"`` mode.

    Folding the scale into the step size and probe radius is only exact when
    every matrix layer shares one factor; mixed geometries must use
    ``"scale_z"`` instead.
    """
    factors = set()
    for plan in plans:
        if plan.shape is not None:
            factors.add(norm_alignment_factor(
                plan.shape.rows, plan.shape.cols, plan.rank))
    if not factors:
        return 1.0
    if len(factors) > 1:
        raise ShapeError(
            "scale_hyper alignment needs a single shared factor; "
            f"got {sorted(factors)}; use scale_z for mixed layer geometries")
    return factors.pop()


def uniform_alignment_factor(pairs: Sequence[Optional[ProjectionPair]],
                             params: Optional[Sequence[np.ndarray]] = None) -> float:
    """Pair-based wrapper around :func:`plan_uniform_factor`."""
    factors = [LayerPlan(shape=p.shape, rank=p.rank)
               for p in pairs if p is not None]
    return plan_uniform_factor(factors)


def subspace_dimension(params: Sequence[np.ndarray],
                       pairs: Sequence[Optional[ProjectionPair]]) -> int:
    """Dimension of the random subspace the estimator searches: ``r_i**2``
    per matrix layer plus the full entry count of each vector layer."""
    total = 0
    for w, pair in zip(params, pairs):
        total += w.size if pair is None else pair.rank ** 2
    return total
