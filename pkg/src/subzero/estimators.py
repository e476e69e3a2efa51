"""Two-point gradient estimators: full-space, dense-subspace and low-rank.

All three share the same probe: perturb the parameters in place by
``+epsilon``, evaluate, swing to ``-epsilon`` in one pass, evaluate again,
then restore.  The scalar

    rho = (loss_plus - loss_minus) / (2 * epsilon)

multiplies the perturbation direction to form the gradient estimate.  The
layer-wise estimator and the full-space baseline never store the direction;
they regenerate it from the seed.  The dense-subspace baseline materializes
its d-by-q projection, which is exactly the memory cost the layer-wise
estimator avoids, and refuses projections beyond an entry budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AllocationRefused, NonFiniteLoss, ShapeError
from .numcore import GaussianStream, stack_params
from .perturbation import (ProjectionPair, iter_perturbation_layers,
                           subspace_dimension)

DENSE_ENTRY_CAP = 10 ** 8


@dataclass(frozen=True)
class LossDifference:
    """The two probe losses of a step and the probe radius that linked them."""

    loss_plus: float
    loss_minus: float
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def rho(self) -> float:
        """Central-difference directional derivative estimate."""
        return (self.loss_plus - self.loss_minus) / (2.0 * self.epsilon)


@dataclass(frozen=True)
class EstimateMeta:
    """Provenance of a gradient estimate: which family produced it, from
    which seed, at which probe radius, searching a subspace of dimension q
    (q equals the full dimension for the full-space family)."""

    family: str
    seed: int
    epsilon: float
    q: int
    pairs: Optional[tuple] = None


@dataclass(frozen=True, eq=False)
class GradEstimate:
    """A gradient estimate, one array per parameter layer."""

    layers: list[np.ndarray]
    meta: EstimateMeta

    def stacked(self) -> np.ndarray:
        """Flattened estimate under the package's column-major convention."""
        return stack_params(self.layers)

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.layers)))


def _checked(value: float, sign: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(f"probe loss at {sign}epsilon evaluated to {value!r}")
    return float(value)


def two_sided_loss_diff(
    problem,
    params: Sequence[np.ndarray],
    pairs: Sequence[Optional[ProjectionPair]],
    batch,
    epsilon: float,
    seed: int,
    z_scales: Optional[Sequence[float]] = None,
) -> LossDifference:
    """Probe the loss at ``+epsilon`` and ``-epsilon`` along one seeded
    perturbation, restoring the parameters before returning.

    The three in-place passes (+1, -2, +1) replay the same seed, so nothing
    layer-sized is retained between passes.  If a loss evaluation raises,
    the net perturbation applied so far is undone before the error
    propagates, leaving the parameters restored to working precision.
    """

    def apply(direction: int) -> None:
        scale = float(direction) * epsilon
        for w, delta in zip(params, iter_perturbation_layers(params, pairs, seed, z_scales)):
            np.multiply(delta, scale, out=delta)
            np.add(w, delta, out=w)

    applied = 0
    try:
        apply(+1)
        applied = 1
        loss_plus = _checked(problem.loss(params, batch), "+")
        apply(-2)
        applied = -1
        loss_minus = _checked(problem.loss(params, batch), "-")
        apply(+1)
        applied = 0
    except BaseException:
        if applied:
            apply(-applied)
        raise
    return LossDifference(loss_plus=loss_plus, loss_minus=loss_minus, epsilon=epsilon)


def subzero_estimate(
    problem,
    params: Sequence[np.ndarray],
    pairs: Sequence[Optional[ProjectionPair]],
    batch,
    epsilon: float,
    seed: int,
    z_scales: Optional[Sequence[float]] = None,
) -> tuple[LossDifference, GradEstimate]:
    """Layer-wise low-rank gradient estimate.

    Matrix layers are perturbed along ``U Z V^T`` for their projection pair,
    vector layers (pair ``None``) along a full Gaussian.  After the probe
    the perturbation is regenerated from the seed and scaled by rho, so the
    estimate costs two loss evaluations and no stored directions.
    """
    if len(params) != len(pairs):
        raise ShapeError("params and pairs must align layer by layer")
    ld = two_sided_loss_diff(problem, params, pairs, batch, epsilon, seed, z_scales)
    rho = ld.rho
    layers = []
    for delta in iter_perturbation_layers(params, pairs, seed, z_scales):
        np.multiply(delta, rho, out=delta)
        layers.append(delta)
    meta = EstimateMeta(family="subzero", seed=seed, epsilon=epsilon,
                        q=subspace_dimension(params, pairs), pairs=tuple(pairs))
    return ld, GradEstimate(layers=layers, meta=meta)


def spsa_full(problem, params: Sequence[np.ndarray], batch,
              epsilon: float, seed: int) -> GradEstimate:
    """Full-space two-point estimate: every layer perturbed by a dense
    Gaussian of its own shape, seed-replayed like the low-rank path."""
    pairs: list[Optional[ProjectionPair]] = [None] * len(params)
    ld = two_sided_loss_diff(problem, params, pairs, batch, epsilon, seed)
    rho = ld.rho
    layers = []
    for delta in iter_perturbation_layers(params, pairs, seed):
        np.multiply(delta, rho, out=delta)
        layers.append(delta)
    d = sum(w.size for w in params)
    meta = EstimateMeta(family="spsa_full", seed=seed, epsilon=epsilon, q=d)
    return GradEstimate(layers=layers, meta=meta)


def _dense_direction(params: Sequence[np.ndarray], q: int, seed: int,
                     max_entries: int,
                     projection: Optional[np.ndarray]) -> np.ndarray:
    """The stacked direction ``P z`` of the dense-subspace estimator.

    Draw order is ``z`` first (q values), then ``P`` row-major, so
    overriding ``P`` (the identity hook) leaves ``z`` unchanged and
    reproduces the full-space draws value for value.
    """
    d = sum(w.size for w in params)
    if q < 1:
        raise ShapeError(f"subspace dimension must be positive, got {q}")
    stream = GaussianStream(seed)
    z = stream.normals(q)
    if projection is None:
        if d * q > max_entries:
            raise AllocationRefused(
                f"dense projection needs {d * q} entries, over the cap of {max_entries}")
        p = stream.normals(d * q).reshape(d, q)
    else:
        p = np.asarray(projection, dtype=np.float64)
        if p.shape != (d, q):
            raise ShapeError(f"projection must be {(d, q)}, got {p.shape}")
    return p @ z


def _split_rowmajor(direction: np.ndarray,
                    params: Sequence[np.ndarray]) -> list[np.ndarray]:
    # row-major per layer to mirror the order full-space draws fill layers
    out = []
    offset = 0
    for w in params:
        out.append(direction[offset:offset + w.size].reshape(w.shape))
        offset += w.size
    return out


def dense_subspace_probe(
    problem,
    params: Sequence[np.ndarray],
    batch,
    epsilon: float,
    q: int,
    seed: int,
    max_entries: int = DENSE_ENTRY_CAP,
    projection: Optional[np.ndarray] = None,
) -> tuple[LossDifference, GradEstimate]:
    """Dense-subspace estimate plus its probe losses; see
    :func:`spsa_dense_subspace`."""
    direction = _dense_direction(params, q, seed, max_entries, projection)
    chunks = _split_rowmajor(direction, params)

    def apply(scale: float) -> None:
        for w, c in zip(params, chunks):
            w += scale * c

    applied = 0
    try:
        apply(epsilon)
        applied = 1
        loss_plus = _checked(problem.loss(params, batch), "+")
        apply(-2.0 * epsilon)
        applied = -1
        loss_minus = _checked(problem.loss(params, batch), "-")
        apply(epsilon)
        applied = 0
    except BaseException:
        if applied:
            apply(-applied * epsilon)
        raise
    ld = LossDifference(loss_plus=loss_plus, loss_minus=loss_minus, epsilon=epsilon)
    layers = [np.ascontiguousarray(ld.rho * c) for c in chunks]
    meta = EstimateMeta(family="spsa_dense_subspace", seed=seed,
                        epsilon=epsilon, q=q)
    return ld, GradEstimate(layers=layers, meta=meta)


def spsa_dense_subspace(
    problem,
    params: Sequence[np.ndarray],
    batch,
    epsilon: float,
    q: int,
    seed: int,
    max_entries: int = DENSE_ENTRY_CAP,
    projection: Optional[np.ndarray] = None,
) -> GradEstimate:
    """Two-point estimate restricted to a dense random q-dimensional
    subspace of the stacked parameter space.

    Draws an unstructured Gaussian projection of d-by-q entries each call,
    refusing allocations over ``max_entries``.  ``projection`` overrides the
    drawn matrix (the identity at ``q = d`` reproduces :func:`spsa_full`
    exactly, which tests rely on).
    """
    _, est = dense_subspace_probe(problem, params, batch, epsilon, q, seed,
                                  max_entries=max_entries, projection=projection)
    return est
