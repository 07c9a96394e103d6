"""Deformation algebra on dense vector fields.

A displacement field ``d`` stands for the map ``x -> x + d(x)`` in voxel units.
Diffeomorphisms are parameterized by stationary velocity fields and computed
by scaling and squaring, so ``exp(-v)`` is the inverse of ``exp(v)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _interp
from .errors import ConvergenceError, DataError, GridMismatchError, NonFiniteError
from .volume import Volume3, _as_spacing, downsample_array, smooth_array, upsample_array


@dataclass(frozen=True, eq=False)
class VectorField:
    data: np.ndarray  # (nx, ny, nz, 3), voxel units
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3 or min(data.shape[:3]) < 1:
            raise DataError(f"vector field data must have shape (nx, ny, nz, 3), got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{type(self).__name__} has non-finite components")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape[:3]

    def like(self, data):
        return type(self)(data, self.spacing)

    def __neg__(self):
        return self.like(-self.data)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(tuple(dims) + (3,)), spacing)

    def magnitude(self):
        return np.sqrt(np.einsum("...i,...i->...", self.data, self.data))


class VelocityField(VectorField):
    """Stationary velocity field; its flow ``exp(v)`` is a diffeomorphism."""


class DisplacementField(VectorField):
    """Displacement ``d`` of the map ``x -> x + d(x)``."""


def _check_dims(a, b):
    if tuple(a.dims) != tuple(b.dims):
        raise GridMismatchError(f"field grids differ: {tuple(a.dims)} vs {tuple(b.dims)}")


def default_n_steps(v):
    """Smallest n with ``max|v| / 2**n < 0.5`` voxel, but at least 4."""
    vmax = float(v.magnitude().max()) if v.data.size else 0.0
    n = 4
    while vmax / 2.0**n >= 0.5:
        n += 1
    return n


def compose(outer, inner):
    """Displacement of the map ``(x + outer) o (x + inner)``.

    Outer is looked up with edge clamping: beyond the grid the boundary
    displacement is reused.
    """
    _check_dims(outer, inner)
    return DisplacementField(_interp.compose_fields(outer.data, inner.data), inner.spacing)


def exp_velocity(v, n_steps=None):
    """Scaling and squaring: ``d = v / 2**n`` then ``n`` self-compositions."""
    if not np.isfinite(v.data).all():
        raise NonFiniteError("velocity field has non-finite components")
    if n_steps is None:
        n_steps = default_n_steps(v)
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    d = v.data / 2.0**n_steps
    for _ in range(n_steps):
        d = _interp.compose_fields(d, d)
    return DisplacementField(d, v.spacing)


def invert(d, iters=50, tol=1e-3):
    """Fixed-point inverse: iterate ``e <- -d(x + e(x))`` until the update is below ``tol``.

    Raises :class:`ConvergenceError` (carrying the last update size) when ``iters``
    run out.
    """
    inv = -d.data
    update = math.inf
    for _ in range(iters):
        new = inv - _interp.compose_fields(d.data, inv)
        update = float(np.abs(new - inv).max()) if inv.size else 0.0
        inv = new
        if update < tol:
            return DisplacementField(inv, d.spacing)
    raise ConvergenceError(f"field inversion did not converge in {iters} iterations "
                           f"(last max update {update:.3g} voxel)", residual=update)


def jacobian_determinant(d):
    """Per-voxel Jacobian determinant of ``x -> x + d(x)`` as a :class:`Volume3`.

    Central differences inside, one-sided at the boundary.
    """
    if min(d.dims) < 2:
        raise DataError(f"jacobian needs >= 2 voxels per axis, got {tuple(d.dims)}")
    j = np.empty(tuple(d.dims) + (3, 3))
    for c in range(3):
        grads = np.gradient(d.data[..., c], axis=(0, 1, 2), edge_order=1)
        for a in range(3):
            j[..., c, a] = grads[a]
        j[..., c, c] += 1.0
    return Volume3(np.linalg.det(j), d.spacing)


def field_sq_norm(d):
    """Mean squared displacement magnitude, in voxel^2."""
    if d.data.size == 0:
        return 0.0
    return float(np.mean(np.sum(d.data**2, axis=-1)))


def smooth_field(d, sigma):
    """Component-wise Gaussian smoothing (same kernel as :func:`gaussian_smooth`)."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return d
    return d.like(smooth_array(d.data, sigma, axes=(0, 1, 2)))


def interior_mask(dims, margin):
    mask = np.zeros(dims, dtype=bool)
    sl = tuple(slice(margin, n - margin) for n in dims)
    mask[sl] = True
    return mask


def mean_magnitude(d, margin=0):
    """Mean displacement length, optionally ignoring a boundary band of ``margin`` voxels."""
    mag = d.magnitude()
    if margin:
        mag = mag[interior_mask(d.dims, margin)]
    return float(mag.mean()) if mag.size else 0.0


def downsample_field(f):
    """Field on the next coarser pyramid level; vectors are rescaled to coarse voxels."""
    return type(f)(downsample_array(f.data) / 2.0, tuple(2 * s for s in f.spacing))


def upsample_field(f, dims):
    """Field on the next finer pyramid level ``dims``; vectors rescaled to fine voxels."""
    out = np.empty(tuple(dims) + (3,))
    for c in range(3):
        out[..., c] = 2.0 * upsample_array(f.data[..., c], dims)
    spacing = tuple(s / 2 for s in f.spacing)
    return type(f)(out, spacing)
