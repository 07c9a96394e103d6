"""Dense 3D scalar grids: sampling, smoothing, resampling and pyramids.

Arrays are indexed ``data[x, y, z]``. Voxel coordinates are zero-based and
physical position is ``index * spacing``; there is no orientation matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _interp
from .errors import DataError, GridMismatchError, NonFiniteError


def _as_spacing(spacing):
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise DataError(f"spacing must have 3 components, got {spacing!r}")
    if not all(s > 0 and math.isfinite(s) for s in sp):
        raise DataError(f"spacing components must be positive, got {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar intensity volume with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    background: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError("volume contains non-finite intensities")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "background", float(self.background))

    @property
    def dims(self):
        return self.data.shape

    def like(self, data):
        """New volume on the same grid."""
        return Volume3(data, self.spacing, self.background)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer ROI labels on a volume grid; label 0 is background."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise DataError("label data must be integer valued")
        data = data.astype(np.int64)
        if data.size and data.min() < 0:
            raise DataError("labels must be non-negative")
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        if 0 in names:
            raise DataError("label 0 is reserved for background")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "label_names", names)

    @property
    def dims(self):
        return self.data.shape

    def labels(self):
        """Sorted non-background label ids present in the map or its name table."""
        present = set(int(v) for v in np.unique(self.data)) | set(self.label_names)
        present.discard(0)
        return sorted(present)

    def like(self, data):
        return LabelMap(data, self.spacing, self.label_names)


def check_same_grid(a, b, what="grids"):
    if tuple(a.dims) != tuple(b.dims):
        raise GridMismatchError(f"{what} differ: {tuple(a.dims)} vs {tuple(b.dims)}")


def sample(data, coords, background=0.0, clamp=False):
    """Trilinear samples of ``data`` at voxel coordinates ``coords`` (shape (3, ...)).

    Points outside ``[0, dim - 1]`` on any axis get ``background``, or the value at
    the nearest grid point when ``clamp`` is set.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise NonFiniteError("non-finite sample coordinate (corrupt deformation?)")
    flat = np.ascontiguousarray(coords.reshape(3, -1))
    vals = _interp.sample_points(np.ascontiguousarray(data, dtype=np.float64), flat,
                                 bool(clamp), float(background))
    return vals.reshape(coords.shape[1:])


def sample_clamped(data, coords):
    """Trilinear samples with coordinates clamped to the grid (edge extension)."""
    return sample(data, coords, clamp=True)


def warp_with_gradient(moving, field, clamp=False):
    """Pull-back warp of ``moving`` plus the spatial derivative of the interpolant.

    Returns ``(values, grad)`` with ``grad`` shaped ``(nx, ny, nz, 3)``: the exact
    derivative of the piecewise-trilinear interpolant at each sample point, so it
    matches finite differences away from cell faces. Points outside the grid get
    background and zero gradient, or (with ``clamp``) the edge value and a zero
    derivative along each clamped axis.
    """
    if tuple(field.dims) != tuple(moving.dims):
        raise GridMismatchError(f"field grid {tuple(field.dims)} does not match volume {tuple(moving.dims)}")
    return _interp.warp_scalar_grad(moving.data, field.data, bool(clamp), moving.background)


def identity_grid(dims):
    """Voxel coordinate grid of shape ``(3, nx, ny, nz)``."""
    return np.indices(dims, dtype=np.float64)


def trilinear_sample(vol, p):
    """Interpolated value of ``vol`` at continuous voxel coordinate ``p``."""
    p = np.asarray(p, dtype=np.float64).reshape(3, 1)
    return float(sample(vol.data, p, vol.background)[0])


def warp_volume(moving, field, clamp=False):
    """Pull-back warp: output voxel ``x`` takes ``moving`` sampled at ``x + field(x)``.

    Samples falling outside the grid get ``moving.background``, or the nearest edge
    value when ``clamp`` is set (used inside registration, where a hard background
    edge would make the objective discontinuous).
    """
    if tuple(field.dims) != tuple(moving.dims):
        raise GridMismatchError(f"field grid {tuple(field.dims)} does not match volume {tuple(moving.dims)}")
    return moving.like(_interp.warp_scalar(moving.data, field.data, bool(clamp), moving.background))


def warp_labels(labels, field):
    """Nearest-neighbour pull-back of label ids through ``field``; outside the grid is 0."""
    dims = labels.dims
    if tuple(field.dims) != tuple(dims):
        raise GridMismatchError(f"field grid {tuple(field.dims)} does not match labels {tuple(dims)}")
    coords = np.indices(dims, dtype=np.float64) + np.moveaxis(field.data, -1, 0)
    idx = np.rint(coords).astype(np.int64)
    inside = np.ones(dims, dtype=bool)
    for a, n in enumerate(dims):
        inside &= (idx[a] >= 0) & (idx[a] < n)
        np.clip(idx[a], 0, n - 1, out=idx[a])
    out = labels.data[idx[0], idx[1], idx[2]]
    return labels.like(np.where(inside, out, 0))


def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(data, sigma, axes=(0, 1, 2)):
    """Separable Gaussian smoothing of a raw array along ``axes``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return data
    k = gaussian_kernel(sigma)
    out = np.asarray(data, dtype=np.float64)
    for axis in axes:
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def gaussian_smooth(vol, sigma):
    """Separable Gaussian smoothing, kernel truncated at ``ceil(3 sigma)`` voxels.

    ``sigma == 0`` returns the input object itself.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return vol
    return vol.like(smooth_array(vol.data, sigma))


def resample_to_isotropic(vol, target_spacing):
    """Trilinear resampling onto an isotropic grid spanning the same physical extent."""
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    t = float(target_spacing)
    new_dims = []
    for n, s in zip(vol.dims, vol.spacing):
        # tolerance keeps exact multiples from rounding up
        new_dims.append(max(1, int(math.ceil(n * s / t - 1e-9))))
    axes = [np.arange(m, dtype=np.float64) * t / s for m, s in zip(new_dims, vol.spacing)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    data = sample_clamped(vol.data, coords)
    return Volume3(data, (t, t, t), vol.background)


def downsample_array(data, axes=(0, 1, 2)):
    return smooth_array(data, 1.0, axes)[::2, ::2, ::2]


def downsample_by_two(vol):
    """Smooth with sigma 1 voxel then keep every second voxel; spacing doubles."""
    if min(vol.dims) < 2:
        raise DataError(f"cannot downsample dims {tuple(vol.dims)}: every axis needs >= 2 voxels")
    return Volume3(downsample_array(vol.data), tuple(2 * s for s in vol.spacing), vol.background)


def upsample_array(data, dims):
    """Trilinear upsampling of a level-``k+1`` array onto the level-``k`` grid ``dims``.

    Fine voxel ``i`` sits at coarse coordinate ``i / 2`` (inverse of ``[::2]`` decimation).
    """
    axes = [np.arange(n, dtype=np.float64) / 2.0 for n in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return sample_clamped(data, coords)


def pyramid(vol, levels):
    """Multi-resolution pyramid ordered coarse to fine (last entry is ``vol``)."""
    out = [vol]
    for _ in range(levels - 1):
        if min(out[-1].dims) < 2:
            break
        out.append(downsample_by_two(out[-1]))
    return out[::-1]
