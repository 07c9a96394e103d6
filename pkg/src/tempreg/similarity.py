"""Local (windowed) normalized cross-correlation and its analytic gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .deform import VelocityField
from .errors import GridMismatchError
from .volume import check_same_grid, warp_with_gradient


@dataclass(frozen=True)
class CcConfig:
    """Window half-width ``radius`` (window is ``2*radius+1`` wide) and variance floor."""

    radius: int = 2
    epsilon: float = 1e-5

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"cc radius must be an integer >= 1, got {self.radius}")
        if not self.epsilon > 0:
            raise ValueError(f"cc epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "radius", int(self.radius))
        object.__setattr__(self, "epsilon", float(self.epsilon))


def box_sum(a, radius):
    """Sum over the cubic window around each voxel; voxels outside the grid count as 0."""
    size = 2 * radius + 1
    out = np.asarray(a, dtype=np.float64)
    for axis in range(3):
        out = ndimage.uniform_filter1d(out, size, axis=axis, mode="constant", cval=0.0)
    return out * size**3


class LocalCC:
    """Local CC against a fixed image; the fixed image's window sums are computed once."""

    def __init__(self, fixed, cfg=CcConfig()):
        self.cfg = cfg
        self.shape = fixed.shape
        r = cfg.radius
        self.f = fixed
        self.n = np.rint(box_sum(np.ones(fixed.shape), r))  # exact integer counts
        self.sf = box_sum(fixed, r)
        self.fbar = self.sf / self.n
        self.B = box_sum(fixed * fixed, r) - self.sf * self.fbar

    def _terms(self, w):
        r = self.cfg.radius
        sw = box_sum(w, r)
        wbar = sw / self.n
        A = box_sum(self.f * w, r) - self.sf * wbar
        C = box_sum(w * w, r) - sw * wbar
        eps = self.cfg.epsilon
        valid = (self.B / self.n >= eps) & (C / self.n >= eps)
        BC = np.where(valid, self.B * C, 1.0)
        cc = np.clip(np.where(valid, A**2 / BC, 0.0), 0.0, 1.0)
        return cc, A, C, BC, valid, wbar

    def map(self, w):
        return self._terms(w)[0]

    def value_and_grad(self, w):
        """Total and its derivative with respect to every voxel of ``w``."""
        cc, A, C, BC, valid, wbar = self._terms(w)
        r = self.cfg.radius
        alpha = np.where(valid, 2.0 * A / BC, 0.0)
        beta = np.where(valid, 2.0 * A**2 / (BC * np.where(valid, C, 1.0)), 0.0)
        g = (self.f * box_sum(alpha, r) - box_sum(alpha * self.fbar, r)
             - w * box_sum(beta, r) + box_sum(beta * wbar, r))
        return float(cc.mean()), g / w.size


def local_cc(fixed, warped, cfg=CcConfig()):
    """Mean squared local correlation and its per-voxel map.

    Windows whose variance falls below ``cfg.epsilon`` in either image count as 0.
    The registration dissimilarity is ``-total``.
    """
    check_same_grid(fixed, warped, "image grids")
    cc = LocalCC(fixed.data, cfg).map(warped.data)
    return float(cc.mean()), fixed.like(cc)


def cc_value_and_gradient(fixed, moving, field, cfg=CcConfig(), clamp=False, metric=None):
    """``(total, warped, grad)`` for ``moving`` pulled back through ``field``.

    ``grad[..., k]`` is the derivative of the total with respect to component ``k``
    of the displacement at each voxel (ascent direction on the correlation).
    ``metric`` may carry a prebuilt :class:`LocalCC` for ``fixed``.
    """
    check_same_grid(fixed, moving, "image grids")
    if tuple(field.dims) != tuple(fixed.dims):
        raise GridMismatchError(f"field grid {tuple(field.dims)} does not match image {tuple(fixed.dims)}")
    w, dw_dx = warp_with_gradient(moving, field, clamp)
    metric = metric or LocalCC(fixed.data, cfg)
    total, g = metric.value_and_grad(w)
    grad = dw_dx * g[..., None]
    return total, moving.like(w), grad


def cc_gradient(fixed, moving, current_field, cfg=CcConfig(), clamp=False):
    """Derivative of the local-CC total with respect to the pull-back displacement."""
    _, _, grad = cc_value_and_gradient(fixed, moving, current_field, cfg, clamp)
    return VelocityField(grad, fixed.spacing)
