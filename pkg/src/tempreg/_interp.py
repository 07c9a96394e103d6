"""Compiled trilinear kernels used by warping and field composition.

All loops are sequential so results do not depend on scheduling.
"""
import numpy as np
from numba import njit

DOMAIN_TOL = 1e-6


@njit(cache=True, inline="always")
def _cell(c, n):
    # returns (i0, i1, frac) for a coordinate already clamped to [0, n-1]
    if n == 1:
        return 0, 0, 0.0
    i0 = int(np.floor(c))
    if i0 > n - 2:
        i0 = n - 2
    if i0 < 0:
        i0 = 0
    return i0, i0 + 1, c - i0


@njit(cache=True, inline="always")
def _clip(c, n):
    if c < 0.0:
        return 0.0
    if c > n - 1:
        return float(n - 1)
    return c


@njit(cache=True)
def _interp(data, px, py, pz):
    nx, ny, nz = data.shape
    x0, x1, fx = _cell(_clip(px, nx), nx)
    y0, y1, fy = _cell(_clip(py, ny), ny)
    z0, z1, fz = _cell(_clip(pz, nz), nz)
    # weight form is exact on grid nodes (fraction 0 or 1)
    gx = 1.0 - fx
    gy = 1.0 - fy
    c00 = gx * data[x0, y0, z0] + fx * data[x1, y0, z0]
    c10 = gx * data[x0, y1, z0] + fx * data[x1, y1, z0]
    c01 = gx * data[x0, y0, z1] + fx * data[x1, y0, z1]
    c11 = gx * data[x0, y1, z1] + fx * data[x1, y1, z1]
    c0 = gy * c00 + fy * c10
    c1 = gy * c01 + fy * c11
    return (1.0 - fz) * c0 + fz * c1


@njit(cache=True, inline="always")
def _inside(px, py, pz, nx, ny, nz):
    return (px >= -DOMAIN_TOL and px <= nx - 1 + DOMAIN_TOL
            and py >= -DOMAIN_TOL and py <= ny - 1 + DOMAIN_TOL
            and pz >= -DOMAIN_TOL and pz <= nz - 1 + DOMAIN_TOL)


@njit(cache=True)
def sample_points(data, coords, clamp, background):
    """Trilinear values at arbitrary points ``coords`` of shape (3, m)."""
    nx, ny, nz = data.shape
    m = coords.shape[1]
    out = np.empty(m)
    for q in range(m):
        px = coords[0, q]
        py = coords[1, q]
        pz = coords[2, q]
        if clamp or _inside(px, py, pz, nx, ny, nz):
            out[q] = _interp(data, px, py, pz)
        else:
            out[q] = background
    return out


@njit(cache=True)
def warp_scalar(data, disp, clamp, background):
    """Pull-back warp of ``data`` through displacement ``disp`` (nx, ny, nz, 3)."""
    nx, ny, nz = data.shape
    out = np.empty((nx, ny, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + disp[i, j, k, 0]
                py = j + disp[i, j, k, 1]
                pz = k + disp[i, j, k, 2]
                if clamp or _inside(px, py, pz, nx, ny, nz):
                    out[i, j, k] = _interp(data, px, py, pz)
                else:
                    out[i, j, k] = background
    return out


@njit(cache=True)
def warp_scalar_grad(data, disp, clamp, background):
    """Pull-back warp plus the exact derivative of the interpolant w.r.t. the sample point."""
    nx, ny, nz = data.shape
    out = np.empty((nx, ny, nz))
    grad = np.zeros((nx, ny, nz, 3))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = i + disp[i, j, k, 0]
                py = j + disp[i, j, k, 1]
                pz = k + disp[i, j, k, 2]
                if not clamp and not _inside(px, py, pz, nx, ny, nz):
                    out[i, j, k] = background
                    continue
                x0, x1, fx = _cell(_clip(px, nx), nx)
                y0, y1, fy = _cell(_clip(py, ny), ny)
                z0, z1, fz = _cell(_clip(pz, nz), nz)
                c000 = data[x0, y0, z0]
                c100 = data[x1, y0, z0]
                c010 = data[x0, y1, z0]
                c110 = data[x1, y1, z0]
                c001 = data[x0, y0, z1]
                c101 = data[x1, y0, z1]
                c011 = data[x0, y1, z1]
                c111 = data[x1, y1, z1]
                gx = 1.0 - fx
                gy = 1.0 - fy
                c00 = gx * c000 + fx * c100
                c10 = gx * c010 + fx * c110
                c01 = gx * c001 + fx * c101
                c11 = gx * c011 + fx * c111
                c0 = gy * c00 + fy * c10
                c1 = gy * c01 + fy * c11
                out[i, j, k] = (1.0 - fz) * c0 + fz * c1
                # outside the grid (clamp mode) the interpolant is flat along that axis
                if nx > 1 and px >= 0.0 and px <= nx - 1:
                    d0 = gy * (c100 - c000) + fy * (c110 - c010)
                    d1 = gy * (c101 - c001) + fy * (c111 - c011)
                    grad[i, j, k, 0] = (1.0 - fz) * d0 + fz * d1
                if ny > 1 and py >= 0.0 and py <= ny - 1:
                    grad[i, j, k, 1] = (1.0 - fz) * (c10 - c00) + fz * (c11 - c01)
                if nz > 1 and pz >= 0.0 and pz <= nz - 1:
                    grad[i, j, k, 2] = c1 - c0
    return out, grad


@njit(cache=True)
def compose_fields(outer, inner):
    """Displacement of ``(x + outer) o (x + inner)``; outer is sampled with edge clamping."""
    nx, ny, nz = inner.shape[0], inner.shape[1], inner.shape[2]
    out = np.empty_like(inner)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dx = inner[i, j, k, 0]
                dy = inner[i, j, k, 1]
                dz = inner[i, j, k, 2]
                px = _clip(i + dx, nx)
                py = _clip(j + dy, ny)
                pz = _clip(k + dz, nz)
                x0, x1, fx = _cell(px, nx)
                y0, y1, fy = _cell(py, ny)
                z0, z1, fz = _cell(pz, nz)
                w000 = (1 - fx) * (1 - fy) * (1 - fz)
                w100 = fx * (1 - fy) * (1 - fz)
                w010 = (1 - fx) * fy * (1 - fz)
                w110 = fx * fy * (1 - fz)
                w001 = (1 - fx) * (1 - fy) * fz
                w101 = fx * (1 - fy) * fz
                w011 = (1 - fx) * fy * fz
                w111 = fx * fy * fz
                for c in range(3):
                    val = (w000 * outer[x0, y0, z0, c] + w100 * outer[x1, y0, z0, c]
                           + w010 * outer[x0, y1, z0, c] + w110 * outer[x1, y1, z0, c]
                           + w001 * outer[x0, y0, z1, c] + w101 * outer[x1, y0, z1, c]
                           + w011 * outer[x0, y1, z1, c] + w111 * outer[x1, y1, z1, c])
                    out[i, j, k, c] = inner[i, j, k, c] + val
    return out
