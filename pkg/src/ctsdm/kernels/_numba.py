"""Numba-compiled projector kernels.

Every kernel here has a numpy twin in ``_numpy.py`` with the same signature.
Arrays are float64 and C-contiguous; the callers in ``ctsdm.geometry`` take
care of conversion.
"""
import math

import numpy as np
from numba import njit, prange

# Fixed number of partial images used by the scatter kernels, so the
# reduction order does not depend on the thread count.
SCATTER_CHUNKS = 16


@njit(cache=True, inline="always")
def _bilinear_get(img, row, col):
    n = img.shape[0]
    i0 = math.floor(row)
    j0 = math.floor(col)
    fr = row - i0
    fc = col - j0
    acc = 0.0
    if 0 <= i0 < n:
        if 0 <= j0 < n:
            acc += (1.0 - fr) * (1.0 - fc) * img[i0, j0]
        if 0 <= j0 + 1 < n:
            acc += (1.0 - fr) * fc * img[i0, j0 + 1]
    if 0 <= i0 + 1 < n:
        if 0 <= j0 < n:
            acc += fr * (1.0 - fc) * img[i0 + 1, j0]
        if 0 <= j0 + 1 < n:
            acc += fr * fc * img[i0 + 1, j0 + 1]
    return acc


@njit(cache=True, inline="always")
def _bilinear_put(img, row, col, value):
    n = img.shape[0]
    i0 = math.floor(row)
    j0 = math.floor(col)
    fr = row - i0
    fc = col - j0
    if 0 <= i0 < n:
        if 0 <= j0 < n:
            img[i0, j0] += (1.0 - fr) * (1.0 - fc) * value
        if 0 <= j0 + 1 < n:
            img[i0, j0 + 1] += (1.0 - fr) * fc * value
    if 0 <= i0 + 1 < n:
        if 0 <= j0 < n:
            img[i0 + 1, j0] += fr * (1.0 - fc) * value
        if 0 <= j0 + 1 < n:
            img[i0 + 1, j0 + 1] += fr * fc * value


@njit(cache=True, inline="always")
def _ray(cb, sb, u, src_dist, det_dist):
    # source at src_dist*(cb, sb); flat panel normal to the central ray
    sx = src_dist * cb
    sy = src_dist * sb
    px = sx - det_dist * cb - u * sb
    py = sy - det_dist * sb + u * cb
    dx = px - sx
    dy = py - sy
    norm = math.sqrt(dx * dx + dy * dy)
    return sx, sy, dx / norm, dy / norm


@njit(cache=True, parallel=True)
def forward_project(img, cos_b, sin_b, views, det_u, src_dist, det_dist,
                    pixel_mm, t0, step, nsteps, out):
    n = img.shape[0]
    half = 0.5 * (n - 1)
    ndet = det_u.shape[0]
    for vi in prange(views.shape[0]):
        v = views[vi]
        cb = cos_b[v]
        sb = sin_b[v]
        for j in range(ndet):
            sx, sy, dx, dy = _ray(cb, sb, det_u[j], src_dist, det_dist)
            acc = 0.0
            for k in range(nsteps):
                t = t0 + (k + 0.5) * step
                x = sx + t * dx
                y = sy + t * dy
                acc += _bilinear_get(img, half - y / pixel_mm, x / pixel_mm + half)
            out[v, j] = acc * step
    return out


@njit(cache=True, parallel=True)
def back_project(sino, cos_b, sin_b, views, det_u, src_dist, det_dist,
                 pixel_mm, t0, step, nsteps, n):
    half = 0.5 * (n - 1)
    ndet = det_u.shape[0]
    nviews = views.shape[0]
    nchunks = min(SCATTER_CHUNKS, nviews)
    parts = np.zeros((nchunks, n, n))
    for c in prange(nchunks):
        part = parts[c]
        for vi in range(c, nviews, nchunks):
            v = views[vi]
            cb = cos_b[v]
            sb = sin_b[v]
            for j in range(ndet):
                value = sino[v, j] * step
                if value == 0.0:
                    continue
                sx, sy, dx, dy = _ray(cb, sb, det_u[j], src_dist, det_dist)
                for k in range(nsteps):
                    t = t0 + (k + 0.5) * step
                    x = sx + t * dx
                    y = sy + t * dy
                    _bilinear_put(part, half - y / pixel_mm, x / pixel_mm + half, value)
    out = np.zeros((n, n))
    for c in range(nchunks):
        out += parts[c]
    return out


@njit(cache=True, parallel=True)
def weighted_backproject(q, cos_b, sin_b, views, src_dist, dp, pixel_mm, n, dbeta):
    """Pixel-driven fan-beam backprojection of filtered rows ``q``.

    ``q`` is sampled on the virtual detector through the isocenter with
    spacing ``dp``; each view contributes ``(R/L)**2 * q(p')`` where ``L`` is
    the source-to-pixel distance along the central ray.
    """
    half = 0.5 * (n - 1)
    ndet = q.shape[1]
    dhalf = 0.5 * (ndet - 1)
    out = np.zeros((n, n))
    for i in prange(n):
        y = (half - i) * pixel_mm
        for j in range(n):
            x = (j - half) * pixel_mm
            acc = 0.0
            for vi in range(views.shape[0]):
                v = views[vi]
                cb = cos_b[v]
                sb = sin_b[v]
                ell = src_dist - (x * cb + y * sb)
                p = src_dist * (y * cb - x * sb) / ell
                s = p / dp + dhalf
                s0 = math.floor(s)
                f = s - s0
                w = (src_dist / ell) ** 2
                val = 0.0
                if 0 <= s0 < ndet:
                    val += (1.0 - f) * q[v, s0]
                if 0 <= s0 + 1 < ndet:
                    val += f * q[v, s0 + 1]
                acc += w * val
            out[i, j] = acc * dbeta
    return out


@njit(cache=True, parallel=True)
def weighted_backproject_adjoint(img, cos_b, sin_b, views, src_dist, dp, pixel_mm, ndet, dbeta, out):
    n = img.shape[0]
    half = 0.5 * (n - 1)
    dhalf = 0.5 * (ndet - 1)
    for vi in prange(views.shape[0]):
        v = views[vi]
        cb = cos_b[v]
        sb = sin_b[v]
        for i in range(n):
            y = (half - i) * pixel_mm
            for j in range(n):
                x = (j - half) * pixel_mm
                ell = src_dist - (x * cb + y * sb)
                p = src_dist * (y * cb - x * sb) / ell
                s = p / dp + dhalf
                s0 = math.floor(s)
                f = s - s0
                value = (src_dist / ell) ** 2 * img[i, j] * dbeta
                if 0 <= s0 < ndet:
                    out[v, s0] += (1.0 - f) * value
                if 0 <= s0 + 1 < ndet:
                    out[v, s0 + 1] += f * value
    return out
