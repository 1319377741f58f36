"""Pure-numpy fallback for the projector kernels (vectorized per view)."""
import numpy as np


def _ray_points(cb, sb, det_u, src_dist, det_dist, t0, step, nsteps):
    sx, sy = src_dist * cb, src_dist * sb
    px = sx - det_dist * cb - det_u * sb
    py = sy - det_dist * sb + det_u * cb
    dx, dy = px - sx, py - sy
    norm = np.hypot(dx, dy)
    dx, dy = dx / norm, dy / norm
    t = t0 + (np.arange(nsteps) + 0.5) * step
    return sx + dx[:, None] * t, sy + dy[:, None] * t


def _bilinear_taps(row, col, n):
    """Yield (flat_index, weight) arrays for the four bilinear neighbours."""
    i0 = np.floor(row).astype(np.int64)
    j0 = np.floor(col).astype(np.int64)
    fr = row - i0
    fc = col - j0
    for di, dj, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
        yield np.where(ok, ii * n + jj, 0), np.where(ok, w, 0.0)


def forward_project(img, cos_b, sin_b, views, det_u, src_dist, det_dist,
                    pixel_mm, t0, step, nsteps, out):
    n = img.shape[0]
    half = 0.5 * (n - 1)
    flat = img.ravel()
    for v in views:
        x, y = _ray_points(cos_b[v], sin_b[v], det_u, src_dist, det_dist, t0, step, nsteps)
        acc = np.zeros_like(x)
        for idx, w in _bilinear_taps(half - y / pixel_mm, x / pixel_mm + half, n):
            acc += w * flat[idx]
        out[v] = acc.sum(axis=1) * step
    return out


def back_project(sino, cos_b, sin_b, views, det_u, src_dist, det_dist,
                 pixel_mm, t0, step, nsteps, n):
    half = 0.5 * (n - 1)
    out = np.zeros(n * n)
    for v in views:
        x, y = _ray_points(cos_b[v], sin_b[v], det_u, src_dist, det_dist, t0, step, nsteps)
        value = (sino[v] * step)[:, None]
        for idx, w in _bilinear_taps(half - y / pixel_mm, x / pixel_mm + half, n):
            out += np.bincount(idx.ravel(), weights=(w * value).ravel(), minlength=n * n)
    return out.reshape(n, n)


def _pixel_detector_coords(cb, sb, src_dist, dp, pixel_mm, n, ndet):
    half = 0.5 * (n - 1)
    coords = (np.arange(n) - half) * pixel_mm
    x = coords[None, :]
    y = -coords[:, None]
    ell = src_dist - (x * cb + y * sb)
    p = src_dist * (y * cb - x * sb) / ell
    s = p / dp + 0.5 * (ndet - 1)
    s0 = np.floor(s).astype(np.int64)
    return s0, s - s0, (src_dist / ell) ** 2


def weighted_backproject(q, cos_b, sin_b, views, src_dist, dp, pixel_mm, n, dbeta):
    ndet = q.shape[1]
    out = np.zeros((n, n))
    for v in views:
        s0, f, w = _pixel_detector_coords(cos_b[v], sin_b[v], src_dist, dp, pixel_mm, n, ndet)
        row = q[v]
        val = np.zeros((n, n))
        for idx, wt in ((s0, 1.0 - f), (s0 + 1, f)):
            ok = (idx >= 0) & (idx < ndet)
            val += np.where(ok, wt * row[np.where(ok, idx, 0)], 0.0)
        out += w * val
    return out * dbeta


def weighted_backproject_adjoint(img, cos_b, sin_b, views, src_dist, dp, pixel_mm, ndet, dbeta, out):
    n = img.shape[0]
    for v in views:
        s0, f, w = _pixel_detector_coords(cos_b[v], sin_b[v], src_dist, dp, pixel_mm, n, ndet)
        value = w * img * dbeta
        for idx, wt in ((s0, 1.0 - f), (s0 + 1, f)):
            ok = (idx >= 0) & (idx < ndet)
            out[v] += np.bincount(idx[ok], weights=(wt * value)[ok], minlength=ndet)[:ndet]
    return out
