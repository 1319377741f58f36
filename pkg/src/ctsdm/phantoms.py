"""Analytic ellipse phantoms rasterized on a square grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees); the
# modified (Toft) Shepp-Logan table, which already spans [0, 1].
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def rasterize(ellipses, n: int, supersample: int = 4) -> np.ndarray:
    """Sum of uniform ellipses on [-1, 1]^2, averaged over sub-pixel samples."""
    m = n * supersample
    c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    x = c[None, :]
    y = -c[:, None]
    img = np.zeros((m, m))
    for value, a, b, x0, y0, deg in ellipses:
        th = np.deg2rad(deg)
        ct, st = np.cos(th), np.sin(th)
        xr = (x - x0) * ct + (y - y0) * st
        yr = -(x - x0) * st + (y - y0) * ct
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    return img.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def shepp_logan(n: int, supersample: int = 4) -> np.ndarray:
    if n < 1:
        raise ValueError("phantom size must be positive")
    img = rasterize(SHEPP_LOGAN, n, supersample)
    # cancelling ellipses (+0.2 - 0.2) leave rounding noise around zero
    img[np.abs(img) < 1e-12] = 0.0
    lo, hi = img.min(), img.max()
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "random-ellipses"
    size_px: int = 64
    num_ellipses: int = 8
    intensity_range: tuple[float, float] = (0.1, 0.5)
    seed: int = 0


def random_phantom(spec: PhantomSpec) -> np.ndarray:
    """Body ellipse plus ``num_ellipses - 1`` random inserts, clamped to [0, 1]."""
    if spec.kind == "shepp-logan":
        return shepp_logan(spec.size_px)
    if spec.kind != "random-ellipses":
        raise ValueError(f"unknown phantom kind {spec.kind!r}")
    if spec.size_px < 1 or spec.num_ellipses < 1:
        raise ValueError("size and ellipse count must be positive")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.intensity_range
    body_a, body_b = rng.uniform(0.55, 0.85, size=2)
    ellipses = [(rng.uniform(lo, hi), body_a, body_b, *rng.uniform(-0.05, 0.05, size=2), rng.uniform(0, 180))]
    for _ in range(spec.num_ellipses - 1):
        r = rng.uniform(0.0, 0.55)
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append((
            rng.uniform(-hi, hi),
            *rng.uniform(0.04, 0.3, size=2),
            r * np.cos(phi) * body_a,
            r * np.sin(phi) * body_b,
            rng.uniform(0, 180),
        ))
    return np.clip(rasterize(ellipses, spec.size_px), 0.0, 1.0)


def phantom_set(count: int, size_px: int = 64, seed: int = 0, **kwargs) -> list[np.ndarray]:
    """``count`` random phantoms; image ``i`` uses seed ``seed * 100003 + i``."""
    return [
        random_phantom(PhantomSpec(size_px=size_px, seed=seed * 100003 + i, **kwargs))
        for i in range(count)
    ]
