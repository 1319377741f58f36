"""Fan-beam CT geometry: forward projection, its adjoint, and FBP.

Coordinates are in millimetres with the rotation centre at the origin.
Image row 0 is the top edge (largest y). The source sits at
``R * (cos b, sin b)`` for view angle ``b = 2*pi*i/v`` and the flat detector
panel is perpendicular to the central ray at distance ``D`` from the source.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from . import kernels

FILTERS = ("ram-lak", "hann")


@dataclass(frozen=True)
class FanBeamGeometry:
    num_views: int = 488
    num_detectors: int = 736
    source_to_detector_mm: float = 1000.0
    source_to_center_mm: float = 512.0
    image_size_px: int = 256
    pixel_spacing_mm: float = 1.0

    def __post_init__(self):
        if self.num_views < 1 or self.num_detectors < 2 or self.image_size_px < 1:
            raise ValueError("views, detectors and image size must be positive")
        if self.pixel_spacing_mm <= 0:
            raise ValueError("pixel spacing must be positive")
        if not self.source_to_detector_mm > self.source_to_center_mm > 0:
            raise ValueError("need source_to_detector_mm > source_to_center_mm > 0")
        if self.fov_radius_mm >= self.source_to_center_mm:
            raise ValueError("image does not fit inside the source orbit")

    @classmethod
    def desk(cls) -> "FanBeamGeometry":
        """64x64 / 180 views / 128 bins, same physical field of view as the default."""
        return cls(num_views=180, num_detectors=128, image_size_px=64, pixel_spacing_mm=4.0)

    @classmethod
    def from_dict(cls, data: dict) -> "FanBeamGeometry":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    @property
    def fov_radius_mm(self) -> float:
        # half the image diagonal
        return self.image_size_px * self.pixel_spacing_mm / math.sqrt(2.0)

    @property
    def detector_spacing_mm(self) -> float:
        # panel subtends the whole image diagonal from every angle
        fan_half = math.asin(self.fov_radius_mm / self.source_to_center_mm)
        half_width = self.source_to_detector_mm * math.tan(fan_half)
        return 2.0 * half_width / (self.num_detectors - 1)

    @property
    def virtual_detector_spacing_mm(self) -> float:
        """Detector spacing rescaled to the isocentre."""
        return self.detector_spacing_mm * self.source_to_center_mm / self.source_to_detector_mm

    @cached_property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.num_views) / self.num_views

    @cached_property
    def detector_positions(self) -> np.ndarray:
        d = self.num_detectors
        return (np.arange(d) - 0.5 * (d - 1)) * self.detector_spacing_mm

    @cached_property
    def _trig(self) -> tuple[np.ndarray, np.ndarray]:
        return np.cos(self.angles), np.sin(self.angles)

    @property
    def ray_step_mm(self) -> float:
        return 0.5 * self.pixel_spacing_mm

    @property
    def ray_samples(self) -> int:
        return int(math.ceil(2.0 * self.fov_radius_mm / self.ray_step_mm))


@dataclass
class Sinogram:
    """Full-shape (views x detectors) measurements with an optional view mask.

    Rows outside ``mask`` must be exactly zero; ``mask=None`` means all views.
    """

    values: np.ndarray
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"sinogram must be 2-D, got shape {self.values.shape}")
        if self.mask is not None:
            self.mask = check_mask(self.mask, self.values.shape[0])
            off = np.ones(self.values.shape[0], dtype=bool)
            off[self.mask] = False
            if np.any(self.values[off] != 0):
                raise ValueError("sinogram has nonzero rows outside its mask")

    @property
    def num_views(self) -> int:
        return self.values.shape[0]

    @property
    def measured(self) -> np.ndarray:
        if self.mask is None:
            return np.arange(self.num_views)
        return self.mask

    def masked(self, mask) -> "Sinogram":
        """Zero every row outside ``mask`` and attach it."""
        mask = check_mask(mask, self.num_views)
        out = np.zeros_like(self.values)
        out[mask] = self.values[mask]
        return Sinogram(out, mask)


def check_mask(mask, num_views: int) -> np.ndarray:
    """Validate view indices (0-based) and return them sorted as int64."""
    raw = np.asarray(mask, dtype=np.int64).ravel()
    mask = np.unique(raw)
    if mask.size != raw.size:
        raise ValueError("duplicate view indices")
    if mask.size == 0:
        raise ValueError("empty view mask")
    if mask[0] < 0 or mask[-1] >= num_views:
        raise ValueError(f"view index out of range [0, {num_views})")
    return mask


def as_image(data) -> np.ndarray:
    """Square float64 image clamped to [0, 1]."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"image must be square 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite values")
    return np.clip(img, 0.0, 1.0)


def _check_image(image, geom: FanBeamGeometry) -> np.ndarray:
    img = np.ascontiguousarray(image, dtype=np.float64)
    n = geom.image_size_px
    if img.shape != (n, n):
        raise ValueError(f"image shape {img.shape} does not match geometry ({n}, {n})")
    return img


def _check_sino(values, geom: FanBeamGeometry) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape != geom.shape:
        raise ValueError(f"sinogram shape {values.shape} does not match geometry {geom.shape}")
    return values


def _backend(name):
    return kernels.get_backend(name)


def forward_project(image, geom: FanBeamGeometry, mask=None, *, backend=None) -> Sinogram:
    """Ray-driven line integrals (mm units); only rows in ``mask`` are traced."""
    img = _check_image(image, geom)
    views = np.arange(geom.num_views) if mask is None else check_mask(mask, geom.num_views)
    cos_b, sin_b = geom._trig
    out = np.zeros(geom.shape)
    _backend(backend).forward_project(
        img, cos_b, sin_b, views, geom.detector_positions,
        geom.source_to_center_mm, geom.source_to_detector_mm, geom.pixel_spacing_mm,
        geom.source_to_center_mm - geom.fov_radius_mm, geom.ray_step_mm, geom.ray_samples, out,
    )
    return Sinogram(out, None if mask is None else views)


def back_project(sino: Sinogram | np.ndarray, geom: FanBeamGeometry, *, backend=None) -> np.ndarray:
    """Exact adjoint of :func:`forward_project` (unclamped)."""
    if isinstance(sino, Sinogram):
        values, views = sino.values, sino.measured
    else:
        values, views = sino, np.arange(geom.num_views)
    values = _check_sino(values, geom)
    cos_b, sin_b = geom._trig
    return _backend(backend).back_project(
        values, cos_b, sin_b, views, geom.detector_positions,
        geom.source_to_center_mm, geom.source_to_detector_mm, geom.pixel_spacing_mm,
        geom.source_to_center_mm - geom.fov_radius_mm, geom.ray_step_mm, geom.ray_samples,
        geom.image_size_px,
    )


def ramp_response(num_detectors: int, spacing: float, window: str = "ram-lak") -> np.ndarray:
    """Real, even frequency response of the (halved) band-limited ramp filter.

    Built from the spatial Ram-Lak kernel on a zero-padded grid so the
    filter carries no DC offset; the 1/2 accounts for the full 2*pi scan.
    """
    if window not in FILTERS:
        raise ValueError(f"unknown filter {window!r}; choose from {FILTERS}")
    nfft = 1 << int(math.ceil(math.log2(2 * num_detectors)))
    k = np.arange(nfft)
    lag = np.where(k <= nfft // 2, k, k - nfft)
    h = np.zeros(nfft)
    h[lag == 0] = 1.0 / (4.0 * spacing**2)
    odd = lag % 2 == 1
    h[odd] = -1.0 / (np.pi * lag[odd] * spacing) ** 2
    response = np.real(np.fft.fft(h)) * spacing
    if window == "hann":
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * np.fft.fftfreq(nfft)))
    return 0.5 * response


def _filter_rows(rows: np.ndarray, response: np.ndarray) -> np.ndarray:
    nfft = response.shape[0]
    spec = np.fft.rfft(rows, n=nfft, axis=1)
    return np.fft.irfft(spec * response[: nfft // 2 + 1], n=nfft, axis=1)[:, : rows.shape[1]]


def _cosine_weights(geom: FanBeamGeometry) -> np.ndarray:
    p = (np.arange(geom.num_detectors) - 0.5 * (geom.num_detectors - 1)) * geom.virtual_detector_spacing_mm
    r = geom.source_to_center_mm
    return r / np.sqrt(r * r + p * p)


def fbp_linear(values, geom: FanBeamGeometry, filter: str = "ram-lak", views=None, *, backend=None) -> np.ndarray:
    """Linear part of FBP: cosine weight, ramp filter, weighted backprojection.

    No clamping and no sparse-view rescaling; rows not listed in ``views``
    are skipped (they are assumed to be zero).
    """
    values = _check_sino(values, geom)
    views = np.arange(geom.num_views) if views is None else np.asarray(views, dtype=np.int64)
    response = ramp_response(geom.num_detectors, geom.virtual_detector_spacing_mm, filter)
    q = np.zeros_like(values)
    q[views] = _filter_rows(values[views] * _cosine_weights(geom), response)
    cos_b, sin_b = geom._trig
    return _backend(backend).weighted_backproject(
        q, cos_b, sin_b, views, geom.source_to_center_mm, geom.virtual_detector_spacing_mm,
        geom.pixel_spacing_mm, geom.image_size_px, 2.0 * np.pi / geom.num_views,
    )


def fbp_adjoint(image, geom: FanBeamGeometry, filter: str = "ram-lak", *, backend=None) -> np.ndarray:
    """Adjoint of :func:`fbp_linear` (full view set)."""
    img = _check_image(image, geom)
    cos_b, sin_b = geom._trig
    q = np.zeros(geom.shape)
    _backend(backend).weighted_backproject_adjoint(
        img, cos_b, sin_b, np.arange(geom.num_views), geom.source_to_center_mm,
        geom.virtual_detector_spacing_mm, geom.pixel_spacing_mm, geom.num_detectors,
        2.0 * np.pi / geom.num_views, q,
    )
    # the filter matrix is symmetric Toeplitz, hence self-adjoint
    response = ramp_response(geom.num_detectors, geom.virtual_detector_spacing_mm, filter)
    return _filter_rows(q, response) * _cosine_weights(geom)


def fbp(sino: Sinogram | np.ndarray, geom: FanBeamGeometry, filter: str = "ram-lak", *, backend=None) -> np.ndarray:
    """Fan-beam FBP clamped to [0, 1].

    A masked sinogram is reconstructed zero-filled and rescaled by
    ``v / |mask|`` so intensities stay comparable across view counts.
    """
    if not isinstance(sino, Sinogram):
        sino = Sinogram(sino)
    _check_sino(sino.values, geom)
    views = sino.measured
    img = fbp_linear(sino.values, geom, filter, views=views, backend=backend)
    if sino.mask is not None:
        img *= geom.num_views / views.size
    return np.clip(img, 0.0, 1.0)
