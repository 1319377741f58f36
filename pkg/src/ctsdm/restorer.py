"""Restoration operators: sinogram restorer, image refiner and analytic baselines.

A *restoration operator* is any callable ``op(values, mask, t) -> ndarray``
taking a zero-filled (views x detectors) array, the measured view indices
and the diffusion step, and returning a full-view estimate. Trained models
expose one through :meth:`SinogramRestorer.operator`.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import Sinogram, check_mask

CHECKPOINT_MAGIC = b"CTSM"
CHECKPOINT_VERSION = 1


def step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) step indices, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SinoConv(nn.Module):
    """3x3 convolution, circular along views (rows) and zero-padded along detectors."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=(0, 1))

    def forward(self, x):
        return self.conv(F.pad(x, (0, 0, 1, 1), mode="circular"))


class _Level(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, stride: int):
        super().__init__()
        self.conv1 = SinoConv(c_in, c_out, stride)
        self.conv2 = SinoConv(c_out, c_out)
        self.emb = nn.Linear(emb_dim, c_out)

    def forward(self, x, emb):
        h = F.silu(self.conv1(x) + self.emb(emb)[:, :, None, None])
        return F.silu(self.conv2(h))


def interpolation_weights(measured_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbour indices and weights for circular linear interpolation across views.

    Row ``i`` is approximated by ``(1 - w[i]) * row[lo[i]] + w[i] * row[hi[i]]``;
    measured rows map onto themselves with ``w = 0``.
    """
    v = measured_rows.size
    mask = np.flatnonzero(measured_rows)
    if mask.size == 0:
        zeros = np.zeros(v, dtype=np.int64)
        return zeros, zeros, np.zeros(v)
    views = np.arange(v)
    pos = np.searchsorted(mask, views, side="right")
    lo = mask[(pos - 1) % mask.size]
    hi = mask[pos % mask.size]
    gap = (hi - lo) % v
    w = ((views - lo) % v) / np.where(gap == 0, v, gap)
    return lo, hi, w


def view_interpolate(values: torch.Tensor, planes: torch.Tensor) -> torch.Tensor:
    """Parameter-free angular interpolation of (B, V, D) zero-filled sinograms."""
    rows = (planes[:, :, 0] > 0.5).cpu().numpy()
    out = []
    for b in range(values.shape[0]):
        lo, hi, w = interpolation_weights(rows[b])
        w = torch.as_tensor(w, dtype=values.dtype)[:, None]
        out.append((1.0 - w) * values[b, lo] + w * values[b, hi])
    return torch.stack(out)


class SinogramRestorer(nn.Module):
    """Three-level convolutional encoder-decoder with step embedding.

    Input channels are the zero-filled sinogram (divided by ``sino_scale``)
    and a binary plane marking measured rows. A parameter-free angular
    interpolation of the sinogram is appended as a third feature plane before
    the encoder. The output is a skip path plus a learned residual whose head
    starts at zero. With ``skip="identity"`` the skip is the input sinogram
    itself; with ``skip="interp"`` it is the interpolated sinogram, so an
    untrained model reproduces :func:`interp_restore`.
    """

    def __init__(self, total_steps: int, widths=(16, 32, 64), emb_dim: int = 32,
                 sino_scale: float = 1.0, skip: str = "identity"):
        super().__init__()
        if len(widths) != 3:
            raise ValueError("restorer needs exactly three level widths")
        if skip not in ("identity", "interp"):
            raise ValueError("skip must be 'identity' or 'interp'")
        self.skip = skip
        self.total_steps = int(total_steps)
        self.widths = tuple(int(w) for w in widths)
        self.emb_dim = int(emb_dim)
        self.sino_scale = float(sino_scale)
        w0, w1, w2 = self.widths
        self.enc0 = _Level(3, w0, emb_dim, 1)
        self.enc1 = _Level(w0, w1, emb_dim, 2)
        self.enc2 = _Level(w1, w2, emb_dim, 2)
        self.dec1 = SinoConv(w2 + w1, w1)
        self.dec0 = SinoConv(w1 + w0, w0)
        self.head = SinoConv(w0, 1)
        nn.init.zeros_(self.head.conv.weight)
        nn.init.zeros_(self.head.conv.bias)

    def descriptor(self) -> dict:
        return {
            "type": "SinogramRestorer",
            "total_steps": self.total_steps,
            "widths": list(self.widths),
            "emb_dim": self.emb_dim,
            "sino_scale": self.sino_scale,
            "skip": self.skip,
        }

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``x``: (B, 2, V, D) normalized input; returns (B, 1, V, D) normalized estimate."""
        emb = step_embedding(t.to(x.dtype), self.emb_dim)
        interp = view_interpolate(x[:, 0], x[:, 1])[:, None]
        h0 = self.enc0(torch.cat([x, interp], dim=1), emb)
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(h1, emb)
        u1 = F.interpolate(h2, size=h1.shape[-2:], mode="bilinear", align_corners=False)
        u1 = F.silu(self.dec1(torch.cat([u1, h1], dim=1)))
        u0 = F.interpolate(u1, size=h0.shape[-2:], mode="bilinear", align_corners=False)
        u0 = F.silu(self.dec0(torch.cat([u0, h0], dim=1)))
        base = interp if self.skip == "interp" else x[:, :1]
        return base + self.head(u0)

    def make_input(self, values, masks) -> torch.Tensor:
        """Stack normalized sinograms and mask planes; ``values`` is (B, V, D)."""
        values = torch.as_tensor(values, dtype=self.dtype)
        planes = torch.zeros_like(values)
        for b, mask in enumerate(masks):
            planes[b, mask] = 1.0
        return torch.stack([values / self.sino_scale, planes], dim=1)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.conv.weight.dtype

    @torch.no_grad()
    def predict(self, values: np.ndarray, mask, t: int) -> np.ndarray:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        mask = check_mask(mask, values.shape[0])
        x = self.make_input(values[None], [mask])
        out = self(x, torch.tensor([float(t)], dtype=self.dtype))
        return out[0, 0].double().numpy() * self.sino_scale

    def operator(self):
        return self.predict


class ImageRefiner(nn.Module):
    """One residual block (two 3x3 convolutions and a skip); starts as identity."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = int(width)
        self.conv1 = nn.Conv2d(1, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def descriptor(self) -> dict:
        return {"type": "ImageRefiner", "width": self.width}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.silu(self.conv1(x)))


def _check_step(t: int, total_steps: int | None) -> None:
    if t < 0 or (total_steps is not None and t > total_steps):
        raise ValueError(f"step {t} outside [0, {total_steps}]")


def restore(model, y_t: Sinogram, t: int, mask=None) -> Sinogram:
    """Full-view estimate from a zero-filled sinogram at step ``t``.

    ``model`` is a :class:`SinogramRestorer` or any restoration operator.
    """
    mask = y_t.measured if mask is None else check_mask(mask, y_t.num_views)
    if isinstance(model, SinogramRestorer):
        return Sinogram(model.predict(y_t.values, mask, t))
    _check_step(t, None)
    return Sinogram(np.asarray(model(y_t.values, mask, t), dtype=np.float64))


def oracle_restore(truth: Sinogram | np.ndarray):
    """Restoration operator that ignores its input and returns ``truth``."""
    values = np.array(truth.values if isinstance(truth, Sinogram) else truth, dtype=np.float64)

    def op(y_values, mask, t):
        if np.shape(y_values) != values.shape:
            raise ValueError(f"shape {np.shape(y_values)} does not match truth {values.shape}")
        return values.copy()

    return op


def interp_restore(y_t: Sinogram, mask=None) -> Sinogram:
    """Fill missing rows by circular linear interpolation in view angle."""
    v = y_t.num_views
    mask = y_t.measured if mask is None else check_mask(mask, v)
    if mask.size < 2:
        raise ValueError("interpolation needs at least two measured views")
    rows = np.zeros(v, dtype=bool)
    rows[mask] = True
    lo, hi, w = interpolation_weights(rows)
    out = (1.0 - w)[:, None] * y_t.values[lo] + w[:, None] * y_t.values[hi]
    out[mask] = y_t.values[mask]
    return Sinogram(out)


def interp_operator(y_values, mask, t):
    """:func:`interp_restore` in restoration-operator form."""
    return interp_restore(Sinogram(y_values), mask).values


@torch.no_grad()
def refine(model: ImageRefiner, img: np.ndarray) -> np.ndarray:
    x = torch.as_tensor(np.asarray(img), dtype=model.conv1.weight.dtype)[None, None]
    return np.clip(model(x)[0, 0].double().numpy(), 0.0, 1.0)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, restorer: SinogramRestorer, refiner: ImageRefiner, extra: dict | None = None) -> Path:
    """Write a CTSM file: magic, u16 version, u32 descriptor length, JSON, f32 blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, layout = [], {}
    for key, model in (("restorer", restorer), ("refiner", refiner)):
        state = model.state_dict()
        layout[key] = {**model.descriptor(), "params": [[k, list(v.shape)] for k, v in state.items()]}
        blobs.extend(v.detach().cpu().numpy().astype("<f4").tobytes() for v in state.values())
    if extra:
        layout["extra"] = extra
    desc = json.dumps(layout, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[SinogramRestorer, ImageRefiner, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CTSM checkpoint")
    version, size = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    layout = json.loads(raw[10 : 10 + size])
    r = layout["restorer"]
    restorer = SinogramRestorer(r["total_steps"], r["widths"], r["emb_dim"], r["sino_scale"], r.get("skip", "identity"))
    refiner = ImageRefiner(layout["refiner"]["width"])
    offset = 10 + size
    for key, model in (("restorer", restorer), ("refiner", refiner)):
        state = {}
        for name, shape in layout[key]["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            state[name] = torch.from_numpy(arr.astype(np.float32))
            offset += 4 * count
        model.load_state_dict(state)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter blob")
    return restorer.eval(), refiner.eval(), layout.get("extra", {})
