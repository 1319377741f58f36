"""CTSD binary tensor files with JSON sidecars.

Layout (little-endian): ``b"CTSD"``, u16 format version, u8 dtype code,
u8 rank, ``rank`` x u32 dims, then row-major data. The sidecar shares the
basename with a ``.json`` suffix.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import FanBeamGeometry, Sinogram, as_image

MAGIC = b"CTSD"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
_CODES = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_tensor(path, array, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=DTYPES[1])
    header = MAGIC + struct.pack("<HBB", VERSION, _CODES[data.dtype], data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Return ``(array, sidecar)``; the sidecar is ``{}`` when absent."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    dtype = DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return array.astype(np.float64), meta


def save_image(path, image, meta: dict | None = None) -> Path:
    meta = {"kind": "image", **(meta or {})}
    return write_tensor(path, image, meta)


def load_image(path) -> tuple[np.ndarray, dict]:
    array, meta = read_tensor(path)
    return as_image(array), meta


def save_sinogram(path, sino: Sinogram, geom: FanBeamGeometry, meta: dict | None = None) -> Path:
    side = {
        "kind": "sinogram",
        "geometry": geom.to_dict(),
        "mask": None if sino.mask is None else sino.mask.tolist(),
        "index_base": 0,
        **(meta or {}),
    }
    return write_tensor(path, sino.values, side)


def load_sinogram(path) -> tuple[Sinogram, FanBeamGeometry | None, dict]:
    values, meta = read_tensor(path)
    geom = FanBeamGeometry.from_dict(meta["geometry"]) if "geometry" in meta else None
    return Sinogram(values, meta.get("mask")), geom, meta
