"""Volumetric preprocessing: HU windowing, isotropic resampling, lesion cropping.

Arrays are indexed (x, y, z). Physical coordinates put the center of voxel 0
at the origin, so voxel ``i`` along an axis sits at ``i * spacing`` mm.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidAnnotationError, InvalidWindowError, OutOfBoundsError

HU_MIN = -1000.0
HU_MAX = 400.0
FIXED_CUBE_MM = 64.0
DIAMETER_MARGIN_MM = 20.0

# inside-test slack for sample points produced by irrational plane bases
_EDGE_TOL = 1e-9


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.normalized and self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise DataError("normalized volume has values outside [0, 1]")

    @property
    def shape(self):
        return self.data.shape

    def is_isotropic(self, mm=1.0, tol=1e-9):
        return all(abs(s - mm) <= tol for s in self.spacing)


@dataclass
class LesionCube:
    data: np.ndarray
    lesion_id: str = ""
    side_mm: int = field(init=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        s = self.data.shape
        if self.data.ndim != 3 or not (s[0] == s[1] == s[2]) or s[0] < 1:
            raise DataError(f"lesion cube must be s x s x s, got {s}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise DataError("lesion cube values must lie in [0, 1]")
        self.side_mm = int(s[0])

    @property
    def side(self):
        return self.side_mm


class CropKind(str, enum.Enum):
    FIXED_NODULE = "fixed_nodule"
    DIAMETER_PLUS_MARGIN = "diameter_plus_margin"


@dataclass(frozen=True)
class CropPolicy:
    kind: CropKind = CropKind.FIXED_NODULE
    margin_mm: float = DIAMETER_MARGIN_MM
    fixed_mm: float = FIXED_CUBE_MM

    def __post_init__(self):
        object.__setattr__(self, "kind", CropKind(self.kind))
        if self.margin_mm < 0:
            raise ValueError("margin_mm must be >= 0")
        if self.fixed_mm <= 0:
            raise ValueError("fixed_mm must be > 0")


def hu_window(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    """Clamp HU values to ``[lo, hi]`` and map them linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise InvalidWindowError(f"window lower bound {lo} must be below upper bound {hi}")
    if v.normalized:
        raise DataError("volume is already normalized")
    out = (v.data.astype(np.float64) - lo) / (hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return Volume(out, v.spacing, normalized=True)


def hu_unwindow(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume:
    """Map normalized intensities back to HU (inverse of the unclamped window)."""
    if not lo < hi:
        raise InvalidWindowError(f"window lower bound {lo} must be below upper bound {hi}")
    return Volume(v.data.astype(np.float64) * (hi - lo) + lo, v.spacing, normalized=False)


def trilinear(data: np.ndarray, coords: np.ndarray, outside: str = "clamp") -> np.ndarray:
    """Sample ``data`` at continuous voxel coordinates ``coords[..., 3]``.

    ``outside="clamp"`` clamps coordinates to the grid; ``outside="zero"``
    returns 0 for points beyond the grid.
    """
    coords = np.asarray(coords, dtype=np.float64)
    hi = np.array(data.shape, dtype=np.float64) - 1
    if outside == "zero":
        inside = np.all((coords >= -_EDGE_TOL) & (coords <= hi + _EDGE_TOL), axis=-1)
    elif outside != "clamp":
        raise ValueError(f"unknown outside mode {outside!r}")
    c = np.clip(coords, 0.0, hi)
    i0 = np.floor(c).astype(np.intp)
    f = c - i0
    i1 = np.minimum(i0 + 1, np.array(data.shape) - 1)
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    d = data
    c00 = d[x0, y0, z0] * (1 - fx) + d[x1, y0, z0] * fx
    c10 = d[x0, y1, z0] * (1 - fx) + d[x1, y1, z0] * fx
    c01 = d[x0, y0, z1] * (1 - fx) + d[x1, y0, z1] * fx
    c11 = d[x0, y1, z1] * (1 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    if outside == "zero":
        out = np.where(inside, out, 0.0)
    return out


def resample_isotropic(v: Volume, target_mm: float = 1.0) -> Volume:
    if target_mm <= 0:
        raise ValueError("target_mm must be > 0")
    if v.is_isotropic(target_mm, tol=0.0):
        return Volume(v.data.copy(), v.spacing, v.normalized)
    new_dims = [max(1, int(round(n * s / target_mm))) for n, s in zip(v.shape, v.spacing)]
    axes = [np.arange(n) * target_mm / s for n, s in zip(new_dims, v.spacing)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    out = trilinear(v.data.astype(np.float64), grid, outside="clamp")
    if v.normalized:
        np.clip(out, 0.0, 1.0, out=out)
    return Volume(out, (target_mm,) * 3, v.normalized)


def crop_side_for(policy: CropPolicy, longest_diameter_mm: float) -> float:
    if longest_diameter_mm < 0:
        raise InvalidAnnotationError(f"negative lesion diameter {longest_diameter_mm}")
    if policy.kind is CropKind.FIXED_NODULE:
        return float(policy.fixed_mm)
    return float(longest_diameter_mm) + policy.margin_mm


def crop_lesion(v: Volume, center_mm, side_mm: float, lesion_id: str = "") -> LesionCube:
    """Cut a zero-padded cube of ``round(side_mm)`` voxels around ``center_mm``.

    The cube starts ``side // 2`` voxels before the voxel nearest the center.
    """
    if not v.normalized:
        raise DataError("crop_lesion expects a normalized volume")
    if not v.is_isotropic(1.0):
        raise DataError(f"crop_lesion expects 1 mm isotropic spacing, got {v.spacing}")
    if side_mm <= 0:
        raise ValueError("side_mm must be > 0")
    side = max(1, int(round(side_mm)))
    center = np.rint(np.asarray(center_mm, dtype=np.float64)).astype(int)
    dims = np.array(v.shape)
    if center.shape != (3,) or np.any(center < 0) or np.any(center >= dims):
        raise OutOfBoundsError(f"lesion {lesion_id!r} center {list(center_mm)} lies outside volume {tuple(dims)}")
    start = center - side // 2
    stop = start + side
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(stop, dims)
    out = np.zeros((side,) * 3, dtype=v.data.dtype)
    dst_lo = src_lo - start
    dst_hi = src_hi - start
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = v.data[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    return LesionCube(out, lesion_id)


def preprocess(v: Volume, lo: float = HU_MIN, hi: float = HU_MAX, target_mm: float = 1.0) -> Volume:
    """Window (if still in HU) and resample to isotropic spacing."""
    if not v.normalized:
        v = hu_window(v, lo, hi)
    return resample_isotropic(v, target_mm)


# -- raw + JSON sidecar file format ------------------------------------------
# Payload is little-endian, x varies fastest (Fortran order over (x, y, z)).

_DTYPES = {"int16": "<i2", "float32": "<f4"}


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(v: Volume, path) -> Path:
    path = Path(path)
    dtype = "float32" if v.normalized else "int16"
    if not v.normalized:
        arr = np.asarray(v.data)
        if not np.issubdtype(arr.dtype, np.integer):
            arr = np.rint(arr)
        if arr.min() < np.iinfo(np.int16).min or arr.max() > np.iinfo(np.int16).max:
            raise DataError("HU values do not fit int16")
    else:
        arr = v.data
    payload = np.asarray(arr).astype(_DTYPES[dtype]).ravel(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.tobytes())
    meta = {
        "dims": [int(n) for n in v.shape],
        "spacing_mm": [float(s) for s in v.spacing],
        "dtype": dtype,
        "normalized": bool(v.normalized),
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists() or not side.exists():
        raise DataError(f"volume file or sidecar missing: {path}")
    try:
        meta = json.loads(side.read_text())
        dims = [int(n) for n in meta["dims"]]
        dtype = _DTYPES[meta["dtype"]]
        spacing = meta["spacing_mm"]
        normalized = bool(meta["normalized"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad volume sidecar {side}: {exc}") from exc
    raw = path.read_bytes()
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    data = data.astype(np.float32 if normalized else np.int16)
    return Volume(data, spacing, normalized)
