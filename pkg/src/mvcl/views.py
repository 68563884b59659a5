"""The nine fixed view planes through a lesion cube and 2D view extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, InsufficientViewsError
from .volume import LesionCube, trilinear

ALL_PLANES = tuple(range(1, 10))
DEFAULT_OUT_SIZE = 224


@dataclass(frozen=True)
class ViewPlane:
    id: int
    normal: tuple
    u_axis: tuple
    v_axis: tuple


@dataclass
class View2D:
    pixels: np.ndarray
    plane_id: int
    lesion_id: str = ""


@dataclass
class ViewSet:
    lesion_id: str
    views: list

    def __post_init__(self):
        ids = [v.plane_id for v in self.views]
        if len(ids) < 2:
            raise InsufficientViewsError(f"a view set needs at least 2 views, got {len(ids)}")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DataError(f"plane ids must be strictly increasing, got {ids}")
        sizes = {v.pixels.shape for v in self.views}
        if len(sizes) != 1:
            raise DataError(f"views of one lesion must share a size, got {sizes}")

    @property
    def plane_ids(self):
        return [v.plane_id for v in self.views]

    @property
    def out_size(self):
        return self.views[0].pixels.shape[0]

    def __len__(self):
        return len(self.views)

    def stack(self) -> np.ndarray:
        return np.stack([v.pixels for v in self.views])


@lru_cache(maxsize=None)
def plane_table() -> tuple:
    """Axis-aligned planes (1-3) followed by the six face-diagonal planes (4-9)."""
    r = 1.0 / np.sqrt(2.0)
    rows = [
        ((0, 0, 1), (1, 0, 0), (0, 1, 0)),
        ((0, 1, 0), (1, 0, 0), (0, 0, 1)),
        ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
        ((r, r, 0), (r, -r, 0), (0, 0, 1)),
        ((r, -r, 0), (r, r, 0), (0, 0, 1)),
        ((r, 0, r), (r, 0, -r), (0, 1, 0)),
        ((r, 0, -r), (r, 0, r), (0, 1, 0)),
        ((0, r, r), (0, r, -r), (1, 0, 0)),
        ((0, r, -r), (0, r, r), (1, 0, 0)),
    ]
    return tuple(
        ViewPlane(i, tuple(map(float, n)), tuple(map(float, u)), tuple(map(float, v)))
        for i, (n, u, v) in enumerate(rows, start=1)
    )


def get_plane(plane_id: int) -> ViewPlane:
    if plane_id not in ALL_PLANES:
        raise DataError(f"plane id must be in 1..9, got {plane_id}")
    return plane_table()[plane_id - 1]


@lru_cache(maxsize=64)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    if src == dst:
        return np.eye(src)
    x = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    x = np.clip(x, 0.0, src - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    w = x - i0
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    m.setflags(write=False)
    return m


def resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    h, w = img.shape
    if h == out_size and w == out_size:
        return img.copy()
    return _resize_matrix(h, out_size) @ img @ _resize_matrix(w, out_size).T


def extract_view(cube: LesionCube, plane: ViewPlane, out_size: int = DEFAULT_OUT_SIZE) -> View2D:
    if out_size < 2:
        raise ValueError("out_size must be >= 2")
    s = cube.side
    half = (s - 1) / 2.0
    t = np.arange(s, dtype=np.float64) - half
    u = np.asarray(plane.u_axis)
    v = np.asarray(plane.v_axis)
    pts = half + t[:, None, None] * u + t[None, :, None] * v
    img = trilinear(cube.data.astype(np.float64), pts, outside="zero")
    img = resize_bilinear(img, out_size)
    np.clip(img, 0.0, 1.0, out=img)
    return View2D(img, plane.id, cube.lesion_id)


def extract_views(cube: LesionCube, plane_ids, out_size: int = DEFAULT_OUT_SIZE) -> ViewSet:
    ids = sorted(set(int(p) for p in plane_ids))
    if len(ids) < 2:
        raise InsufficientViewsError(f"need at least 2 distinct planes, got {ids}")
    return ViewSet(cube.lesion_id, [extract_view(cube, get_plane(p), out_size) for p in ids])


# -- view stack files: raw float32 [M, S, S], C order, little-endian ---------

def save_view_set(vs: ViewSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(vs.stack().astype("<f4").tobytes())
    meta = {"lesion_id": vs.lesion_id, "plane_ids": vs.plane_ids, "out_size": vs.out_size}
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")
    return path


def load_view_set(path) -> ViewSet:
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise DataError(f"view stack or sidecar missing: {path}")
    meta = json.loads(side.read_text())
    m, s = len(meta["plane_ids"]), int(meta["out_size"])
    raw = path.read_bytes()
    if len(raw) != m * s * s * 4:
        raise DataError(f"{path}: size does not match {m} views of {s}x{s}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(m, s, s).astype(np.float32)
    views = [View2D(arr[k], int(p), meta["lesion_id"]) for k, p in enumerate(meta["plane_ids"])]
    return ViewSet(meta["lesion_id"], views)
