"""Bird's-eye-view and front-view encodings of a LIDAR point cloud."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .kitti_io import PointCloud


class ConfigError(ValueError):
    pass


DENSITY_SATURATION = 64


def density(n):
    """min(1, log(N+1) / log(64)); saturates at N >= 63."""
    n = np.asarray(n, dtype=np.float64)
    return np.minimum(1.0, np.log(n + 1.0) / math.log(DENSITY_SATURATION))


def _integral_extent(lo, hi, res, name):
    v = (hi - lo) / res
    n = int(round(v))
    if n <= 0 or abs(v - n) > 1e-6:
        raise ConfigError(f"{name} extent {hi - lo} is not an integral multiple of resolution {res}")
    return n


@dataclass(frozen=True)
class BevConfig:
    x_range: tuple = (0.0, 70.4)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-2.4, 1.0)
    resolution: float = 0.1
    n_slices: int = 4

    @property
    def shape(self) -> tuple[int, int]:
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        return (_integral_extent(*self.x_range, self.resolution, "x"),
                _integral_extent(*self.y_range, self.resolution, "y"))

    @property
    def n_channels(self) -> int:
        return self.n_slices + 2

    def validate(self):
        if self.n_slices < 1:
            raise ConfigError("n_slices must be >= 1")
        if not self.z_range[1] > self.z_range[0]:
            raise ConfigError("empty z range")
        self.shape

    def to_cells(self, x, y):
        """Continuous (row, col) cell coordinates; row follows x, col follows y."""
        return ((np.asarray(x) - self.x_range[0]) / self.resolution,
                (np.asarray(y) - self.y_range[0]) / self.resolution)


@dataclass
class BevGrid:
    config: BevConfig
    data: np.ndarray  # (M + 2, rows, cols): M height slices, intensity, density

    @property
    def heights(self):
        return self.data[:-2]

    @property
    def intensity(self):
        return self.data[-2]

    @property
    def density(self):
        return self.data[-1]


def encode_bev(pc: PointCloud, config: BevConfig = BevConfig()):
    """Return (BevGrid, occupancy) for the points inside the configured volume.

    Heights are stored as z - z_min so that an empty cell reads 0.
    """
    config.validate()
    rows, cols = config.shape
    m = config.n_slices
    data = np.zeros((m + 2, rows, cols), dtype=np.float64)
    occ = np.zeros((rows, cols), dtype=bool)
    if len(pc) == 0:
        return BevGrid(config, data), occ

    xyz, inten = pc.xyz, pc.intensity
    z0, z1 = config.z_range
    r, c = config.to_cells(xyz[:, 0], xyz[:, 1])
    r, c = np.floor(r).astype(np.int64), np.floor(c).astype(np.int64)
    z = xyz[:, 2]
    ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols) & (z >= z0) & (z <= z1)
    r, c, z, inten = r[ok], c[ok], z[ok], inten[ok]
    if len(z) == 0:
        return BevGrid(config, data), occ

    flat = r * cols + c
    rel = z - z0
    sl = np.minimum((rel / ((z1 - z0) / m)).astype(np.int64), m - 1)
    hmaps = data[:m].reshape(m, -1)
    np.maximum.at(hmaps, (sl, flat), rel)

    counts = np.bincount(flat, minlength=rows * cols)
    data[m + 1] = density(counts).reshape(rows, cols)
    occ[:] = (counts > 0).reshape(rows, cols)

    # intensity of the highest point, ties -> larger intensity; order-free
    order = np.lexsort((inten, z, flat))
    last = np.ones(len(order), dtype=bool)
    last[:-1] = flat[order][1:] != flat[order][:-1]
    top = order[last]
    data[m].reshape(-1)[flat[top]] = inten[top]
    return BevGrid(config, data), occ


@dataclass(frozen=True)
class FrontViewConfig:
    rows: int = 64
    cols: int = 512
    h_res: float = (math.pi / 2) / 512
    v_res: float = math.radians(2.0 + 24.9) / 64
    col_offset: int = 256
    row_offset: int = 60  # -floor(-24.9 deg / v_res)


@dataclass
class FrontViewGrid:
    config: FrontViewConfig
    data: np.ndarray  # (3, rows, cols): height, distance, intensity
    dropped: int = 0


def front_view_coords(xyz, config: FrontViewConfig = FrontViewConfig()):
    """Integer (row, col) front-view coordinates, offsets applied, not bounds-checked."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    c = np.floor(np.arctan2(y, x) / config.h_res).astype(np.int64) + config.col_offset
    r = np.floor(np.arctan2(z, np.hypot(x, y)) / config.v_res).astype(np.int64) + config.row_offset
    return r, c


def encode_front_view(pc: PointCloud, config: FrontViewConfig = FrontViewConfig()) -> FrontViewGrid:
    """Cylindrical projection; per cell the nearest point wins (ties -> larger intensity)."""
    if config.h_res <= 0 or config.v_res <= 0:
        raise ConfigError("angular resolutions must be positive")
    data = np.zeros((3, config.rows, config.cols))
    if len(pc) == 0:
        return FrontViewGrid(config, data, 0)
    xyz, inten = pc.xyz, pc.intensity
    r, c = front_view_coords(xyz, config)
    ok = (r >= 0) & (r < config.rows) & (c >= 0) & (c < config.cols)
    dropped = int((~ok).sum())
    xyz, inten, r, c = xyz[ok], inten[ok], r[ok], c[ok]
    if len(r) == 0:
        return FrontViewGrid(config, data, dropped)
    dist = np.linalg.norm(xyz, axis=1)
    flat = r * config.cols + c
    order = np.lexsort((-inten, dist, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    win = order[first]
    for ch, vals in enumerate((xyz[:, 2], dist, inten)):
        data[ch].reshape(-1)[flat[win]] = vals[win]
    return FrontViewGrid(config, data, dropped)


def integral_image(occ) -> np.ndarray:
    """S[i, j] = number of true cells in occ[0..i, 0..j] (inclusive)."""
    return np.asarray(occ, dtype=np.int64).cumsum(axis=0).cumsum(axis=1)


def rect_sum(S, r0, c0, r1, c1):
    """Sum over the inclusive rectangle [r0..r1] x [c0..c1]; vectorised; empty -> 0."""
    r0, c0, r1, c1 = (np.asarray(v, dtype=np.int64) for v in (r0, c0, r1, c1))
    empty = (r1 < r0) | (c1 < c0)
    r1c, c1c = np.maximum(r1, 0), np.maximum(c1, 0)
    total = S[r1c, c1c]
    total = total - np.where(r0 > 0, S[np.maximum(r0 - 1, 0), c1c], 0)
    total = total - np.where(c0 > 0, S[r1c, np.maximum(c0 - 1, 0)], 0)
    total = total + np.where((r0 > 0) & (c0 > 0), S[np.maximum(r0 - 1, 0), np.maximum(c0 - 1, 0)], 0)
    return np.where(empty, 0, total)


# flat little-endian binary + JSON sidecar

def write_arrays(stem, arrays: dict, meta: dict | None = None, dtype: str = "<f4"):
    """Write named arrays to ``stem.bin`` with a ``stem.json`` header."""
    header = {"dtype": dtype, "arrays": [], "meta": meta or {}}
    offset = 0
    with open(stem + ".bin", "wb") as f:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=dtype)
            f.write(a.tobytes())
            header["arrays"].append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    with open(stem + ".json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)


def read_arrays(stem):
    with open(stem + ".json") as f:
        header = json.load(f)
    raw = np.fromfile(stem + ".bin", dtype=header["dtype"])
    itemsize = np.dtype(header["dtype"]).itemsize
    out = {}
    for entry in header["arrays"]:
        start = entry["offset"] // itemsize
        n = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = raw[start:start + n].reshape(entry["shape"]).copy()
    return out, header["meta"]


def write_bev(stem, grid: BevGrid):
    meta = {"kind": "bev", **asdict(grid.config), "shape": list(grid.config.shape),
            "channels": [f"height_{i}" for i in range(grid.config.n_slices)] + ["intensity", "density"]}
    write_arrays(stem, {"bev": grid.data}, meta)


def write_front_view(stem, grid: FrontViewGrid):
    meta = {"kind": "front_view", **asdict(grid.config), "channels": ["height", "distance", "intensity"],
            "dropped": grid.dropped}
    write_arrays(stem, {"front_view": grid.data}, meta)


def read_grid(stem):
    arrays, meta = read_arrays(stem)
    return arrays[next(iter(arrays))], meta


def default_paths(out_dir, frame):
    return os.path.join(out_dir, f"{frame}_bev"), os.path.join(out_dir, f"{frame}_fv")
