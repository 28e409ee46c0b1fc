"""Projection of 3D proposals to per-view ROI rectangles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geom3d import Box3D, box_to_corners
from ..kitti_io import Calibration, project_to_image
from ..view_encode import BevConfig, FrontViewConfig, front_view_coords


class EmptyROIError(ValueError):
    pass


@dataclass(frozen=True)
class RoiRect:
    """Inclusive cell rectangle: rows r0..r1, cols c0..c1."""
    r0: int
    c0: int
    r1: int
    c1: int
    clamped: bool = False

    def __iter__(self):
        return iter((self.r0, self.c0, self.r1, self.c1))

    @property
    def shape(self):
        return self.r1 - self.r0 + 1, self.c1 - self.c0 + 1


def _clamp(r0, c0, r1, c1, rows, cols, clamped=False) -> RoiRect:
    nr0, nc0 = max(r0, 0), max(c0, 0)
    nr1, nc1 = min(r1, rows - 1), min(c1, cols - 1)
    if nr1 < nr0 or nc1 < nc0:
        raise EmptyROIError("box projects outside the view")
    clamped = clamped or (nr0, nc0, nr1, nc1) != (r0, c0, r1, c1)
    return RoiRect(int(nr0), int(nc0), int(nr1), int(nc1), clamped)


def roi_project(box: Box3D, view: str, calib: Calibration | None = None, grid_meta=None) -> RoiRect:
    """ROI of ``box`` in the 'bev', 'fv' or 'rgb' view.

    ``grid_meta`` is a BevConfig, FrontViewConfig or (width, height) image size.
    """
    if view == "bev":
        cfg = grid_meta or BevConfig()
        x0, y0, x1, y1 = box.bev().aabb()
        (u0, u1), (v0, v1) = zip(cfg.to_cells(x0, y0), cfg.to_cells(x1, y1))
        tol = 1e-6
        rows, cols = cfg.shape
        return _clamp(math.floor(u0 + tol), math.floor(v0 + tol),
                      math.ceil(u1 - tol) - 1, math.ceil(v1 - tol) - 1, rows, cols)
    if view == "fv":
        cfg = grid_meta or FrontViewConfig()
        r, c = front_view_coords(box_to_corners(box), cfg)
        return _clamp(r.min(), c.min(), r.max(), c.max(), cfg.rows, cfg.cols)
    if view == "rgb":
        if calib is None or grid_meta is None:
            raise ValueError("rgb ROI needs a calibration and the image size")
        width, height = grid_meta
        uv, ok = project_to_image(box_to_corners(box), calib)
        if not ok.any():
            raise EmptyROIError("box is behind the camera")
        uv = uv[ok]
        return _clamp(int(np.floor(uv[:, 1].min())), int(np.floor(uv[:, 0].min())),
                      int(np.floor(uv[:, 1].max())), int(np.floor(uv[:, 0].max())),
                      height, width, clamped=not ok.all())
    raise ValueError(f"unknown view {view!r}")
