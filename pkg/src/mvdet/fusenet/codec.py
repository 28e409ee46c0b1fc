"""24-D corner-offset box codec, normalised by the proposal diagonal."""
from __future__ import annotations

import math

import numpy as np

from ..geom3d import Box3D, box_to_corners, corners_to_box


def diagonal(box: Box3D) -> float:
    return math.sqrt(box.l ** 2 + box.w ** 2 + box.h ** 2)


def encode_corners(proposal: Box3D, gt: Box3D) -> np.ndarray:
    """(dx0..dx7, dy0..dy7, dz0..dz7) of gt corners relative to proposal corners."""
    d = box_to_corners(gt) - box_to_corners(proposal)
    return (d / diagonal(proposal)).T.ravel()


def decode_corners(proposal: Box3D, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(3, 8)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite corner target")
    return box_to_corners(proposal) + t.T * diagonal(proposal)


def decode_box(proposal: Box3D, t) -> Box3D:
    return corners_to_box(decode_corners(proposal, t))
