"""Oriented box geometry: corners, rotated-rectangle / cuboid IoU and BEV NMS.

Frame: x forward, y left, z up.  Yaw rotates about +z, counter-clockwise,
zero along +x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, astuple

import numpy as np

EPS = 1e-12


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - 0.5 * self.h

    @property
    def z_max(self) -> float:
        return self.cz + 0.5 * self.h

    def bev(self) -> "BevBox":
        return BevBox(self.cx, self.cy, self.l, self.w, self.yaw)


@dataclass(frozen=True)
class BevBox:
    cx: float
    cy: float
    l: float
    w: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0):
            raise ValueError(f"bev box extents must be positive, got l={self.l} w={self.w}")

    @property
    def area(self) -> float:
        return self.l * self.w

    def polygon(self) -> np.ndarray:
        """Footprint as a (4, 2) counter-clockwise vertex array."""
        return _footprint(self.cx, self.cy, self.l, self.w, self.yaw)

    def aabb(self) -> tuple[float, float, float, float]:
        """(x_lo, y_lo, x_hi, y_hi) of the rotated footprint."""
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        hx = 0.5 * (self.l * c + self.w * s)
        hy = 0.5 * (self.l * s + self.w * c)
        return self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy


# box-frame footprint, CCW from (+l/2, +w/2)
_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


def _footprint(cx, cy, l, w, yaw) -> np.ndarray:
    local = _SIGNS * np.array([0.5 * l, 0.5 * w])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def box_to_corners(box: Box3D) -> np.ndarray:
    """Return the (8, 3) corner array.

    Indices 0-3 are the bottom face counter-clockwise seen from +z, starting at
    the (+l/2, +w/2) corner in the box frame; 4-7 are the top face in the same
    order.
    """
    fp = _footprint(box.cx, box.cy, box.l, box.w, box.yaw)
    corners = np.empty((8, 3))
    corners[:4, :2] = fp
    corners[4:, :2] = fp
    corners[:4, 2] = box.z_min
    corners[4:, 2] = box.z_max
    return corners


def corners_to_box(corners) -> Box3D:
    """Fit an oriented box to 8 (possibly noisy) corners in the canonical order.

    Closed form: heights from mean bottom/top z, centre from the footprint
    centroid, yaw from the summed directed length edges, extents from mean
    edge lengths.
    """
    c = np.asarray(corners, dtype=np.float64)
    if c.shape != (8, 3):
        raise ValueError(f"expected (8, 3) corners, got {c.shape}")
    z_bot = c[:4, 2].mean()
    z_top = c[4:, 2].mean()
    h = z_top - z_bot
    xy = c[:, :2]
    # directed length edges (towards heading) and width edges (towards +w), both faces
    len_edges = np.concatenate([xy[[0, 3]] - xy[[1, 2]], xy[[4, 7]] - xy[[5, 6]]])
    wid_edges = np.concatenate([xy[[0, 1]] - xy[[3, 2]], xy[[4, 5]] - xy[[7, 6]]])
    len_norm = np.linalg.norm(len_edges, axis=1)
    wid_norm = np.linalg.norm(wid_edges, axis=1)
    if h <= EPS or len_norm.min() <= EPS or wid_norm.min() <= EPS:
        raise ValueError("degenerate corners")
    heading = len_edges.sum(axis=0)
    # fold width edges (rotated -90 deg) into the heading estimate
    heading = heading + np.stack([wid_edges[:, 1], -wid_edges[:, 0]], axis=1).sum(axis=0)
    yaw = math.atan2(heading[1], heading[0])
    cx, cy = xy.mean(axis=0)
    return Box3D(float(cx), float(cy), 0.5 * (z_bot + z_top), float(len_norm.mean()),
                 float(wid_norm.mean()), float(h), yaw)


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    pts = [(float(p[0]), float(p[1])) for p in poly]
    if len(pts) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = pts[-1]
    for x1, y1 in pts:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * acc


def _corner_tuples(b: "BevBox") -> list:
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    hl, hw = 0.5 * b.l, 0.5 * b.w
    return [(b.cx + c * sx * hl - s * sy * hw, b.cy + s * sx * hl + c * sy * hw) for sx, sy in _SIGNS]


def _clip(subject: list, a, b) -> list:
    # keep the part of `subject` left of the directed edge a->b
    out = []
    n = len(subject)
    if n == 0:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= -EPS:
            if sp < -EPS:
                out.append(_intersect(prev, cur, sp, sc))
            out.append(cur)
        elif sp >= -EPS:
            out.append(_intersect(prev, cur, sp, sc))
        prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _clip_all(a: list, b: list) -> list:
    out = a
    for i in range(len(b)):
        out = _clip(out, b[i], b[(i + 1) % len(b)])
        if not out:
            break
    return out


def convex_intersection(a, b) -> np.ndarray:
    """Intersection polygon of two CCW convex polygons (Sutherland-Hodgman)."""
    out = _clip_all([(float(p[0]), float(p[1])) for p in a], [(float(p[0]), float(p[1])) for p in b])
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def polygon_intersection_area(a, b) -> float:
    inter = _clip_all([(float(p[0]), float(p[1])) for p in a], [(float(p[0]), float(p[1])) for p in b])
    return max(0.0, polygon_area(inter))


def _axis_aligned(b: "BevBox") -> bool:
    return abs(math.sin(2.0 * b.yaw)) < 1e-12


def _aabb_disjoint(a: BevBox, b: BevBox) -> bool:
    ax0, ay0, ax1, ay1 = a.aabb()
    bx0, by0, bx1, by1 = b.aabb()
    return ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0


def bev_intersection(a: BevBox, b: BevBox) -> float:
    if _aabb_disjoint(a, b):
        return 0.0
    if _axis_aligned(a) and _axis_aligned(b):
        # both footprints coincide with their bounding rectangles
        ax0, ay0, ax1, ay1 = a.aabb()
        bx0, by0, bx1, by1 = b.aabb()
        inter = (min(ax1, bx1) - max(ax0, bx0)) * (min(ay1, by1) - max(ay0, by0))
    else:
        inter = max(0.0, polygon_area(_clip_all(_corner_tuples(a), _corner_tuples(b))))
    return min(inter, a.area, b.area)


def iou_bev(a: BevBox, b: BevBox) -> float:
    if isinstance(a, Box3D):
        a = a.bev()
    if isinstance(b, Box3D):
        b = b.bev()
    if a == b:
        return 1.0
    inter = bev_intersection(a, b)
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a.bev(), b.bev()) * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def _as_bev(box) -> BevBox:
    return box.bev() if isinstance(box, Box3D) else box


def iou_bev_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise BEV IoU, exact clipping only where bounding rectangles overlap."""
    a = [_as_bev(x) for x in boxes_a]
    b = [_as_bev(x) for x in boxes_b]
    out = np.zeros((len(a), len(b)))
    if not a or not b:
        return out
    aa = np.array([x.aabb() for x in a])
    bb = np.array([x.aabb() for x in b])
    hit = ((aa[:, None, 0] < bb[None, :, 2]) & (bb[None, :, 0] < aa[:, None, 2])
           & (aa[:, None, 1] < bb[None, :, 3]) & (bb[None, :, 1] < aa[:, None, 3]))
    for i, j in zip(*np.nonzero(hit)):
        out[i, j] = iou_bev(a[i], b[j])
    return out


def iou_3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return out
    hit = iou_bev_matrix(boxes_a, boxes_b) > 0
    for i, j in zip(*np.nonzero(hit)):
        out[i, j] = iou_3d(boxes_a[i], boxes_b[j])
    return out


def nms_bev(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy BEV NMS.  Returns kept indices in descending score order.

    Equal scores are resolved in favour of the lower original index.
    """
    bevs = [_as_bev(b) for b in boxes]
    scores = np.asarray(scores, dtype=np.float64)
    if len(bevs) != len(scores):
        raise ValueError("boxes and scores differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if len(bevs) == 0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    aabb = np.array([b.aabb() for b in bevs])
    suppressed = np.zeros(len(bevs), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        cand = np.nonzero(~suppressed
                          & (aabb[:, 0] < aabb[i, 2]) & (aabb[i, 0] < aabb[:, 2])
                          & (aabb[:, 1] < aabb[i, 3]) & (aabb[i, 1] < aabb[:, 3]))[0]
        for j in cand:
            if j != i and iou_bev(bevs[i], bevs[j]) > iou_threshold:
                suppressed[j] = True
        suppressed[i] = True
    return keep


def rigid_transform(box: Box3D, angle: float, tx: float = 0.0, ty: float = 0.0, tz: float = 0.0) -> Box3D:
    """Rotate a box about the z axis through the origin, then translate."""
    c, s = math.cos(angle), math.sin(angle)
    return Box3D(c * box.cx - s * box.cy + tx, s * box.cx + c * box.cy + ty, box.cz + tz,
                 box.l, box.w, box.h, box.yaw + angle)
