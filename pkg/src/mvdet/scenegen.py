"""Deterministic synthetic LIDAR scenes with ground-truth boxes and KITTI-format export."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geom3d import Box3D, BevBox, bev_intersection, box_to_corners
from .kitti_io import (Calibration, PointCloud, LabelRecord, box3d_to_label, project_box_to_image,
                       write_calib, write_labels, write_velodyne)

# KITTI-like sensor rig: camera 0.27 m ahead of and 0.08 m below the LIDAR
KITTI_P2 = np.array([[721.5377, 0.0, 609.5593, 44.85728],
                     [0.0, 721.5377, 172.854, 0.2163791],
                     [0.0, 0.0, 1.0, 0.002745884]])
KITTI_TR = np.array([[0.0, -1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0, -0.08],
                     [1.0, 0.0, 0.0, -0.27]])
IMAGE_SIZE = (1242, 375)


def kitti_like_calib() -> Calibration:
    return Calibration(KITTI_P2, np.eye(3), KITTI_TR)


@dataclass(frozen=True)
class ObjectClass:
    name: str
    size: tuple  # mean (l, w, h)
    jitter: tuple = (0.0, 0.0, 0.0)  # uniform half-width per dimension
    weight: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 5
    classes: tuple = (ObjectClass("Car", (3.9, 1.6, 1.56), (0.2, 0.08, 0.06)),)
    ground_z: float = -1.73
    point_density: float = 40.0  # points per m^2 of visible surface
    min_points: int = 30
    clutter_points: int = 2000
    range_limits: tuple = (6.0, 45.0)
    azimuth_limit: float = math.radians(32.0)
    yaw_mode: str = "axis"  # "axis": near 0/90/180/270 deg; "uniform": anywhere
    yaw_jitter: float = 0.15
    separation: float = 0.5
    ray_drop: float = 0.0
    max_tries: int = 2000
    bev_limits: tuple = ((0.0, 70.4), (-40.0, 40.0))

    def validate(self):
        if self.n_objects < 0 or self.clutter_points < 0 or self.min_points < 0:
            raise ValueError("counts must be non-negative")
        for c in self.classes:
            if min(c.size) <= 0 or any(s - j <= 0 for s, j in zip(c.size, c.jitter)):
                raise ValueError(f"class {c.name}: sizes must stay positive")


@dataclass
class Scene:
    pc: PointCloud
    boxes: list
    calib: Calibration
    classes: list = field(default_factory=list)
    owner: np.ndarray = None  # per point: object index, -1 for clutter
    image: np.ndarray = None  # (H, W, 3) uint8 flat-shaded render

    def __iter__(self):
        return iter((self.pc, self.boxes, self.calib))


def _sample_box(rng, spec: SceneSpec):
    w = np.array([c.weight for c in spec.classes], dtype=float)
    cls = spec.classes[rng.choice(len(spec.classes), p=w / w.sum())]
    l, wd, h = (s + rng.uniform(-j, j) for s, j in zip(cls.size, cls.jitter))
    r = rng.uniform(*spec.range_limits)
    az = rng.uniform(-spec.azimuth_limit, spec.azimuth_limit)
    if spec.yaw_mode == "axis":
        yaw = rng.integers(4) * 0.5 * math.pi + rng.uniform(-spec.yaw_jitter, spec.yaw_jitter)
    elif spec.yaw_mode == "uniform":
        yaw = rng.uniform(-math.pi, math.pi)
    else:
        raise ValueError(f"unknown yaw_mode {spec.yaw_mode!r}")
    return cls.name, Box3D(r * math.cos(az), r * math.sin(az), spec.ground_z + 0.5 * h, l, wd, h, yaw)


def _inside_limits(box: Box3D, spec: SceneSpec, calib) -> bool:
    (x0, x1), (y0, y1) = spec.bev_limits
    bx0, by0, bx1, by1 = box.bev().aabb()
    if bx0 < x0 or bx1 > x1 or by0 < y0 or by1 > y1:
        return False
    hull = project_box_to_image(box, calib)
    if hull is None:
        return False
    return hull[0] >= 0 and hull[1] >= 0 and hull[2] < IMAGE_SIZE[0] and hull[3] < IMAGE_SIZE[1]


def _inflate(box: Box3D, m: float) -> BevBox:
    return BevBox(box.cx, box.cy, box.l + 2 * m, box.w + 2 * m, box.yaw)


def _faces(box: Box3D):
    """Yield (origin corner, edge u, edge v, outward normal) for the 6 faces."""
    c = box_to_corners(box)
    quads = [(0, 1, 2, 3), (4, 7, 6, 5), (0, 3, 7, 4), (1, 0, 4, 5), (2, 1, 5, 6), (3, 2, 6, 7)]
    for q in quads:
        p0, p1, p3 = c[q[0]], c[q[1]], c[q[3]]
        u, v = p1 - p0, p3 - p0
        n = np.cross(v, u)
        yield p0, u, v, n / np.linalg.norm(n)


def sample_surface(box: Box3D, rng, density: float, min_points: int) -> np.ndarray:
    """Points on the faces of ``box`` visible from the sensor origin."""
    visible = []
    for p0, u, v, n in _faces(box):
        centre = p0 + 0.5 * (u + v)
        if np.dot(n, centre) < 0:
            visible.append((p0, u, v, np.linalg.norm(np.cross(u, v))))
    areas = np.array([f[3] for f in visible])
    total = max(min_points, int(round(density * areas.sum())))
    counts = rng.multinomial(total, areas / areas.sum())
    pts = []
    for (p0, u, v, _), k in zip(visible, counts):
        a, b = rng.random((2, k))
        pts.append(p0 + a[:, None] * u + b[:, None] * v)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def render_image(boxes, calib: Calibration, size=IMAGE_SIZE) -> np.ndarray:
    """Flat-shaded render: sky/ground background, far-to-near filled box hulls."""
    width, height = size
    img = np.zeros((height, width, 3), dtype=np.uint8)
    horizon = int(calib.P[1, 2])
    img[:horizon] = (135, 170, 210)
    img[horizon:] = (90, 90, 90)
    order = sorted(range(len(boxes)), key=lambda i: -math.hypot(boxes[i].cx, boxes[i].cy))
    for i in order:
        hull = project_box_to_image(boxes[i], calib)
        if hull is None:
            continue
        u0, v0 = max(0, int(hull[0])), max(0, int(hull[1]))
        u1, v1 = min(width, int(math.ceil(hull[2]))), min(height, int(math.ceil(hull[3])))
        shade = int(np.clip(230 - 3 * math.hypot(boxes[i].cx, boxes[i].cy), 60, 230))
        img[v0:v1, u0:u1] = (shade, 40 + (37 * i) % 120, 40)
    return img


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    calib = kitti_like_calib()
    boxes, names = [], []
    tries = 0
    while len(boxes) < spec.n_objects:
        tries += 1
        if tries > spec.max_tries:
            raise RuntimeError(f"could not place {spec.n_objects} objects without overlap "
                               f"after {spec.max_tries} tries")
        name, box = _sample_box(rng, spec)
        if not _inside_limits(box, spec, calib):
            continue
        fp = _inflate(box, 0.5 * spec.separation)
        if any(bev_intersection(fp, _inflate(b, 0.5 * spec.separation)) > 0 for b in boxes):
            continue
        boxes.append(box)
        names.append(name)

    chunks, owners = [], []
    for i, box in enumerate(boxes):
        pts = sample_surface(box, rng, spec.point_density, spec.min_points)
        chunks.append(pts)
        owners.append(np.full(len(pts), i))

    if spec.clutter_points:
        (x0, x1), (y0, y1) = spec.bev_limits
        g = np.column_stack([rng.uniform(x0, x1, spec.clutter_points),
                             rng.uniform(y0, y1, spec.clutter_points),
                             spec.ground_z + rng.uniform(-0.02, 0.02, spec.clutter_points)])
        free = np.ones(len(g), dtype=bool)
        for box in boxes:
            free &= ~_in_footprint(g[:, :2], box)
        chunks.append(g[free])
        owners.append(np.full(int(free.sum()), -1))

    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    owner = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
    inten = rng.uniform(0.0, 1.0, len(xyz))
    if spec.ray_drop > 0:
        keep = rng.random(len(xyz)) >= spec.ray_drop
        xyz, owner, inten = xyz[keep], owner[keep], inten[keep]
    pc = PointCloud(np.column_stack([xyz, inten]).astype(np.float32))
    return Scene(pc, boxes, calib, names, owner.astype(np.int64), render_image(boxes, calib))


def _in_footprint(xy, box: Box3D, margin: float = 0.0):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = xy[:, 0] - box.cx, xy[:, 1] - box.cy
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (np.abs(u) <= 0.5 * box.l + margin) & (np.abs(v) <= 0.5 * box.w + margin)


def points_in_box(xyz, box: Box3D, margin: float = 0.0):
    xyz = np.asarray(xyz, dtype=np.float64)
    zin = (xyz[:, 2] >= box.z_min - margin) & (xyz[:, 2] <= box.z_max + margin)
    return zin & _in_footprint(xyz[:, :2], box, margin)


def scene_labels(scene: Scene) -> list[LabelRecord]:
    recs = []
    for name, box in zip(scene.classes, scene.boxes):
        hull = project_box_to_image(box, scene.calib)
        rec = box3d_to_label(box, scene.calib, cls=name)
        u0, v0 = max(0.0, hull[0]), max(0.0, hull[1])
        u1, v1 = min(IMAGE_SIZE[0] - 1.0, hull[2]), min(IMAGE_SIZE[1] - 1.0, hull[3])
        full = (hull[2] - hull[0]) * (hull[3] - hull[1])
        trunc = 1.0 - (u1 - u0) * (v1 - v0) / full if full > 0 else 0.0
        recs.append(LabelRecord(name, round(trunc, 2), 0, rec.alpha, (u0, v0, u1, v1),
                                rec.h, rec.w, rec.l, rec.location, rec.rotation_y))
    return recs


def write_scene(root, frame: str, scene: Scene):
    """Write one frame in the KITTI object layout under ``root``."""
    from PIL import Image

    for sub in ("velodyne", "calib", "label_2", "image_2"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    write_velodyne(os.path.join(root, "velodyne", f"{frame}.bin"), scene.pc)
    write_calib(os.path.join(root, "calib", f"{frame}.txt"), scene.calib)
    write_labels(os.path.join(root, "label_2", f"{frame}.txt"), scene_labels(scene))
    Image.fromarray(scene.image).save(os.path.join(root, "image_2", f"{frame}.png"))


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
