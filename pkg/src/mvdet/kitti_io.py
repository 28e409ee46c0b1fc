"""KITTI object-format readers/writers and camera <-> sensor frame conversion."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geom3d import Box3D, box_to_corners, normalize_angle


class FormatError(ValueError):
    pass


@dataclass
class PointCloud:
    """(N, 4) float32 array of x, y, z, intensity in the sensor frame."""
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3].astype(np.float64)

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3].astype(np.float64)

    def __eq__(self, other):
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)


def read_velodyne(path) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 16:
        raise FormatError(f"{path}: byte length {len(raw)} is not a multiple of 16")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy())


def write_velodyne(path, pc: PointCloud):
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(pc.points, dtype="<f4").tobytes())


@dataclass
class Calibration:
    P: np.ndarray
    R_rect: np.ndarray
    T_velo_to_cam: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        self.R_rect = np.asarray(self.R_rect, dtype=np.float64).reshape(3, 3)
        self.T_velo_to_cam = np.asarray(self.T_velo_to_cam, dtype=np.float64).reshape(3, 4)

    @classmethod
    def identity(cls, P=None) -> "Calibration":
        if P is None:
            P = np.hstack([np.eye(3), np.zeros((3, 1))])
        return cls(P, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def check(self):
        r = self.R_rect
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-4):
            raise ValueError("R_rect is not orthonormal")
        if abs(np.linalg.det(self.velo_to_rect()[:3, :3])) < 1e-9:
            raise ValueError("singular calibration")

    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous transform sensor frame -> rectified camera frame."""
        t = np.eye(4)
        t[:3, :4] = self.T_velo_to_cam
        r = np.eye(4)
        r[:3, :3] = self.R_rect
        return r @ t

    def rect_to_velo(self) -> np.ndarray:
        m = self.velo_to_rect()
        if abs(np.linalg.det(m[:3, :3])) < 1e-9:
            raise ValueError("singular calibration")
        return np.linalg.inv(m)


def velo_to_rect(xyz, calib: Calibration) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    m = calib.velo_to_rect()
    return xyz @ m[:3, :3].T + m[:3, 3]


def rect_to_velo(xyz, calib: Calibration) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    m = calib.rect_to_velo()
    return xyz @ m[:3, :3].T + m[:3, 3]


_CALIB_SHAPES = {"R0_rect": 9, "Tr_velo_to_cam": 12}


def read_calib(path, camera: str = "P2") -> Calibration:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
            key, rest = line.split(":", 1)
            try:
                nums = [float(v) for v in rest.split()]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            expected = 12 if key.startswith("P") else _CALIB_SHAPES.get(key)
            if expected is not None and len(nums) != expected:
                raise FormatError(f"{path}:{lineno}: {key} has {len(nums)} values, expected {expected}")
            values[key.strip()] = np.array(nums)
    for key in (camera, "R0_rect", "Tr_velo_to_cam"):
        if key not in values:
            raise FormatError(f"{path}: missing key {key}")
    return Calibration(values[camera], values["R0_rect"], values["Tr_velo_to_cam"])


def write_calib(path, calib: Calibration, camera: str = "P2"):
    def fmt(a):
        return " ".join(f"{v:.12e}" for v in np.asarray(a).ravel())
    with open(path, "w") as f:
        f.write(f"{camera}: {fmt(calib.P)}\n")
        f.write(f"R0_rect: {fmt(calib.R_rect)}\n")
        f.write(f"Tr_velo_to_cam: {fmt(calib.T_velo_to_cam)}\n")


@dataclass
class LabelRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple  # left, top, right, bottom in pixels
    h: float
    w: float
    l: float
    location: tuple  # x, y, z bottom centre, rectified camera frame
    rotation_y: float

    @property
    def is_dontcare(self) -> bool:
        return self.cls == "DontCare"

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def to_line(self) -> str:
        vals = [self.truncation, self.occlusion, self.alpha, *self.bbox,
                self.h, self.w, self.l, *self.location, self.rotation_y]
        parts = [self.cls]
        for i, v in enumerate(vals):
            parts.append(str(int(v)) if i == 1 else f"{v:.6f}")
        return " ".join(parts)


def parse_label_line(line: str, lineno: int = 0) -> LabelRecord:
    f = line.split()
    if len(f) != 15:
        raise FormatError(f"line {lineno}: expected 15 fields, got {len(f)}")
    try:
        v = [float(x) for x in f[1:]]
    except ValueError as e:
        raise FormatError(f"line {lineno}: {e}") from None
    rec = LabelRecord(f[0], v[0], int(v[1]), v[2], tuple(v[3:7]), v[7], v[8], v[9],
                      tuple(v[10:13]), v[13])
    if not rec.is_dontcare and min(rec.h, rec.w, rec.l) <= 0:
        raise FormatError(f"line {lineno}: non-positive dimensions for {rec.cls}")
    return rec


def read_labels(path) -> list[LabelRecord]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(parse_label_line(line, lineno))
                except FormatError as e:
                    raise FormatError(f"{path}:{e}") from None
    return out


def write_labels(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_line() + "\n")


def label_to_box3d(rec: LabelRecord, calib: Calibration) -> Box3D:
    """Camera-frame bottom-centre label -> sensor-frame geometric-centre box.

    Yaw follows the usual KITTI axis alignment (camera x right ~ sensor -y):
    yaw = -rotation_y - pi/2.
    """
    if rec.is_dontcare:
        raise ValueError("DontCare records have no 3D box")
    bottom = rect_to_velo(rec.location, calib)[0]
    return Box3D(bottom[0], bottom[1], bottom[2] + 0.5 * rec.h, rec.l, rec.w, rec.h,
                 -rec.rotation_y - 0.5 * math.pi)


def box3d_to_label(box: Box3D, calib: Calibration, template: LabelRecord | None = None,
                   cls: str = "Car") -> LabelRecord:
    bottom = velo_to_rect([box.cx, box.cy, box.cz - 0.5 * box.h], calib)[0]
    ry = normalize_angle(-box.yaw - 0.5 * math.pi)
    alpha = normalize_angle(ry - math.atan2(bottom[0], bottom[2]))
    if template is None:
        template = LabelRecord(cls, 0.0, 0, alpha, (0.0, 0.0, 0.0, 0.0), 0, 0, 0, (0, 0, 0), 0)
    return replace(template, h=box.h, w=box.w, l=box.l, location=tuple(float(v) for v in bottom),
                   rotation_y=ry)


def project_to_image(points, calib: Calibration, min_depth: float = 1e-6):
    """Pinhole projection of sensor-frame points.

    Returns (uv, in_front) where uv is (N, 2) pixels and in_front flags points
    with positive depth; uv rows of points behind the camera are NaN.
    """
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = velo_to_rect(xyz, calib)
    hom = np.hstack([cam, np.ones((len(cam), 1))]) @ calib.P.T
    in_front = cam[:, 2] > min_depth
    uv = np.full((len(xyz), 2), np.nan)
    uv[in_front] = hom[in_front, :2] / hom[in_front, 2:3]
    return uv, in_front


def project_box_to_image(box: Box3D, calib: Calibration):
    """Axis-aligned pixel hull of the projected corners, or None if any corner is behind the camera."""
    uv, ok = project_to_image(box_to_corners(box), calib)
    if not ok.all():
        return None
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def filter_points_in_image(pc: PointCloud, calib: Calibration, width: int, height: int) -> PointCloud:
    uv, ok = project_to_image(pc.xyz, calib)
    keep = ok.copy()
    keep[ok] = (uv[ok, 0] >= 0) & (uv[ok, 0] < width) & (uv[ok, 1] >= 0) & (uv[ok, 1] < height)
    return PointCloud(pc.points[keep])


def frame_ids(root) -> list[str]:
    d = os.path.join(root, "velodyne")
    return sorted(os.path.splitext(n)[0] for n in os.listdir(d) if n.endswith(".bin"))
