"""Frame-level glue shared by the CLI and the experiment scripts."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .fusenet.train import ToyDataConfig
from .geom3d import Box3D
from .kitti_io import (Calibration, LabelRecord, PointCloud, label_to_box3d, parse_label_line,
                       read_calib, read_labels, read_velodyne)
from .proposal import (AnchorSet, Proposal, build_anchors, filter_empty_anchors, occupancy_scorer,
                       oracle_scorer, propose)
from .scenegen import Scene, read_image
from .view_encode import encode_bev, integral_image


@dataclass
class Frame:
    frame_id: str
    pc: PointCloud
    calib: Calibration
    labels: list
    image: np.ndarray = None

    def gt_boxes(self, cls: str = "Car") -> list[Box3D]:
        return [label_to_box3d(r, self.calib) for r in self.labels if r.cls == cls]

    def as_scene(self, cls: str = "Car") -> Scene:
        boxes = self.gt_boxes(cls)
        return Scene(self.pc, boxes, self.calib, [cls] * len(boxes), None, self.image)


def load_frame(root: str, frame_id: str, camera: str = "P2") -> Frame:
    pc = read_velodyne(os.path.join(root, "velodyne", f"{frame_id}.bin"))
    calib = read_calib(os.path.join(root, "calib", f"{frame_id}.txt"), camera)
    lp = os.path.join(root, "label_2", f"{frame_id}.txt")
    labels = read_labels(lp) if os.path.exists(lp) else []
    ip = os.path.join(root, "image_2", f"{frame_id}.png")
    image = read_image(ip) if os.path.exists(ip) else None
    return Frame(frame_id, pc, calib, labels, image)


def anchors_for(cfg: RunConfig) -> AnchorSet:
    a = cfg.anchors
    return build_anchors(cfg.bev, a.stride, a.priors, a.height,
                         tuple(math.radians(r) for r in a.rotations_deg), a.ground_z)


def frame_proposals(frame: Frame, cfg: RunConfig, anchors: AnchorSet | None = None,
                    train_mode: bool = False, scorer: str | None = None) -> list[Proposal]:
    """Empty-anchor filter -> score -> decode -> BEV NMS -> budget."""
    anchors = anchors if anchors is not None else anchors_for(cfg)
    _, occ = encode_bev(frame.pc, cfg.bev)
    integral = integral_image(occ)
    kept = filter_empty_anchors(anchors, integral, cfg.bev)
    scorer = scorer or cfg.proposal.scorer
    if scorer == "oracle":
        scores, targets = oracle_scorer(anchors, kept, frame.gt_boxes(cfg.eval.cls))
    elif scorer == "occupancy":
        scores, targets = occupancy_scorer(anchors, kept, integral, cfg.bev)
    else:
        raise ValueError(f"unknown scorer {scorer!r}")
    p = cfg.proposal
    return propose(anchors, scores, targets, train_mode, kept, p.nms_iou, p.train_budget, p.test_budget)


def toy_data_config(cfg: RunConfig) -> ToyDataConfig:
    t = cfg.toy
    return ToyDataConfig(cfg.bev, cfg.front_view, tuple(t.pool_size), cfg.anchors.stride,
                         cfg.anchors.ground_z, t.n_proposals, t.jitter_xy, t.jitter_size, t.positive_iou)


def read_kitti_detections(path, calib: Calibration, cls: str = "Car"):
    """(Box3D, score) pairs from a KITTI label file; an optional 16th column is the score."""
    dets = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            score = 1.0
            if len(parts) == 16:
                score = float(parts[15])
                parts = parts[:15]
            rec: LabelRecord = parse_label_line(" ".join(parts), lineno)
            if rec.cls == cls:
                dets.append((label_to_box3d(rec, calib), score))
    return dets


DETECTION_FIELDS = ["frame", "score", "cx", "cy", "cz", "l", "w", "h", "yaw"]


def write_detections(path, rows):
    """rows: iterable of (frame_id, Box3D, score)."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(DETECTION_FIELDS)
        for fid, b, s in rows:
            wr.writerow([fid] + [repr(float(v)) for v in (s, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)])


def read_detections(path) -> dict:
    """frame_id -> list of (Box3D, score)."""
    out: dict = {}
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != DETECTION_FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        for row in rd:
            box = Box3D(*(float(row[k]) for k in DETECTION_FIELDS[2:]))
            out.setdefault(row["frame"], []).append((box, float(row["score"])))
    return out


def scene_seed(base: int, index: int) -> int:
    """Independent per-scene seed derived from the run seed."""
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])
