"""3D recall and AP_loc / AP_3D / AP_2D with KITTI difficulty regimes."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geom3d import Box3D, iou_3d_matrix, iou_bev_matrix
from .kitti_io import Calibration, LabelRecord, project_box_to_image

# KITTI devkit convention: min bbox height (px), max occlusion, max truncation
DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}
NEIGHBOUR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}
DEFAULT_IOU = {"bev": 0.5, "3d": 0.5, "2d": 0.7}


def recall_3d(proposals, gts, iou_threshold: float = 0.5, budget: int | None = None) -> float:
    """Fraction of gts matched one-to-one by the top-``budget`` proposals at 3D IoU >= threshold.

    ``proposals``/``gts`` are per-frame lists; proposals are (Box3D, score) pairs.
    Each proposal, in descending score order, takes its best still-unmatched gt.
    """
    total = matched = 0
    for props, frame_gts in zip(proposals, gts, strict=True):
        total += len(frame_gts)
        if not frame_gts or not props:
            continue
        order = sorted(range(len(props)), key=lambda i: (-props[i][1], i))
        if budget is not None:
            order = order[:budget]
        iou = iou_3d_matrix([props[i][0] for i in order], list(frame_gts))
        free = np.ones(len(frame_gts), dtype=bool)
        for row in iou:
            cand = np.where(free & (row >= iou_threshold), row, -1.0)
            j = int(cand.argmax())
            if cand[j] >= 0:
                free[j] = False
                matched += 1
    return matched / total if total else 0.0


def iou_2d_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of (x0, y0, x1, y1) pixel boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class FrameGT:
    frame_id: str
    boxes: list  # Box3D
    ignored: np.ndarray = None  # True: neither TP nor FN, and matching it is not an FP
    boxes2d: list = None  # per gt pixel box or None (behind camera)
    dontcare2d: list = field(default_factory=list)

    def __post_init__(self):
        if self.ignored is None:
            self.ignored = np.zeros(len(self.boxes), dtype=bool)
        self.ignored = np.asarray(self.ignored, dtype=bool)


@dataclass
class FrameDet:
    frame_id: str
    boxes: list  # Box3D
    scores: np.ndarray
    boxes2d: list = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("detection scores must be finite")


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    n_gt: int = 0


def _frame_iou(det: FrameDet, gt: FrameGT, matcher: str):
    if matcher == "bev":
        return iou_bev_matrix(det.boxes, gt.boxes)
    if matcher == "3d":
        return iou_3d_matrix(det.boxes, gt.boxes)
    if matcher == "2d":
        if det.boxes2d is None or gt.boxes2d is None:
            raise ValueError("2d matching needs projected boxes")
        out = np.zeros((len(det.boxes2d), len(gt.boxes2d)))
        dv = [i for i, b in enumerate(det.boxes2d) if b is not None]
        gv = [j for j, b in enumerate(gt.boxes2d) if b is not None]
        if dv and gv:
            out[np.ix_(dv, gv)] = iou_2d_matrix([det.boxes2d[i] for i in dv], [gt.boxes2d[j] for j in gv])
        return out
    raise ValueError(f"unknown matcher {matcher!r}")


def _in_dontcare(box2d, regions) -> bool:
    if box2d is None or not regions:
        return False
    d = np.asarray(box2d, dtype=np.float64)
    area = (d[2] - d[0]) * (d[3] - d[1])
    if area <= 0:
        return False
    for r in regions:
        iw = min(d[2], r[2]) - max(d[0], r[0])
        ih = min(d[3], r[3]) - max(d[1], r[1])
        if iw > 0 and ih > 0 and iw * ih / area >= 0.5:
            return True
    return False


def interpolated_ap(recall, precision, mode: str = "11") -> float:
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if mode == "11":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            sel = precision[recall >= t - 1e-12]
            ap += sel.max() if sel.size else 0.0
        return ap / 11.0
    if mode == "all":
        r = np.concatenate([[0.0], recall, [1.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        p = np.maximum.accumulate(p[::-1])[::-1]
        steps = np.nonzero(r[1:] != r[:-1])[0]
        return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))
    raise ValueError(f"unknown interpolation {mode!r}")


def match_detections(dets, gts, matcher: str = "bev", iou_threshold: float | None = None):
    """Score-descending greedy matching.  Returns (scores, is_tp, counted, n_gt)."""
    thr = DEFAULT_IOU[matcher] if iou_threshold is None else iou_threshold
    ids = [d.frame_id for d in dets]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate frame ids in detections")
    gt_ids = [g.frame_id for g in gts]
    if len(set(gt_ids)) != len(gt_ids):
        raise ValueError("duplicate frame ids in ground truth")
    by_id = {g.frame_id: g for g in gts}
    entries = []  # (score, frame order, det index)
    ious = {}
    for fi, d in enumerate(dets):
        g = by_id.get(d.frame_id)
        if g is None:
            g = FrameGT(d.frame_id, [])
            by_id[d.frame_id] = g
        ious[fi] = _frame_iou(d, g, matcher) if len(d.boxes) and len(g.boxes) else np.zeros((len(d.boxes), len(g.boxes)))
        entries += [(-float(s), fi, k) for k, s in enumerate(d.scores)]
    entries.sort()
    used = {fi: np.zeros(len(by_id[d.frame_id].boxes), dtype=bool) for fi, d in enumerate(dets)}
    ignored = {}
    for fid, g in by_id.items():
        ign = g.ignored.copy()
        if matcher == "2d" and g.boxes2d is not None:
            ign |= np.array([b is None for b in g.boxes2d], dtype=bool)
        ignored[fid] = ign
    n_gt = int(sum((~ign).sum() for ign in ignored.values()))
    scores, is_tp, counted = [], [], []
    for neg_s, fi, k in entries:
        g = by_id[dets[fi].frame_id]
        g_ign = ignored[g.frame_id]
        row = ious[fi][k] if ious[fi].size else np.zeros(0)
        ok = row >= thr
        care = ok & ~g_ign & ~used[fi]
        scores.append(-neg_s)
        if care.any():
            j = int(np.where(care, row, -1.0).argmax())
            used[fi][j] = True
            is_tp.append(True)
            counted.append(True)
        elif (ok & g_ign).any():
            is_tp.append(False)
            counted.append(False)
        else:
            box2d = dets[fi].boxes2d[k] if dets[fi].boxes2d is not None else None
            dc = _in_dontcare(box2d, g.dontcare2d)
            is_tp.append(False)
            counted.append(not dc)
    return np.array(scores), np.array(is_tp, dtype=bool), np.array(counted, dtype=bool), n_gt


def average_precision(dets, gts, matcher: str = "bev", iou_threshold: float | None = None,
                      interpolation: str = "11") -> PRCurve:
    """PR sweep and interpolated AP; returns NaN AP when no gt is counted."""
    scores, tp, counted, n_gt = match_detections(dets, gts, matcher, iou_threshold)
    tp, fp = tp[counted], ~tp[counted]
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    if n_gt == 0:
        return PRCurve(np.zeros(0), np.zeros(0), float("nan"), 0)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return PRCurve(recall, precision, interpolated_ap(recall, precision, interpolation), n_gt)


def difficulty_filter(labels, regime: str, cls: str = "Car"):
    """(retained, ignored) boolean masks over ``labels`` for one difficulty regime.

    Labels of other classes are neither retained nor ignored, except neighbour
    classes (e.g. Van for Car) and DontCare, which are ignored.
    """
    if regime not in DIFFICULTY:
        raise ValueError(f"unknown regime {regime!r}")
    min_h, max_occ, max_trunc = DIFFICULTY[regime]
    retained = np.zeros(len(labels), dtype=bool)
    ignored = np.zeros(len(labels), dtype=bool)
    for i, rec in enumerate(labels):
        if rec.cls == cls:
            ok = rec.bbox_height >= min_h and rec.occlusion <= max_occ and rec.truncation <= max_trunc
            retained[i], ignored[i] = ok, not ok
        elif rec.cls in NEIGHBOUR_CLASSES.get(cls, ()) or rec.is_dontcare:
            ignored[i] = True
    return retained, ignored


def project_detection_views(det: Box3D, calib: Calibration):
    """(oriented BEV footprint, image box or None when behind the camera)."""
    return det.bev(), project_box_to_image(det, calib)


def frame_gt_from_labels(frame_id: str, labels: list[LabelRecord], calib: Calibration,
                         regime: str | None = None, cls: str = "Car") -> FrameGT:
    from .kitti_io import label_to_box3d

    if regime is None:
        retained = np.array([r.cls == cls for r in labels], dtype=bool)
        ignored = np.array([r.cls in NEIGHBOUR_CLASSES.get(cls, ()) for r in labels], dtype=bool)
    else:
        retained, ignored = difficulty_filter(labels, regime, cls)
    boxes, ign, b2d = [], [], []
    for rec, keep, skip in zip(labels, retained, ignored):
        if rec.is_dontcare or not (keep or skip):
            continue
        box = label_to_box3d(rec, calib)
        boxes.append(box)
        ign.append(bool(skip))
        b2d.append(project_box_to_image(box, calib))
    dontcare = [r.bbox for r in labels if r.is_dontcare]
    return FrameGT(frame_id, boxes, np.array(ign, dtype=bool), b2d, dontcare)


def frame_det(frame_id: str, detections, calib: Calibration | None = None) -> FrameDet:
    boxes = [b for b, _ in detections]
    scores = [s for _, s in detections]
    b2d = [project_box_to_image(b, calib) for b in boxes] if calib is not None else None
    return FrameDet(frame_id, boxes, scores, b2d)


def write_pr_curve(path, curve: PRCurve):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["recall", "precision"])
        for r, p in zip(curve.recall, curve.precision):
            wr.writerow([repr(float(r)), repr(float(p))])


def write_summary(path, rows):
    with open(path, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
