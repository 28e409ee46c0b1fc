"""Anchor grid, empty-anchor removal, centre/size codec, assignment and proposal NMS."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geom3d import Box3D, BevBox, iou_bev_matrix, nms_bev
from .view_encode import BevConfig, rect_sum

DEFAULT_PRIORS = ((3.9, 1.6), (1.0, 0.6))
PRIOR_HEIGHT = 1.56
ROTATIONS = (0.0, 0.5 * math.pi)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (N, 7): cx, cy, cz, l, w, h, yaw
    feature_shape: tuple
    stride: float
    priors: tuple
    rotations: tuple

    def __len__(self):
        return len(self.boxes)

    @property
    def per_location(self) -> int:
        return len(self.priors) * len(self.rotations)

    def box(self, i) -> Box3D:
        return Box3D.from_array(self.boxes[i])

    def footprint_extents(self) -> np.ndarray:
        """(N, 2) extents along x and y; exact since yaw is 0 or 90 degrees."""
        swap = np.isclose(np.abs(np.sin(self.boxes[:, 6])), 1.0)
        ext = self.boxes[:, 3:5].copy()
        ext[swap] = ext[swap][:, ::-1]
        return ext


def build_anchors(bev: BevConfig = BevConfig(), stride: float = 0.4, priors=DEFAULT_PRIORS,
                  height: float = PRIOR_HEIGHT, rotations=ROTATIONS, ground_z: float = -1.73) -> AnchorSet:
    """One anchor per (feature-map cell, prior, rotation), flat index ((i*W)+j)*P + p."""
    ratio = stride / bev.resolution
    if stride <= 0 or abs(ratio - round(ratio)) > 1e-6:
        raise ValueError("stride must be a positive multiple of the BEV resolution")
    rows, cols = bev.shape
    k = int(round(ratio))
    fh, fw = -(-rows // k), -(-cols // k)
    xs = bev.x_range[0] + (np.arange(fh) + 0.5) * stride
    ys = bev.y_range[0] + (np.arange(fw) + 0.5) * stride
    shapes = [(l, w, yaw) for (l, w) in priors for yaw in rotations]
    gx, gy, gp = np.meshgrid(xs, ys, np.arange(len(shapes)), indexing="ij")
    shp = np.array(shapes)[gp.ravel()]
    boxes = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, ground_z + 0.5 * height),
                             shp[:, 0], shp[:, 1], np.full(gx.size, height), shp[:, 2]])
    return AnchorSet(boxes, (fh, fw), stride, tuple(priors), tuple(rotations))


def anchor_cell_ranges(anchors: AnchorSet, bev: BevConfig):
    """Inclusive BEV cell ranges (r0, c0, r1, c1) of cells whose centres lie in each footprint."""
    ext = anchors.footprint_extents()
    rows, cols = bev.shape
    u0, v0 = bev.to_cells(anchors.boxes[:, 0] - 0.5 * ext[:, 0], anchors.boxes[:, 1] - 0.5 * ext[:, 1])
    u1, v1 = bev.to_cells(anchors.boxes[:, 0] + 0.5 * ext[:, 0], anchors.boxes[:, 1] + 0.5 * ext[:, 1])
    tol = 1e-9
    r0 = np.clip(np.ceil(u0 - 0.5 - tol), 0, None).astype(np.int64)
    c0 = np.clip(np.ceil(v0 - 0.5 - tol), 0, None).astype(np.int64)
    r1 = np.clip(np.floor(u1 - 0.5 + tol), None, rows - 1).astype(np.int64)
    c1 = np.clip(np.floor(v1 - 0.5 + tol), None, cols - 1).astype(np.int64)
    return r0, c0, r1, c1


def filter_empty_anchors(anchors: AnchorSet, integral, bev: BevConfig = BevConfig()) -> np.ndarray:
    """Indices of anchors whose footprint covers at least one occupied cell."""
    r0, c0, r1, c1 = anchor_cell_ranges(anchors, bev)
    counts = rect_sum(integral, r0, c0, r1, c1)
    return np.nonzero(counts > 0)[0]


def encode_targets(anchors, gts) -> np.ndarray:
    """(dx, dy, dz, dl, dw, dh); offsets over anchor l, w, h; sizes as log ratios.

    Accepts Box3D pairs or (N, 7) arrays.
    """
    a, g = _as_arr(anchors), _as_arr(gts)
    t = np.empty(a.shape[:-1] + (6,))
    t[..., 0] = (g[..., 0] - a[..., 0]) / a[..., 3]
    t[..., 1] = (g[..., 1] - a[..., 1]) / a[..., 4]
    t[..., 2] = (g[..., 2] - a[..., 2]) / a[..., 5]
    t[..., 3:6] = np.log(g[..., 3:6] / a[..., 3:6])
    return t


def decode_targets(anchors, targets):
    """Inverse of encode_targets; yaw copied from the anchor."""
    a = _as_arr(anchors)
    t = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite regression target")
    out = np.empty(np.broadcast_shapes(a.shape[:-1], t.shape[:-1]) + (7,))
    out[..., 0] = a[..., 0] + t[..., 0] * a[..., 3]
    out[..., 1] = a[..., 1] + t[..., 1] * a[..., 4]
    out[..., 2] = a[..., 2] + t[..., 2] * a[..., 5]
    out[..., 3:6] = a[..., 3:6] * np.exp(t[..., 3:6])
    out[..., 6] = a[..., 6]
    if isinstance(anchors, Box3D):
        return Box3D.from_array(out)
    return out


def _as_arr(x) -> np.ndarray:
    if isinstance(x, Box3D):
        return x.to_array()
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Box3D):
        return np.array([b.to_array() for b in x])
    return np.asarray(x, dtype=np.float64)


def _bevs(arr) -> list:
    return [BevBox(b[0], b[1], b[3], b[4], b[6]) for b in arr]


def assign_anchors(anchors, gts, pos_threshold: float = 0.7, neg_threshold: float = 0.5,
                   force_best: bool = True):
    """Label anchors positive / negative / ignore by max BEV IoU over ground truths.

    Returns (labels, matched_gt, max_iou); matched_gt is -1 where no gt overlaps.
    With ``force_best`` every gt's highest-IoU anchor(s) become positive.
    """
    arr = anchors.boxes if isinstance(anchors, AnchorSet) else _as_arr(anchors)
    n = len(arr)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    if len(gts) == 0:
        return labels, np.full(n, -1), np.zeros(n)
    iou = iou_bev_matrix(_bevs(arr), gts)
    best = iou.argmax(axis=1)
    max_iou = iou[np.arange(n), best]
    matched = np.where(max_iou > 0, best, -1)
    labels[max_iou >= neg_threshold] = IGNORE
    labels[max_iou > pos_threshold] = POSITIVE
    if force_best:
        col_max = iou.max(axis=0)
        for j in range(iou.shape[1]):
            if col_max[j] > 0:
                hit = np.nonzero(iou[:, j] == col_max[j])[0]
                labels[hit] = POSITIVE
                matched[hit] = j
    return labels, matched, max_iou


@dataclass
class Proposal:
    box: Box3D
    score: float
    anchor: int


def propose(anchors: AnchorSet, scores, targets, train_mode: bool = False, indices=None,
            nms_threshold: float = 0.7, train_budget: int = 2000, test_budget: int = 300) -> list[Proposal]:
    """Decode, BEV-NMS and truncate to the train/test budget, highest score first.

    ``indices`` selects the anchor subset that ``scores``/``targets`` are aligned with
    (typically the output of filter_empty_anchors); default is all anchors.
    """
    idx = np.arange(len(anchors)) if indices is None else np.asarray(indices)
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(idx), 6)
    if len(scores) != len(idx):
        raise ValueError("scores and anchors are not aligned")
    if len(idx) == 0:
        return []
    decoded = decode_targets(anchors.boxes[idx], targets)
    budget = train_budget if train_mode else test_budget
    keep = nms_bev(_bevs(decoded), scores, nms_threshold, max_keep=budget)
    return [Proposal(Box3D.from_array(decoded[k]), float(scores[k]), int(idx[k])) for k in keep]


def oracle_scorer(anchors: AnchorSet, indices, gts):
    """Score = max BEV IoU with any gt; target = exact offset to that gt (zero if none)."""
    arr = anchors.boxes[indices]
    if len(gts) == 0 or len(arr) == 0:
        return np.zeros(len(arr)), np.zeros((len(arr), 6))
    iou = iou_bev_matrix(_bevs(arr), gts)
    best = iou.argmax(axis=1)
    scores = iou[np.arange(len(arr)), best]
    gt_arr = _as_arr(list(gts))
    targets = np.where(scores[:, None] > 0, encode_targets(arr, gt_arr[best]), 0.0)
    return scores, targets


def occupancy_scorer(anchors: AnchorSet, indices, integral, bev: BevConfig = BevConfig()):
    """Label-free heuristic: fraction of occupied cells under the anchor; zero targets."""
    r0, c0, r1, c1 = (v[indices] for v in anchor_cell_ranges(anchors, bev))
    area = np.maximum((r1 - r0 + 1) * (c1 - c0 + 1), 1)
    return rect_sum(integral, r0, c0, r1, c1) / area, np.zeros((len(indices), 6))


PROPOSAL_FIELDS = ["index", "score", "cx", "cy", "cz", "l", "w", "h", "yaw"]


def write_proposals(path, proposals):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(PROPOSAL_FIELDS)
        for p in proposals:
            b = p.box
            wr.writerow([p.anchor] + [repr(float(v)) for v in (p.score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)])


def read_proposals(path) -> list[Proposal]:
    out = []
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != PROPOSAL_FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        for row in rd:
            box = Box3D(*(float(row[k]) for k in PROPOSAL_FIELDS[2:]))
            out.append(Proposal(box, float(row["score"]), int(row["index"])))
    return out
