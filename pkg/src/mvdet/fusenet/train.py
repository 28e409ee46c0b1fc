"""Multi-task loss, ROI sampling, SGD training loop and inference for the toy fusion network."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..geom3d import Box3D, iou_bev_matrix, nms_bev, corners_to_box
from ..kitti_io import PointCloud
from ..proposal import (build_anchors, decode_targets, encode_targets, filter_empty_anchors,
                        oracle_scorer, propose)
from ..view_encode import (BevConfig, FrontViewConfig, encode_bev, encode_front_view,
                           integral_image, read_arrays, write_arrays)
from .codec import decode_corners, encode_corners
from .layers import roi_pool
from .network import FusionConfig, FusionNet, drop_path_sample
from .roi import EmptyROIError, roi_project
from .tensor import Tensor, cross_entropy, smooth_l1_rows

log = logging.getLogger(__name__)

FINAL_NMS_IOU = 0.05
FV_DISTANCE_SCALE = 1.0 / 80.0


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration


def multitask_loss(cls_out: Tensor, box_out: Tensor, labels, targets, aux_outputs=(),
                   cls_weight: float = 1.0, box_weight: float = 1.0) -> Tensor:
    """Equal-weight sum of the main and auxiliary (cross-entropy + smooth-l1) losses.

    The box term only counts positive ROIs and is averaged over the whole batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(labels)
    pos = (labels > 0).astype(np.float64)
    total = None
    for c, b in [(cls_out, box_out), *aux_outputs]:
        if c.shape[0] != n or b.shape != targets.shape:
            raise ValueError(f"shape mismatch: cls {c.shape}, box {b.shape}, targets {targets.shape}, n={n}")
        ce = cross_entropy(c, labels).mean()
        reg = (smooth_l1_rows(b - targets) * pos).sum() * (1.0 / n)
        term = ce * cls_weight + reg * box_weight
        total = term if total is None else total + term
    return total


def final_nms(detections, iou_threshold: float = FINAL_NMS_IOU):
    """Greedy BEV NMS over (Box3D, score) pairs; returns the kept pairs."""
    if not detections:
        return []
    boxes, scores = zip(*detections)
    keep = nms_bev(list(boxes), list(scores), iou_threshold)
    return [detections[k] for k in keep]


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class ToyDataConfig:
    bev: BevConfig = BevConfig()
    fv: FrontViewConfig = FrontViewConfig()
    pool_size: tuple = (2, 2)
    anchor_stride: float = 0.4
    ground_z: float = -1.73
    n_proposals: int = 48
    jitter_xy: float = 0.6
    jitter_size: float = 0.1
    positive_iou: float = 0.5


@dataclass
class RoiBatch:
    """Pooled per-view ROI features with classification/regression targets."""
    feats: list  # three (N, d_v) arrays
    labels: np.ndarray
    corner_targets: np.ndarray
    size_targets: np.ndarray
    proposals: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "RoiBatch":
        return RoiBatch([f[idx] for f in self.feats], self.labels[idx], self.corner_targets[idx],
                        self.size_targets[idx], [self.proposals[i] for i in idx])

    def targets(self, head: str) -> np.ndarray:
        return self.corner_targets if head == "corners" else self.size_targets


def view_maps(pc: PointCloud, image, cfg: ToyDataConfig):
    bev, occ = encode_bev(pc, cfg.bev)
    fv = encode_front_view(pc, cfg.fv).data.copy()
    fv[1] *= FV_DISTANCE_SCALE
    rgb = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return [Tensor(bev.data), Tensor(fv), Tensor(rgb)], occ


def pool_rois(maps, boxes, calib, cfg: ToyDataConfig):
    """Per-view flattened ROI-pooled features; boxes whose ROI is empty in some view are dropped."""
    metas = (cfg.bev, cfg.fv, (maps[2].shape[2], maps[2].shape[1]))
    feats, kept = [[], [], []], []
    for i, box in enumerate(boxes):
        try:
            rois = [roi_project(box, v, calib, m) for v, m in zip(("bev", "fv", "rgb"), metas)]
        except EmptyROIError:
            continue
        for v in range(3):
            feats[v].append(roi_pool(maps[v], rois[v], cfg.pool_size).data.ravel())
        kept.append(i)
    dims = [m.shape[0] * cfg.pool_size[0] * cfg.pool_size[1] for m in maps]
    return [np.array(f).reshape(-1, d) for f, d in zip(feats, dims)], kept


def scene_proposals(pc, gts, cfg: ToyDataConfig, rng, budget: int):
    """Oracle-scored proposals, then jittered so the second stage has something to regress."""
    anchors = build_anchors(cfg.bev, cfg.anchor_stride, ground_z=cfg.ground_z)
    _, occ = encode_bev(pc, cfg.bev)
    kept = filter_empty_anchors(anchors, integral_image(occ), cfg.bev)
    scores, targets = oracle_scorer(anchors, kept, gts)
    props = propose(anchors, scores, targets, train_mode=False, indices=kept, test_budget=budget)
    out = []
    for p in props:
        b = p.box
        jit = rng.normal(0.0, 1.0, 5)
        out.append(Box3D(b.cx + cfg.jitter_xy * jit[0], b.cy + cfg.jitter_xy * jit[1], b.cz,
                         b.l * math.exp(cfg.jitter_size * jit[2]), b.w * math.exp(cfg.jitter_size * jit[3]),
                         b.h * math.exp(cfg.jitter_size * jit[4]), b.yaw))
    return out


def build_roi_batch(scene, cfg: ToyDataConfig, rng, proposals=None) -> RoiBatch:
    gts = list(scene.boxes)
    if proposals is None:
        proposals = scene_proposals(scene.pc, gts, cfg, rng, cfg.n_proposals)
    maps, _ = view_maps(scene.pc, scene.image, cfg)
    feats, kept = pool_rois(maps, proposals, scene.calib, cfg)
    props = [proposals[i] for i in kept]
    n = len(props)
    labels = np.zeros(n, dtype=np.int64)
    ct, st = np.zeros((n, 24)), np.zeros((n, 6))
    if n and gts:
        iou = iou_bev_matrix(props, gts)
        best = iou.argmax(axis=1)
        for i, p in enumerate(props):
            if iou[i, best[i]] > cfg.positive_iou:
                labels[i] = 1
                ct[i] = encode_corners(p, gts[best[i]])
                st[i] = encode_targets(p, gts[best[i]])
    return RoiBatch(feats, labels, ct, st, props)


def concat_batches(batches) -> RoiBatch:
    return RoiBatch([np.concatenate([b.feats[v] for b in batches]) for v in range(3)],
                    np.concatenate([b.labels for b in batches]),
                    np.concatenate([b.corner_targets for b in batches]),
                    np.concatenate([b.size_targets for b in batches]),
                    [p for b in batches for p in b.proposals])


def sample_rois(labels, rng, batch_size: int = 128, pos_fraction: float = 0.25) -> np.ndarray:
    """Indices of a minibatch with up to ``pos_fraction`` positives; negatives fill the rest."""
    labels = np.asarray(labels)
    if len(labels) <= batch_size:
        return np.arange(len(labels))
    pos = np.nonzero(labels > 0)[0]
    neg = np.nonzero(labels <= 0)[0]
    n_pos = min(len(pos), int(round(batch_size * pos_fraction)))
    n_neg = min(len(neg), batch_size - n_pos)
    n_pos = min(len(pos), batch_size - n_neg)
    idx = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(idx)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class SGDParams:
    lr: float = 1e-3
    momentum: float = 0.0
    iterations: int = 50
    batch_size: int = 128
    pos_fraction: float = 0.25
    seed: int = 0


@dataclass
class TrainResult:
    net: FusionNet
    losses: list = field(default_factory=list)


def train_toy(batch: RoiBatch, config: FusionConfig, sgd: SGDParams = SGDParams()) -> TrainResult:
    """SGD on a precomputed ROI batch.  Deterministic in ``sgd.seed``."""
    rng = np.random.default_rng(sgd.seed)
    net = FusionNet(config, seed=sgd.seed)
    params = net.parameters()
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    targets_all = batch.targets(config.head)
    losses = []
    for it in range(sgd.iterations):
        idx = sample_rois(batch.labels, rng, sgd.batch_size, sgd.pos_fraction)
        feats = [f[idx] for f in batch.feats]
        mask = drop_path_sample(rng, config.n_joins)[0] if config.drop_path else None
        cls_out, box_out = net(feats, mask)
        aux = net.aux_outputs(feats) if config.aux_loss else ()
        loss = multitask_loss(cls_out, box_out, batch.labels[idx], targets_all[idx], aux,
                              config.cls_weight, config.box_weight)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(it, value)
        losses.append(value)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        for k, p in params.items():
            if p.grad is None:
                continue
            velocity[k] = sgd.momentum * velocity[k] - sgd.lr * p.grad
            p.data = p.data + velocity[k]
        log.debug("iter %d loss %.6f", it, value)
    return TrainResult(net, losses)


def predict(net: FusionNet, batch: RoiBatch):
    """Inference: all paths, no drop-path, no auxiliary heads.  Returns (scores, boxes)."""
    if len(batch) == 0:
        return np.zeros(0), []
    cls_out, box_out = net(batch.feats)
    logits = cls_out.data
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    boxes = []
    for p, t in zip(batch.proposals, box_out.data):
        try:
            if net.config.head == "corners":
                boxes.append(corners_to_box(decode_corners(p, t)))
            else:
                boxes.append(decode_targets(p, t))
        except ValueError:
            boxes.append(None)
    return prob[:, 1], boxes


def infer(net: FusionNet, batch: RoiBatch, score_threshold: float = 0.0):
    scores, boxes = predict(net, batch)
    dets = [(b, float(s)) for b, s in zip(boxes, scores) if b is not None and s >= score_threshold]
    return final_nms(dets)


# ---------------------------------------------------------------- serialisation


def save_params(stem, net: FusionNet):
    from dataclasses import asdict

    write_arrays(stem, net.state(), {"kind": "fusenet_params", "config": asdict(net.config)}, dtype="<f8")


def load_params(stem) -> FusionNet:
    arrays, meta = read_arrays(stem)
    cfg = meta["config"]
    cfg["in_dims"] = tuple(cfg["in_dims"])
    net = FusionNet(FusionConfig(**cfg))
    net.load_state(arrays)
    return net


def write_loss_trace(path, losses):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            wr.writerow([i, repr(v)])
