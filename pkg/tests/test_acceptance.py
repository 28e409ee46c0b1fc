"""Acceptance suite: eleven release criteria at their pinned tolerances and time budgets.

Run with ``pytest tests/test_acceptance.py -v``; each criterion prints one PASS/FAIL line
(also repeated in the terminal summary).
"""
import dataclasses
import math
import time

import numpy as np
import pytest

from mvdet.config import RunConfig
from mvdet.evaluation import (FrameDet, FrameGT, average_precision, frame_det, frame_gt_from_labels,
                              recall_3d)
from mvdet.fusenet.codec import decode_corners, encode_corners
from mvdet.fusenet.gradcheck import SUITES, TOLERANCE, run_suite
from mvdet.fusenet.network import FusionConfig, FusionNet, drop_path_sample, global_mask
from mvdet.fusenet.train import SGDParams, train_toy
from mvdet.geom3d import BevBox, Box3D, box_to_corners, corners_to_box, iou_3d, iou_bev, normalize_angle
from mvdet.pipeline import Frame, anchors_for, frame_proposals, scene_seed
from mvdet.proposal import build_anchors, decode_targets, encode_targets, filter_empty_anchors
from mvdet.scenegen import SceneSpec, generate_scene, scene_labels
from mvdet.view_encode import BevConfig, FrontViewConfig, density, integral_image
from oracles import ap11, brute_kept, raster_iou_bev, voxel_iou_3d

RESULTS = []


@pytest.fixture
def criterion(request, capsys):
    """Yields a record dict; prints 'PASS|FAIL [n] name (detail, t s)' once the test body finishes."""
    rec = {"id": request.node.name, "detail": "", "ok": False, "budget": None}
    t0 = time.perf_counter()
    yield rec
    dt = time.perf_counter() - t0
    ok = rec["ok"] and (rec["budget"] is None or dt < rec["budget"])
    over = "" if rec["budget"] is None or dt < rec["budget"] else f" OVER BUDGET {rec['budget']}s"
    line = f"{'PASS' if ok else 'FAIL'} {rec['id']}: {rec['detail']} ({dt:.2f}s{over})"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)


def finish(rec, ok, detail, budget):
    rec.update(ok=bool(ok), detail=detail, budget=budget)
    assert ok, detail


# ---------------------------------------------------------------- 1. density formula


def test_c01_density_formula(criterion):
    vals = {0: density(0), 1: density(1), 62: density(62), 63: density(63), 64: density(64)}
    ok = (abs(vals[63] - 1.0) <= 1e-12 and abs(vals[1] - 1 / 6) <= 1e-12 and abs(vals[0]) <= 1e-12
          and vals[62] < 1.0 and vals[64] == 1.0
          and abs(vals[62] - math.log(63) / math.log(64)) <= 1e-12)
    finish(criterion, ok, f"d(0)={vals[0]} d(1)={vals[1]:.15f} d(62)={vals[62]:.6f} d(63)={vals[63]}", 1)


# ---------------------------------------------------------------- 2. grid dimensions


def test_c02_grid_dimensions(criterion):
    cfg = RunConfig()
    bev = cfg.bev.shape
    fv = (cfg.front_view.rows, cfg.front_view.cols)
    ok = bev == (704, 800) and fv == (64, 512) and BevConfig().shape == bev and FrontViewConfig().rows == 64
    finish(criterion, ok, f"bev={bev} fv={fv}", 1)


# ---------------------------------------------------------------- 3. rotated IoU vs rasterization


def _rand_box_bev(rng):
    return (*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 5, 2), rng.uniform(-math.pi, math.pi))


def test_c03_rotated_iou_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst_bev = 0.0
    for _ in range(1000):
        a, b = _rand_box_bev(rng), _rand_box_bev(rng)
        worst_bev = max(worst_bev, abs(iou_bev(BevBox(*a), BevBox(*b)) - raster_iou_bev(a, b, 2000)))
    worst_3d = 0.0
    for _ in range(200):
        a = (*rng.uniform(-2, 2, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 4, 2), rng.uniform(0.5, 2),
             rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-2, 2, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 4, 2), rng.uniform(0.5, 2),
             rng.uniform(-math.pi, math.pi))
        worst_3d = max(worst_3d, abs(iou_3d(Box3D(*a), Box3D(*b)) - voxel_iou_3d(a, b, 200)))
    finish(criterion, worst_bev <= 1e-3 and worst_3d <= 2e-3,
           f"max |Δ| bev={worst_bev:.2e} (tol 1e-3), 3d={worst_3d:.2e} (tol 2e-3)", 120)


# ---------------------------------------------------------------- 4. codec round trips


def _rand_boxes(rng, n):
    return np.column_stack([rng.uniform(0, 70, n), rng.uniform(-40, 40, n), rng.uniform(-3, 1, n),
                            rng.uniform(0.5, 6, n), rng.uniform(0.4, 3, n), rng.uniform(0.5, 3, n),
                            rng.uniform(-math.pi, math.pi, n)])


def test_c04_codec_round_trips(criterion):
    rng = np.random.default_rng(4)
    n = 10_000
    anchors, gts = _rand_boxes(rng, n), _rand_boxes(rng, n)
    t = encode_targets(anchors, gts)
    back = decode_targets(anchors, t)
    err_cs = max(np.abs(back[:, :6] - gts[:, :6]).max(), np.abs(encode_targets(anchors, back) - t).max())
    err_corner = 0.0
    for p, g in zip(anchors, gts):
        pb, gb = Box3D(*p), Box3D(*g)
        tc = encode_corners(pb, gb)
        corners = decode_corners(pb, tc)
        err_corner = max(err_corner, np.abs(corners - box_to_corners(gb)).max(),
                         np.abs(encode_corners(pb, corners_to_box(corners)) - tc).max())
        rb = corners_to_box(corners)
        err_corner = max(err_corner, np.abs(rb.to_array()[:6] - g[:6]).max(),
                         abs(normalize_angle(rb.yaw - g[6])))
    finish(criterion, err_cs <= 1e-9 and err_corner <= 1e-9,
           f"center/size max err={err_cs:.1e}, corners max err={err_corner:.1e} over {n} pairs", 10)


# ---------------------------------------------------------------- 5. integral-image anchor filter


def test_c05_integral_filter_equals_brute_force(criterion):
    bev = BevConfig(x_range=(0.0, 6.4), y_range=(-3.2, 3.2), resolution=0.1)
    anchors = build_anchors(bev)
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        occ = rng.random(bev.shape) < rng.uniform(0.0005, 0.01)
        fast = filter_empty_anchors(anchors, integral_image(occ), bev)
        mismatches += not np.array_equal(fast, brute_kept(anchors, occ, bev))
    finish(criterion, mismatches == 0, f"{mismatches}/100 maps differ ({len(anchors)} anchors each)", 30)


# ---------------------------------------------------------------- 6. gradient checks


def test_c06_gradient_checks(criterion):
    errors = {name: run_suite(name, 20, 0) for name in SUITES}
    worst = max(errors, key=errors.get)
    bad = [k for k, v in errors.items() if not v < TOLERANCE]
    finish(criterion, not bad and TOLERANCE <= 1e-4,
           f"{len(SUITES)} suites x 20 points, worst {worst}={errors[worst]:.1e}, failing={bad}", 120)


# ---------------------------------------------------------------- 7. fusion degeneracies


def test_c07_fusion_degeneracies(criterion):
    rng = np.random.default_rng(7)
    net = FusionNet(FusionConfig(mode="deep", n_layers=2, width=8, in_dims=(6, 6, 6)), seed=1)
    for v in (1, 2):
        net.stems[v].weight.data = net.stems[0].weight.data.copy()
        net.stems[v].bias.data = net.stems[0].bias.data.copy()
        for l in range(2):
            net.paths[v][l].weight.data = net.paths[0][l].weight.data.copy()
            net.paths[v][l].bias.data = net.paths[0][l].bias.data.copy()
    x = rng.normal(size=(9, 6))
    h = np.maximum(x @ net.stems[0].weight.data + net.stems[0].bias.data, 0)
    for l in range(2):
        h = np.maximum(h @ net.paths[0][l].weight.data + net.paths[0][l].bias.data, 0)
    err = np.abs(net.fuse([x, x, x]).data - h).max()
    identical = True
    for mode in ("early", "late", "deep"):
        m = FusionNet(FusionConfig(mode=mode, n_layers=2, width=8, in_dims=(6, 5, 4)), seed=2)
        xs = [rng.normal(size=(9, d)) for d in (6, 5, 4)]
        for v in range(3):
            c, b = m(xs, global_mask(m.config, v))
            sc, sb = m.forward_single_view(xs, v)
            identical &= np.array_equal(c.data, sc.data) and np.array_equal(b.data, sb.data)
    finish(criterion, err <= 1e-12 and identical,
           f"shared-path max err={err:.1e}, global drop-path bit-identical={identical}", 10)


# ---------------------------------------------------------------- 8. drop-path statistics


def test_c08_drop_path_statistics(criterion):
    rng = np.random.default_rng(8)
    n, n_global, violations = 100_000, 0, 0
    views = np.zeros(3)
    for _ in range(n):
        m, g = drop_path_sample(rng, 3)
        violations += int(not m.any(axis=1).all())
        if g:
            n_global += 1
            violations += int(not ((m == m[0]).all() and m[0].sum() == 1))
            views += m[0]
    freq, per_view = n_global / n, views / n_global
    ok = abs(freq - 0.5) <= 0.01 and np.all(np.abs(per_view - 1 / 3) <= 0.02) and violations == 0
    finish(criterion, ok, f"global={freq:.4f} per-view={np.round(per_view, 4).tolist()} violations={violations}",
           30)


# ---------------------------------------------------------------- 9. end-to-end recall


def test_c09_end_to_end_recall(criterion):
    cfg = RunConfig()
    anchors = anchors_for(cfg)
    props, gts = [], []
    for i in range(20):
        scene = generate_scene(SceneSpec(seed=scene_seed(7, i)))
        frame = Frame(f"{i:06d}", scene.pc, scene.calib, scene_labels(scene), scene.image)
        p = frame_proposals(frame, cfg, anchors)
        props.append([(q.box, q.score) for q in p])
        gts.append(frame.gt_boxes())
    r = recall_3d(props, gts, 0.5, 300)
    finish(criterion, r == 1.0, f"recall@0.5={r:.4f} over {sum(map(len, gts))} cars in 20 scenes", 60)


# ---------------------------------------------------------------- 10. metric sanity


def test_c10_metric_sanity(criterion):
    fgts, fdets = [], []
    for seed in range(5):
        s = generate_scene(SceneSpec(seed=seed))
        fgts.append(frame_gt_from_labels(str(seed), scene_labels(s), s.calib, "moderate"))
        fdets.append(frame_det(str(seed), [(b, 1.0 - 0.01 * i) for i, b in enumerate(s.boxes)], s.calib))
    perfect = {m: float(average_precision(fdets, fgts, m).ap) for m in ("bev", "3d", "2d")}

    car = lambda x, y=0.0: Box3D(x, y, -0.95, 3.9, 1.6, 1.56)
    gts = [FrameGT("a", [car(10), car(20), car(30), car(40)])]
    dets = [car(10), car(70, 20), car(20), car(30), car(70, -20)]
    scores = [0.9, 0.8, 0.7, 0.6, 0.5]
    curve = average_precision([FrameDet("a", dets, scores)], gts)
    hand_err = abs(curve.ap - 27 / 44)
    oracle_err = abs(curve.ap - ap11(curve.recall, curve.precision))

    rng = np.random.default_rng(10)
    invariant = True
    for _ in range(50):
        s = rng.random(5)
        base = average_precision([FrameDet("a", dets, s)], gts).ap
        for f in (lambda v: 7 * v - 3, np.exp, lambda v: v ** 5):
            invariant &= average_precision([FrameDet("a", dets, f(s))], gts).ap == base
    ok = all(v == 1.0 for v in perfect.values()) and hand_err <= 1e-9 and oracle_err <= 1e-9 and invariant
    finish(criterion, ok, f"labels-as-dets AP={perfect} fixture err={hand_err:.1e} invariant={invariant}", 10)


# ---------------------------------------------------------------- 11. toy training regression


def test_c11_toy_training_regression(criterion, toy_batch):
    # drop-path resamples the active subnetwork each step, which makes the loss non-monotone by design;
    # the regression runs the fixed-seed trainer with it disabled
    config = dataclasses.replace(FusionConfig(), drop_path=False)
    sgd = SGDParams(iterations=50, seed=0)
    a = train_toy(toy_batch, config, sgd).losses
    b = train_toy(toy_batch, config, sgd).losses
    monotone = all(y < x for x, y in zip(a, a[1:]))
    identical = [repr(v) for v in a] == [repr(v) for v in b]
    finish(criterion, len(a) == 50 and monotone and identical,
           f"loss {a[0]:.4f} -> {a[-1]:.4f}, strictly decreasing={monotone}, byte-identical={identical}", 60)
