"""Command-line entry point: synth | encode | propose | train-toy | infer | eval | gradcheck.

Every subcommand writes the effective configuration to ``<out>/config.json``.
Errors exit nonzero with a one-line JSON record ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys

import numpy as np

from .config import RunConfig, dump_config, load_config
from .evaluation import (average_precision, frame_det, frame_gt_from_labels, recall_3d, write_pr_curve,
                         write_summary)
from .kitti_io import frame_ids, read_calib, read_velodyne
from .pipeline import (anchors_for, frame_proposals, load_frame, read_detections, read_kitti_detections,
                       scene_seed, toy_data_config, write_detections)
from .proposal import read_proposals, write_proposals

log = logging.getLogger("mvdet")


class UsageError(ValueError):
    pass


def _frames(args) -> list[str]:
    ids = frame_ids(args.data)
    if args.frames:
        missing = sorted(set(args.frames) - set(ids))
        if missing:
            raise UsageError(f"unknown frames: {missing}")
        ids = [f for f in ids if f in set(args.frames)]
    return ids


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: RunConfig, args):
    from .scenegen import generate_scene, write_scene

    n = args.n_scenes if args.n_scenes is not None else cfg.synth.n_scenes
    for i in range(n):
        spec = dataclasses.replace(cfg.synth.scene, seed=scene_seed(cfg.seed, i))
        write_scene(args.out, f"{i:06d}", generate_scene(spec))
    log.info("wrote %d scenes to %s", n, args.out)


def cmd_encode(cfg: RunConfig, args):
    from .view_encode import default_paths, encode_bev, encode_front_view, write_bev, write_front_view

    if args.velodyne:
        jobs = [(os.path.splitext(os.path.basename(args.velodyne))[0], args.velodyne)]
    elif args.data:
        jobs = [(f, os.path.join(args.data, "velodyne", f"{f}.bin")) for f in _frames(args)]
    else:
        raise UsageError("encode needs --velodyne or --data")
    for frame, path in jobs:
        pc = read_velodyne(path)
        bev_stem, fv_stem = default_paths(args.out, frame)
        write_bev(bev_stem, encode_bev(pc, cfg.bev)[0])
        write_front_view(fv_stem, encode_front_view(pc, cfg.front_view))


def cmd_propose(cfg: RunConfig, args):
    anchors = anchors_for(cfg)
    out = os.path.join(args.out, "proposals")
    os.makedirs(out, exist_ok=True)
    for f in _frames(args):
        props = frame_proposals(load_frame(args.data, f, cfg.camera), cfg, anchors, args.train_mode,
                                args.scorer)
        _atomic(os.path.join(out, f"{f}.csv"), lambda p, props=props: write_proposals(p, props))


def _toy_batches(cfg: RunConfig, args, proposals_dir=None):
    from .fusenet.train import build_roi_batch

    data_cfg = toy_data_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    batches = []
    for f in _frames(args):
        frame = load_frame(args.data, f, cfg.camera)
        if frame.image is None:
            raise UsageError(f"frame {f} has no image_2 entry")
        props = None
        if proposals_dir:
            props = [p.box for p in read_proposals(os.path.join(proposals_dir, f"{f}.csv"))]
        batches.append((f, build_roi_batch(frame.as_scene(cfg.eval.cls), data_cfg, rng, props)))
    return batches


def cmd_train_toy(cfg: RunConfig, args):
    from .fusenet.train import concat_batches, save_params, train_toy, write_loss_trace

    batch = concat_batches([b for _, b in _toy_batches(cfg, args)])
    if len(batch) == 0:
        raise UsageError("no ROIs survived projection; nothing to train on")
    result = train_toy(batch, cfg.fusion, cfg.train)
    save_params(os.path.join(args.out, "params"), result.net)
    write_loss_trace(os.path.join(args.out, "loss_trace.csv"), result.losses)
    log.info("final loss %.6f", result.losses[-1] if result.losses else float("nan"))


def cmd_infer(cfg: RunConfig, args):
    from .fusenet.train import final_nms, load_params, predict

    net = load_params(args.params)
    rows = []
    for f, batch in _toy_batches(cfg, args, args.proposals):
        scores, boxes = predict(net, batch)
        dets = [(b, float(s)) for b, s in zip(boxes, scores) if b is not None and s >= cfg.toy.score_threshold]
        rows += [(f, b, s) for b, s in final_nms(dets, cfg.toy.final_nms_iou)] if dets else []
    _atomic(os.path.join(args.out, "detections.csv"), lambda p: write_detections(p, rows))


def _load_detections(cfg: RunConfig, args, frames):
    if os.path.isdir(args.detections):
        out = {}
        for f in frames:
            path = os.path.join(args.detections, f"{f}.txt")
            if os.path.exists(path):
                calib = read_calib(os.path.join(args.data, "calib", f"{f}.txt"), cfg.camera)
                out[f] = read_kitti_detections(path, calib, cfg.eval.cls)
        return out
    return read_detections(args.detections)


def _num(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def cmd_eval(cfg: RunConfig, args):
    e = cfg.eval
    frames = _frames(args)
    loaded = {f: load_frame(args.data, f, cfg.camera) for f in frames}
    summary = {"n_frames": len(frames), "ap": [], "recall": []}
    if args.detections:
        dets = _load_detections(cfg, args, frames)
        unknown = sorted(set(dets) - set(frames))
        if unknown:
            raise UsageError(f"detections for unknown frames: {unknown}")
        fdets = [frame_det(f, dets.get(f, []), loaded[f].calib) for f in frames]
        pr_dir = os.path.join(args.out, "pr")
        os.makedirs(pr_dir, exist_ok=True)
        plan = [("AP_loc", "bev", e.bev_iou), ("AP_3D", "3d", e.iou_3d), ("AP_2D", "2d", e.iou_2d)]
        for regime in e.regimes:
            gts = [frame_gt_from_labels(f, loaded[f].labels, loaded[f].calib, regime, e.cls) for f in frames]
            for metric, matcher, thresholds in plan:
                for thr in thresholds:
                    curve = average_precision(fdets, gts, matcher, thr, e.interpolation)
                    name = f"{metric}_{regime}_{thr:g}"
                    write_pr_curve(os.path.join(pr_dir, f"{name}.csv"), curve)
                    summary["ap"].append({"metric": metric, "regime": regime, "iou": thr,
                                          "ap": _num(curve.ap), "n_gt": curve.n_gt})
    if args.proposals:
        props = [[(p.box, p.score) for p in read_proposals(os.path.join(args.proposals, f"{f}.csv"))]
                 for f in frames]
        gts = [loaded[f].gt_boxes(e.cls) for f in frames]
        for thr in e.recall_iou:
            summary["recall"].append({"iou": thr, "budget": e.recall_budget,
                                      "recall": recall_3d(props, gts, thr, e.recall_budget),
                                      "n_gt": sum(map(len, gts))})
    if not (args.detections or args.proposals):
        raise UsageError("eval needs --detections and/or --proposals")
    write_summary(os.path.join(args.out, "metrics.json"), summary)
    for row in summary["ap"]:
        print(f"{row['metric']:7s} {row['regime']:9s} iou={row['iou']:<5g} ap={row['ap']}")
    for row in summary["recall"]:
        print(f"recall  iou={row['iou']:<5g} budget={row['budget']} recall={row['recall']:.4f}")


def cmd_gradcheck(cfg: RunConfig, args):
    from .fusenet.gradcheck import SUITES, TOLERANCE, run_suite

    names = args.suite or list(SUITES)
    unknown = sorted(set(names) - set(SUITES))
    if unknown:
        raise UsageError(f"unknown suites: {unknown}")
    report = {}
    for name in names:
        err = run_suite(name, args.points, cfg.seed)
        report[name] = {"max_rel_error": err, "pass": err < TOLERANCE}
        print(f"{'PASS' if err < TOLERANCE else 'FAIL'} {name} max_rel_error={err:.3e}")
    write_summary(os.path.join(args.out, "gradcheck.json"), report)
    failed = [k for k, v in report.items() if not v["pass"]]
    if failed:
        raise GradcheckFailed(f"suites above tolerance {TOLERANCE}: {failed}")


class GradcheckFailed(RuntimeError):
    pass


def _atomic(path, writer):
    tmp = path + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config overriding the defaults")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="KITTI-layout root (velodyne/, calib/, label_2/, image_2/)")
    data.add_argument("--frames", nargs="*", help="restrict to these frame ids")

    p = argparse.ArgumentParser(prog="mvdet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic KITTI-format scenes")
    s.add_argument("--n-scenes", type=int)

    s = sub.add_parser("encode", parents=[common], help="serialize BEV and front-view grids")
    s.add_argument("--velodyne", help="single velodyne .bin file")
    s.add_argument("--data")
    s.add_argument("--frames", nargs="*")

    s = sub.add_parser("propose", parents=[common, data], help="anchor proposals per frame")
    s.add_argument("--scorer", choices=["oracle", "occupancy"])
    s.add_argument("--train-mode", action="store_true", help="use the training budget")

    sub.add_parser("train-toy", parents=[common, data], help="train the toy fusion network")

    s = sub.add_parser("infer", parents=[common, data], help="toy-network detections after final NMS")
    s.add_argument("--params", required=True, help="parameter file stem written by train-toy")
    s.add_argument("--proposals", help="directory of per-frame proposal CSVs")

    s = sub.add_parser("eval", parents=[common, data], help="AP and recall metrics")
    s.add_argument("--detections", help="detections CSV or directory of KITTI label files")
    s.add_argument("--proposals", help="directory of per-frame proposal CSVs (3D recall)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    s.add_argument("--points", type=int, default=20)
    s.add_argument("--suite", nargs="*")
    return p


COMMANDS = {"synth": cmd_synth, "encode": cmd_encode, "propose": cmd_propose, "train-toy": cmd_train_toy,
            "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        dump_config(cfg, os.path.join(args.out, "config.json"))
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # every module error becomes a machine-readable record
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
