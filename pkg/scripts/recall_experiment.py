"""Proposal recall vs. budget on seeded synthetic scenes.

    python3 scripts/recall_experiment.py --scenes 20 --seed 7 --scorer oracle
"""
import argparse
import dataclasses
import json

from mvdet.config import load_config
from mvdet.evaluation import recall_3d
from mvdet.pipeline import Frame, anchors_for, frame_proposals, scene_seed
from mvdet.scenegen import generate_scene, scene_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scorer", choices=["oracle", "occupancy"], default="oracle")
    ap.add_argument("--budgets", type=int, nargs="*", default=[1, 10, 50, 100, 300])
    args = ap.parse_args()

    cfg = load_config(args.config, args.seed)
    anchors = anchors_for(cfg)
    props, gts = [], []
    for i in range(args.scenes):
        scene = generate_scene(dataclasses.replace(cfg.synth.scene, seed=scene_seed(cfg.seed, i)))
        frame = Frame(f"{i:06d}", scene.pc, scene.calib, scene_labels(scene), scene.image)
        props.append([(p.box, p.score) for p in frame_proposals(frame, cfg, anchors, scorer=args.scorer)])
        gts.append(frame.gt_boxes(cfg.eval.cls))
    rows = [{"budget": b, "iou": t, "recall": recall_3d(props, gts, t, b)}
            for t in cfg.eval.recall_iou for b in args.budgets]
    for r in rows:
        print(f"iou={r['iou']:<5g} budget={r['budget']:<4d} recall={r['recall']:.4f}")
    print(json.dumps({"scenes": args.scenes, "n_gt": sum(map(len, gts)), "rows": rows}))


if __name__ == "__main__":
    main()
