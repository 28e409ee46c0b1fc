"""Single run configuration document; defaults carry the published pipeline values."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .fusenet.network import FusionConfig
from .fusenet.train import SGDParams
from .scenegen import ObjectClass, SceneSpec
from .view_encode import BevConfig, FrontViewConfig


@dataclass(frozen=True)
class AnchorConfig:
    stride: float = 0.4
    priors: tuple = ((3.9, 1.6), (1.0, 0.6))
    height: float = 1.56
    rotations_deg: tuple = (0.0, 90.0)
    ground_z: float = -1.73


@dataclass(frozen=True)
class ProposalConfig:
    nms_iou: float = 0.7
    train_budget: int = 2000
    test_budget: int = 300
    pos_iou: float = 0.7
    neg_iou: float = 0.5
    force_best: bool = True
    scorer: str = "oracle"  # oracle | occupancy


@dataclass(frozen=True)
class ToyConfig:
    pool_size: tuple = (2, 2)
    n_proposals: int = 48
    jitter_xy: float = 0.6
    jitter_size: float = 0.1
    positive_iou: float = 0.5
    final_nms_iou: float = 0.05
    score_threshold: float = 0.0


@dataclass(frozen=True)
class EvalConfig:
    recall_iou: tuple = (0.25, 0.5)
    recall_budget: int = 300
    bev_iou: tuple = (0.5, 0.7)
    iou_3d: tuple = (0.25, 0.5, 0.7)
    iou_2d: tuple = (0.7,)
    regimes: tuple = ("easy", "moderate", "hard")
    interpolation: str = "11"
    cls: str = "Car"


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 20
    scene: SceneSpec = SceneSpec()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    camera: str = "P2"
    bev: BevConfig = BevConfig()
    front_view: FrontViewConfig = FrontViewConfig()
    anchors: AnchorConfig = AnchorConfig()
    proposal: ProposalConfig = ProposalConfig()
    fusion: FusionConfig = FusionConfig()
    train: SGDParams = SGDParams()
    toy: ToyConfig = ToyConfig()
    eval: EvalConfig = EvalConfig()
    synth: SynthConfig = SynthConfig()


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def merge(obj, overrides: dict, path: str = ""):
    """Return a copy of dataclass ``obj`` with ``overrides`` applied recursively."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, val in overrides.items():
        if key not in names:
            raise KeyError(f"unknown config key {path}{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise TypeError(f"{path}{key} must be a mapping")
            changes[key] = merge(cur, val, f"{path}{key}.")
        elif key == "classes":
            changes[key] = tuple(c if isinstance(c, ObjectClass) else ObjectClass(
                c["name"], tuple(c["size"]), tuple(c.get("jitter", (0, 0, 0))), c.get("weight", 1.0))
                for c in val)
        else:
            changes[key] = _tuplify(val)
    return dataclasses.replace(obj, **changes)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | None = None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as f:
            cfg = merge(cfg, json.load(f))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    # the run seed is the single source of randomness; echo it where it is consumed
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed),
                               synth=dataclasses.replace(cfg.synth, scene=dataclasses.replace(
                                   cfg.synth.scene, seed=cfg.seed)))


def dump_config(cfg: RunConfig, path: str):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
