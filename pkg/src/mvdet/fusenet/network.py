"""Region-based multi-view fusion network (early / late / deep) with drop-path and aux paths."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Linear, Module
from .tensor import Tensor, concat, mean_join

VIEWS = ("bev", "fv", "rgb")
BEV, FV, RGB = range(3)


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "deep"  # early | late | deep
    n_layers: int = 2
    width: int = 8
    in_dims: tuple = (24, 12, 12)
    join: str = ""  # "" -> mean for deep, concat for early/late
    drop_path: bool = True
    aux_loss: bool = True
    cls_weight: float = 1.0
    box_weight: float = 1.0
    head: str = "corners"  # corners (24-D) | center_size (6-D)
    n_classes: int = 2

    @property
    def join_op(self) -> str:
        if self.join:
            return self.join
        return "mean" if self.mode == "deep" else "concat"

    @property
    def box_dim(self) -> int:
        return 24 if self.head == "corners" else 6

    @property
    def n_joins(self) -> int:
        return self.n_layers + 1 if self.mode == "deep" else 1

    def validate(self):
        if self.mode not in ("early", "late", "deep"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.join_op not in ("mean", "concat"):
            raise ValueError(f"unknown join {self.join_op!r}")
        if self.mode == "deep" and self.join_op != "mean":
            raise ValueError("deep fusion needs the element-wise mean join")
        if self.n_layers < 1 or self.width < 1:
            raise ValueError("n_layers and width must be >= 1")
        if self.head not in ("corners", "center_size"):
            raise ValueError(f"unknown regression head {self.head!r}")
        if len(self.in_dims) != 3:
            raise ValueError("three per-view input dims expected")


def full_mask(config: FusionConfig) -> np.ndarray:
    return np.ones((config.n_joins, 3), dtype=bool)


def global_mask(config: FusionConfig, view: int) -> np.ndarray:
    m = np.zeros((config.n_joins, 3), dtype=bool)
    m[:, view] = True
    return m


def drop_path_sample(rng, n_joins: int, n_views: int = 3, force_global: bool | None = None,
                     p_global: float = 0.5, p_drop: float = 0.5):
    """Sample a (n_joins, n_views) alive-mask.

    Global (prob ``p_global``): one uniformly chosen view alive at every join.
    Local: each join input dropped independently with ``p_drop``; a join left
    with no input is resampled.  Returns (mask, is_global).
    """
    is_global = rng.random() < p_global if force_global is None else force_global
    if is_global:
        mask = np.zeros((n_joins, n_views), dtype=bool)
        mask[:, rng.integers(n_views)] = True
        return mask, True
    mask = np.empty((n_joins, n_views), dtype=bool)
    for j in range(n_joins):
        row = rng.random(n_views) >= p_drop
        while not row.any():
            row = rng.random(n_views) >= p_drop
        mask[j] = row
    return mask, False


def _join(xs, alive, op):
    if not any(alive):
        raise ValueError("every join needs at least one live input")
    if op == "mean":
        return mean_join([x for x, a in zip(xs, alive) if a])
    live = [x if a else Tensor(np.zeros_like(x.data)) for x, a in zip(xs, alive)]
    return concat(live, axis=-1)


class FusionNet(Module):
    """Per-view stems feed the fusion body; shared heads on the fused feature.

    Inputs are per-view (N, d_v) ROI feature matrices.
    """

    def __init__(self, config: FusionConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        w, L = config.width, config.n_layers
        cat = config.join_op == "concat"
        self.stems = [Linear(d, w, rng, relu=True) for d in config.in_dims]
        if config.mode == "early":
            dims = [3 * w if cat else w] + [w] * (L - 1)
            self.layers = [Linear(d, w, rng, relu=True) for d in dims]
            out_dim = w
        else:
            # paths[v][l] = H^v_l
            self.paths = [[Linear(w, w, rng, relu=True) for _ in range(L)] for _ in VIEWS]
            self.path_layers = [layer for path in self.paths for layer in path]
            out_dim = 3 * w if (config.mode == "late" and cat) else w
        self.cls_head = Linear(out_dim, config.n_classes, rng)
        self.box_head = Linear(out_dim, config.box_dim, rng)

    def parameters(self) -> dict:
        out = {}
        for i, s in enumerate(self.stems):
            out.update({f"stem{i}.{k}": v for k, v in s.parameters().items()})
        if self.config.mode == "early":
            for l, layer in enumerate(self.layers):
                out.update({f"layer{l}.{k}": v for k, v in layer.parameters().items()})
        else:
            for v, path in enumerate(self.paths):
                for l, layer in enumerate(path):
                    out.update({f"{VIEWS[v]}{l}.{k}": p for k, p in layer.parameters().items()})
        out.update({f"cls.{k}": v for k, v in self.cls_head.parameters().items()})
        out.update({f"box.{k}": v for k, v in self.box_head.parameters().items()})
        return out

    def fuse(self, feats, mask=None) -> Tensor:
        """The fused feature f_L for inputs ``feats`` (one tensor per view)."""
        cfg = self.config
        mask = full_mask(cfg) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != (cfg.n_joins, 3):
            raise ValueError(f"drop mask shape {mask.shape}, expected {(cfg.n_joins, 3)}")
        s = [stem(_t(f)) for stem, f in zip(self.stems, feats)]
        op = cfg.join_op
        if cfg.mode == "early":
            x = _join(s, mask[0], op)
            for layer in self.layers:
                x = layer(x)
            return x
        if cfg.mode == "late":
            outs = []
            for v in range(3):
                x = s[v]
                if mask[0, v]:
                    for layer in self.paths[v]:
                        x = layer(x)
                outs.append(x)
            return _join(outs, mask[0], op)
        x = _join(s, mask[0], op)
        for l in range(cfg.n_layers):
            x = _join([self.paths[v][l](x) if mask[l + 1, v] else None for v in range(3)],
                      mask[l + 1], op)
        return x

    def forward(self, feats, mask=None):
        f = self.fuse(feats, mask)
        return self.cls_head(f), self.box_head(f)

    def forward_single_view(self, feats, view: int):
        """The view-only subnetwork; also the auxiliary path for ``view``."""
        x = self.stems[view](_t(feats[view]))
        if self.config.mode == "early":
            zeros = [Tensor(np.zeros_like(x.data))] * 3
            parts = [x if v == view else zeros[v] for v in range(3)]
            x = concat(parts, axis=-1) if self.config.join_op == "concat" else x
            for layer in self.layers:
                x = layer(x)
        else:
            for layer in self.paths[view]:
                x = layer(x)
            if self.config.mode == "late" and self.config.join_op == "concat":
                z = Tensor(np.zeros_like(x.data))
                x = concat([x if v == view else z for v in range(3)], axis=-1)
        return self.cls_head(x), self.box_head(x)

    def aux_outputs(self, feats):
        return [self.forward_single_view(feats, v) for v in range(3)]

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict):
        params = self.parameters()
        if set(params) != set(state):
            raise ValueError("parameter names do not match")
        for k, p in params.items():
            if p.data.shape != tuple(np.shape(state[k])):
                raise ValueError(f"shape mismatch for {k}")
            p.data = np.asarray(state[k], dtype=np.float64).copy()


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
