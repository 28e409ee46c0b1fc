"""Central finite-difference checks for every layer, both losses and the fusion graphs."""
from __future__ import annotations

import numpy as np

from .layers import Linear, conv2d, roi_pool, upsample_bilinear
from .network import FusionConfig, FusionNet
from .tensor import Tensor, concat, cross_entropy, mean_join, no_grad, smooth_l1, tanh
from .train import multitask_loss

STEP = 1e-4
TOLERANCE = 1e-4
KINK_MARGIN = 10 * STEP


def rel_error(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-6))


def numeric_grad(f, t: Tensor, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            hi = float(f().data)
            flat[i] = old - step
            lo = float(f().data)
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * step)
    return g


def kink_distance(out: Tensor) -> float:
    """Smallest |pre-activation| over all ReLU nodes feeding ``out``."""
    best, stack, seen = np.inf, [out], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            best = min(best, float(np.abs(node._parents[0].data).min()))
        stack.extend(node._parents)
    return best


def check(f, tensors, step: float = STEP) -> float:
    """Max relative error between backprop and central differences over ``tensors``."""
    for t in tensors:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numeric_grad(f, t, step)))
    return worst


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weights(rng, shape):
    # fixed random projection so vector-valued layers reduce to a scalar
    return rng.normal(size=shape)


def case_linear(rng):
    layer = Linear(5, 4, rng, relu=True)
    layer.bias.data = rng.normal(size=4)
    x = _p(rng, 3, 5)
    w = _weights(rng, (3, 4))
    return lambda: (layer(x) * w).sum(), [x, layer.weight, layer.bias]


def case_tanh(rng):
    x = _p(rng, 4, 3)
    w = _weights(rng, (4, 3))
    return lambda: (tanh(x) * w).sum(), [x]


def case_conv2d(rng):
    x, k, b = _p(rng, 2, 5, 6), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    w = _weights(rng, (3, 5, 6))
    return lambda: (conv2d(x, k, b, pad=1) * w).sum(), [x, k, b]


def case_upsample(rng):
    x = _p(rng, 2, 3, 4)
    w = _weights(rng, (2, 6, 8))
    return lambda: (upsample_bilinear(x, 2) * w).sum(), [x]


def case_roi_pool(rng):
    x = _p(rng, 2, 9, 11)
    w = _weights(rng, (2, 3, 2))
    roi = (1, 2, 7, 9)
    return lambda: (roi_pool(x, roi, (3, 2)) * w).sum(), [x]


def case_joins(rng):
    a, b, c = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 3, 4)
    w1, w2 = _weights(rng, (3, 12)), _weights(rng, (3, 4))
    return lambda: (concat([a, b, c], -1) * w1).sum() + (mean_join([a, b, c]) * w2).sum(), [a, b, c]


def case_smooth_l1(rng):
    x = Tensor(rng.normal(scale=1.5, size=(4, 6)), requires_grad=True)
    return lambda: smooth_l1(x), [x]


def case_cross_entropy(rng):
    x = _p(rng, 5, 3)
    labels = rng.integers(0, 3, 5)
    return lambda: cross_entropy(x, labels).sum(), [x]


def case_fusion(mode: str):
    def build(rng):
        cfg = FusionConfig(mode=mode, n_layers=2, width=8, in_dims=(6, 5, 4), aux_loss=True)
        net = FusionNet(cfg, seed=int(rng.integers(2 ** 31)))
        # random point in parameter space; zero biases would sit on ReLU kinks
        for prm in net.parameters().values():
            prm.data = rng.normal(scale=0.5, size=prm.shape)
        n = 4
        feats = [Tensor(rng.normal(size=(n, d)), requires_grad=True) for d in cfg.in_dims]
        labels = np.array([1, 0, 1, 0])
        targets = rng.normal(scale=0.5, size=(n, cfg.box_dim))

        def f():
            c, b = net(feats)
            return multitask_loss(c, b, labels, targets, net.aux_outputs(feats))
        return f, list(net.parameters().values()) + feats
    return build


SUITES = {
    "linear": case_linear,
    "tanh": case_tanh,
    "conv2d": case_conv2d,
    "upsample": case_upsample,
    "roi_pool": case_roi_pool,
    "joins": case_joins,
    "smooth_l1": case_smooth_l1,
    "cross_entropy": case_cross_entropy,
    "fusion_early": case_fusion("early"),
    "fusion_late": case_fusion("late"),
    "fusion_deep": case_fusion("deep"),
}


def run_suite(name: str, n_points: int = 20, seed: int = 0) -> float:
    """Worst relative error over ``n_points`` seeded random evaluation points."""
    worst = 0.0
    for k in range(n_points):
        rng = np.random.default_rng([seed, k, sum(map(ord, name))])
        # redraw points whose ReLU inputs sit within a step's reach of the kink
        while True:
            f, tensors = SUITES[name](rng)
            if kink_distance(f()) > KINK_MARGIN:
                break
        worst = max(worst, check(f, tensors))
    return worst


def run_all(n_points: int = 20, seed: int = 0) -> dict:
    return {name: run_suite(name, n_points, seed) for name in SUITES}
