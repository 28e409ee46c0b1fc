"""Layer library for the toy fusion network: FC, conv, bilinear upsampling, ROI max pooling."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _node, relu


class Module:
    def parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update({f"{name}.{k}": v for k, v in val.parameters().items()})
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update({f"{name}.{i}.{k}": v for k, v in item.parameters().items()})
        return out

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, relu=False):
        scale = math.sqrt(2.0 / n_in)
        self.weight = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight + self.bias
        return relu(y) if self.relu else y


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 0) -> Tensor:
    """Stride-1 convolution of a (C, H, W) map with (K, C, kh, kw) filters."""
    xd = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    k, c, kh, kw = w.shape
    _, hp, wp = xd.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))  # C, ho, wo, kh, kw
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)
    wm = w.data.reshape(k, -1)
    out = (cols @ wm.T + b.data).T.reshape(k, ho, wo)

    def back(g):
        gm = g.reshape(k, -1).T  # (ho*wo, k)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wm).reshape(ho, wo, c, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho, j:j + wo] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        if pad:
            gx = gx[:, pad:-pad, pad:-pad]
        return gx, gw, gb
    return _node(out, (x, w, b), back, "conv2d")


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, pad=None):
        scale = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(rng.normal(0.0, scale, (c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.pad = k // 2 if pad is None else pad

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.pad)


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling of a (C, H, W) map."""
    _, h, w = x.shape
    ah, aw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
    out = np.einsum("oh,chw,pw->cop", ah, x.data, aw)
    return _node(out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", ah, g, aw),), "upsample")


def roi_bins(start: int, size: int, n_out: int):
    """Fast R-CNN bin edges: [floor(i*size/n), ceil((i+1)*size/n)) offset by start."""
    return [(start + (i * size) // n_out, start + -(-((i + 1) * size) // n_out)) for i in range(n_out)]


def roi_pool(feature: Tensor, roi, out_size=(2, 2)) -> Tensor:
    """Max-pool the inclusive cell rectangle ``roi`` = (r0, c0, r1, c1) to (C, h, w).

    Gradient flows to the first argmax of each bin.
    """
    r0, c0, r1, c1 = (int(v) for v in tuple(roi)[:4])
    if r1 < r0 or c1 < c0:
        raise ValueError("zero-area ROI")
    oh, ow = out_size
    x = feature.data
    ch = x.shape[0]
    out = np.empty((ch, oh, ow))
    argmax = np.empty((ch, oh, ow, 2), dtype=np.int64)
    for i, (ha, hb) in enumerate(roi_bins(r0, r1 - r0 + 1, oh)):
        for j, (wa, wb) in enumerate(roi_bins(c0, c1 - c0 + 1, ow)):
            patch = x[:, ha:hb, wa:wb].reshape(ch, -1)
            k = patch.argmax(axis=1)
            out[:, i, j] = patch[np.arange(ch), k]
            argmax[:, i, j, 0] = ha + k // (wb - wa)
            argmax[:, i, j, 1] = wa + k % (wb - wa)

    def back(g):
        gx = np.zeros_like(x)
        cidx = np.broadcast_to(np.arange(ch)[:, None, None], (ch, oh, ow))
        np.add.at(gx, (cidx, argmax[..., 0], argmax[..., 1]), g)
        return (gx,)
    return _node(out, (feature,), back, "roi_pool")
