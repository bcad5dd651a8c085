"""Finite-difference battery over every differentiable op in the package."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .cloud import PointCloud, normalize
from .model import PVCNNConfig, build_pvcnn, pvcnn_backward, pvcnn_forward, pvconv_backward, pvconv_forward
from .tensor import GradCheckReport, grad_check
from .train import cross_entropy
from .voxel import devoxelize_backward, devoxelize, voxelize, voxelize_backward

OP_GROUPS = ("voxelize", "devoxelize_trilinear", "devoxelize_nearest", "conv3d", "batch_norm",
             "leaky_relu", "shared_mlp", "pvconv", "micro_net", "cross_entropy")


def _away_from_zero(rng, shape, margin=1e-2):
    mag = rng.uniform(margin, 1.0, shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def _cloud(rng, n, c):
    coords = rng.random((n, 3))
    return normalize(PointCloud(coords, rng.standard_normal((n, c))))


def _check(name, fwd, bwd, x, eps, tol):
    return grad_check(fwd, bwd, x, eps, tolerance=tol, op_name=name)


def _voxelize(rng, eps, tol):
    nc = _cloud(rng, 24, 3)
    r = 3

    def fwd(f):
        return voxelize(nc.with_features(f), r).values

    def bwd(f, g):
        grid = voxelize(nc.with_features(f), r)
        return voxelize_backward(g, nc.with_features(f), grid)

    return [_check("voxelize", fwd, bwd, nc.features, eps, tol)]


def _devox(mode):
    def run(rng, eps, tol):
        nc = _cloud(rng, 20, 2)
        grid = voxelize(nc, 4)

        def with_values(v):
            return type(grid)(grid.r, v, grid.counts, grid.point_index)

        def fwd(v):
            return devoxelize(with_values(v), nc, mode)

        def bwd(v, g):
            return devoxelize_backward(g, with_values(v), nc, mode)

        values = rng.standard_normal(grid.values.shape)
        return [_check(f"devoxelize_{mode}", fwd, bwd, values, eps, tol)]
    return run


def _conv3d(rng, eps, tol):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    p = L.Conv3dParams(rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3))
    return [
        _check("conv3d[x]", lambda v: L.conv3d(v, p),
               lambda v, g: L.conv3d_backward(g, v, p)[0], x, eps, tol),
        _check("conv3d[weight]", lambda w: L.conv3d(x, L.Conv3dParams(w, p.bias)),
               lambda w, g: L.conv3d_backward(g, x, L.Conv3dParams(w, p.bias))[1], p.weight, eps, tol),
        _check("conv3d[bias]", lambda b: L.conv3d(x, L.Conv3dParams(p.weight, b)),
               lambda b, g: L.conv3d_backward(g, x, L.Conv3dParams(p.weight, b))[2], p.bias, eps, tol),
    ]


def _batch_norm(rng, eps, tol):
    x = rng.standard_normal((2, 3, 3, 3, 3)) * 2.0 + 0.5
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)

    def state(gm=gamma, bt=beta):
        return L.BatchNormState(gm, bt, np.zeros(3), np.ones(3))

    def run(xx, s):
        return L.batch_norm(xx, s, train=True)

    return [
        _check("batch_norm[x]", lambda v: run(v, state())[0],
               lambda v, g: L.batch_norm_backward(g, run(v, state())[1])[0], x, eps, tol),
        _check("batch_norm[gamma]", lambda gm: run(x, state(gm=gm))[0],
               lambda gm, g: L.batch_norm_backward(g, run(x, state(gm=gm))[1])[1], gamma, eps, tol),
        _check("batch_norm[beta]", lambda bt: run(x, state(bt=bt))[0],
               lambda bt, g: L.batch_norm_backward(g, run(x, state(bt=bt))[1])[2], beta, eps, tol),
    ]


def _leaky_relu(rng, eps, tol):
    x = _away_from_zero(rng, (5, 7))
    return [_check("leaky_relu", L.leaky_relu, lambda v, g: L.leaky_relu_backward(g, v), x, eps, tol)]


def _shared_mlp(rng, eps, tol):
    x = rng.standard_normal((12, 4))
    p = L.LinearParams(rng.standard_normal((5, 4)), rng.standard_normal(5))
    gamma, beta = rng.uniform(0.5, 1.5, 5), rng.standard_normal(5)

    def bn():
        return L.BatchNormState(gamma.copy(), beta.copy(), np.zeros(5), np.ones(5))

    def fwd(v, w=p.weight):
        return L.shared_mlp(v, L.LinearParams(w, p.bias), bn(), train=True)[0]

    def bwd_x(v, g):
        _, cache = L.shared_mlp(v, p, bn(), train=True)
        return L.shared_mlp_backward(g, cache, p)[0]

    def bwd_w(w, g):
        lp = L.LinearParams(w, p.bias)
        _, cache = L.shared_mlp(x, lp, bn(), train=True)
        return L.shared_mlp_backward(g, cache, lp)[1]["weight"]

    return [_check("shared_mlp[x]", fwd, bwd_x, x, eps, tol),
            _check("shared_mlp[weight]", lambda w: fwd(x, w), bwd_w, p.weight, eps, tol)]


def _micro_params(seed, cfg):
    params = build_pvcnn(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # nonzero biases keep empty-voxel activations off the leaky-ReLU kink
    for name, arr in params.trainable().items():
        if name.endswith("bias") or name.endswith("beta"):
            arr[...] = rng.uniform(0.05, 0.3, arr.shape) * rng.choice([-1.0, 1.0], arr.shape)
    return params


def _pvconv(rng, eps, tol):
    nc = _cloud(rng, 32, 4)
    cfg = PVCNNConfig(blocks=[(8, 4)], in_channels=4, head_widths=[], num_classes=2)
    block = _micro_params(3, cfg).blocks[0]

    def fwd(v):
        return pvconv_forward(block, nc, v, train=True)[0]

    def bwd(v, g):
        _, cache = pvconv_forward(block, nc, v, train=True)
        return pvconv_backward(g, cache, block)[0]

    return [_check("pvconv[x]", fwd, bwd, nc.features, eps, tol)]


def _micro_net(rng, eps, tol):
    coords = rng.random((16, 3))
    feats = rng.standard_normal((16, 3))
    cfg = PVCNNConfig(blocks=[(4, 2), (6, 2)], head_widths=[5], num_classes=3)
    params = _micro_params(5, cfg)

    def fwd(f):
        return pvcnn_forward(params, cfg, PointCloud(coords, f), train=True)

    def bwd(f, g):
        _, cache = pvcnn_forward(params, cfg, PointCloud(coords, f), train=True, return_cache=True)
        return pvcnn_backward(params, cache, g)[0]

    reports = [_check("micro_net[features]", fwd, bwd, feats, eps, tol)]
    for name in ("block0.voxel0.conv.weight", "block1.point.linear.weight", "head0.bn.gamma"):
        target = params.trainable()[name]
        orig = target.copy()

        def fwd_p(w, target=target):
            target[...] = w
            return pvcnn_forward(params, cfg, PointCloud(coords, feats), train=True)

        def bwd_p(w, g, target=target, name=name):
            target[...] = w
            _, cache = pvcnn_forward(params, cfg, PointCloud(coords, feats), train=True,
                                     return_cache=True)
            return pvcnn_backward(params, cache, g)[1][name]

        reports.append(_check(f"micro_net[{name}]", fwd_p, bwd_p, orig, eps, tol))
        target[...] = orig
    return reports


def _cross_entropy(rng, eps, tol):
    logits = rng.standard_normal((10, 4))
    labels = rng.integers(0, 4, 10)
    # the loss is scalar: contract with the random cotangent as a 1-element output
    return [_check("cross_entropy", lambda z: np.array([cross_entropy(z, labels)[0]]),
                   lambda z, g: cross_entropy(z, labels)[1] * g[0], logits, eps, tol)]


_RUNNERS: dict[str, Callable] = {
    "voxelize": _voxelize,
    "devoxelize_trilinear": _devox("trilinear"),
    "devoxelize_nearest": _devox("nearest"),
    "conv3d": _conv3d,
    "batch_norm": _batch_norm,
    "leaky_relu": _leaky_relu,
    "shared_mlp": _shared_mlp,
    "pvconv": _pvconv,
    "micro_net": _micro_net,
    "cross_entropy": _cross_entropy,
}


def run_battery(ops=None, tol: float = 1e-4, eps: float = 1e-5, seed: int = 0) -> dict[str, list[GradCheckReport]]:
    """Run the named op groups (all by default); returns reports per group."""
    ops = list(OP_GROUPS if not ops else ops)
    unknown = [op for op in ops if op not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown op group(s) {unknown}; choose from {list(OP_GROUPS)}")
    results = {}
    for op in ops:
        rng = np.random.default_rng([seed, OP_GROUPS.index(op)])
        results[op] = _RUNNERS[op](rng, eps, tol)
    return results
