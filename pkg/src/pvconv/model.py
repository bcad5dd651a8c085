"""PVConv block and the PointNet-shaped PVCNN segmentation network."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .cloud import NormalizedCloud, PointCloud, normalize
from .tensor import elementwise_add, reduce_max_backward, reduce_max_over_points
from .voxel import VoxelGrid, devoxelize, devoxelize_backward, voxelize, voxelize_backward

WIDTH_MULTIPLIERS = (0.125, 0.25, 0.5, 1.0)
RESOLUTION_MULTIPLIERS = (0.5, 0.75, 1.0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PVConvBlock:
    c_in: int
    c_out: int
    r: int
    voxel_convs: list  # [(Conv3dParams, BatchNormState)]
    point_branch: tuple  # (LinearParams, BatchNormState)
    activation_slope: float = L.LEAKY_SLOPE
    devox_mode: str = "trilinear"

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"block resolution must be >= 1, got {self.r}")
        if not self.voxel_convs:
            raise ValueError("a PVConv block needs at least one voxel convolution")
        last = self.voxel_convs[-1][0].weight.shape[0]
        point_out = self.point_branch[0].weight.shape[0]
        if last != self.c_out or point_out != self.c_out:
            raise ValueError(
                f"branch widths differ: voxel {last}, point {point_out}, block {self.c_out}")

    def named_tensors(self, prefix: str):
        for i, (conv, bn) in enumerate(self.voxel_convs):
            yield from _conv_bn_tensors(f"{prefix}.voxel{i}", conv, bn)
        lin, bn = self.point_branch
        yield from _linear_bn_tensors(f"{prefix}.point", lin, bn)


def _bn_tensors(prefix, bn):
    yield f"{prefix}.bn.gamma", bn.gamma, True
    yield f"{prefix}.bn.beta", bn.beta, True
    yield f"{prefix}.bn.running_mean", bn.running_mean, False
    yield f"{prefix}.bn.running_var", bn.running_var, False


def _conv_bn_tensors(prefix, conv, bn):
    yield f"{prefix}.conv.weight", conv.weight, True
    yield f"{prefix}.conv.bias", conv.bias, True
    yield from _bn_tensors(prefix, bn)


def _linear_bn_tensors(prefix, lin, bn):
    yield f"{prefix}.linear.weight", lin.weight, True
    yield f"{prefix}.linear.bias", lin.bias, True
    yield from _bn_tensors(prefix, bn)


@dataclass
class BlockCache:
    clouds: list
    grids: list
    conv_inputs: list
    conv_patches: list
    conv_pre_acts: list
    bn_caches: list
    devox_grids: list
    point_cache: L.MLPCache


def _as_batch(nc) -> list:
    return list(nc) if isinstance(nc, (list, tuple)) else [nc]


def _segments(clouds) -> list[slice]:
    bounds = np.concatenate([[0], np.cumsum([c.n for c in clouds])])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def pvconv_forward(block: PVConvBlock, nc, x: np.ndarray, train: bool | None = None):
    """Voxel branch plus point branch, fused by addition. Returns ``(out, cache)``.

    Voxel branch: voxelize -> (conv3d -> batch norm -> leaky ReLU) x L ->
    devoxelize. Point branch: one shared MLP layer. Both emit activated features.

    ``nc`` may be a list of clouds, in which case ``x`` holds their features
    stacked in order; each cloud gets its own grid, the grids form the batch
    axis of the convolutions and batch norm sees the whole batch.
    """
    clouds = _as_batch(nc)
    segs = _segments(clouds)
    if x.shape != (segs[-1].stop, block.c_in):
        raise ValueError(f"block expects {(segs[-1].stop, block.c_in)} features, got {x.shape}")
    slope = block.activation_slope
    grids = [voxelize(c.with_features(x[s]), block.r) for c, s in zip(clouds, segs)]
    vol = np.stack([g.values.transpose(3, 0, 1, 2) for g in grids])
    conv_inputs, patches, pre_acts, bn_caches = [], [], [], []
    for conv, bn in block.voxel_convs:
        conv_inputs.append(vol)
        z, cols = L.conv3d(vol, conv, return_patches=True)
        patches.append(cols)
        y, bn_cache = L.batch_norm(z, bn, train)
        pre_acts.append(y)
        bn_caches.append(bn_cache)
        vol = L.leaky_relu(y, slope)
    out_grids = [VoxelGrid(block.r, np.ascontiguousarray(vol[b].transpose(1, 2, 3, 0)),
                           g.counts, g.point_index) for b, g in enumerate(grids)]
    voxel_feats = np.concatenate([devoxelize(g, c, block.devox_mode)
                                  for g, c in zip(out_grids, clouds)])
    lin, bn = block.point_branch
    point_feats, point_cache = L.shared_mlp(x, lin, bn, slope, train)
    out = elementwise_add(voxel_feats.astype(point_feats.dtype, copy=False), point_feats)
    cache = BlockCache(clouds, grids, conv_inputs, patches, pre_acts, bn_caches, out_grids, point_cache)
    return out, cache


def pvconv_backward(dout: np.ndarray, cache: BlockCache, block: PVConvBlock):
    """Returns ``(dx, grads)``; grads are keyed by the block-local tensor names."""
    slope = block.activation_slope
    grads = {}
    lin, _ = block.point_branch
    dx_point, g = L.shared_mlp_backward(dout, cache.point_cache, lin, slope)
    grads["point.linear.weight"], grads["point.linear.bias"] = g["weight"], g["bias"]
    grads["point.bn.gamma"], grads["point.bn.beta"] = g["gamma"], g["beta"]

    segs = _segments(cache.clouds)
    dvol = np.stack([devoxelize_backward(dout[s], grid, c, block.devox_mode).transpose(3, 0, 1, 2)
                     for s, grid, c in zip(segs, cache.devox_grids, cache.clouds)])
    for i in reversed(range(len(block.voxel_convs))):
        conv, _ = block.voxel_convs[i]
        dy = L.leaky_relu_backward(dvol, cache.conv_pre_acts[i], slope)
        dz, dgamma, dbeta = L.batch_norm_backward(dy, cache.bn_caches[i])
        dvol, dw, db = L.conv3d_backward(dz, cache.conv_inputs[i], conv, cache.conv_patches[i])
        grads[f"voxel{i}.conv.weight"], grads[f"voxel{i}.conv.bias"] = dw, db
        grads[f"voxel{i}.bn.gamma"], grads[f"voxel{i}.bn.beta"] = dgamma, dbeta
    dx_voxel = np.concatenate([
        voxelize_backward(np.ascontiguousarray(dvol[b].transpose(1, 2, 3, 0)), c, grid)
        for b, (c, grid) in enumerate(zip(cache.clouds, cache.grids))])
    return dx_point + dx_voxel, grads


# -- network --------------------------------------------------------------------

@dataclass
class PVCNNConfig:
    """Network shape. Block channels, resolutions and head widths are base values;
    the width multiplier scales every channel count (head included) and the
    resolution multiplier scales every block resolution."""

    blocks: list = field(default_factory=lambda: [(64, 8), (128, 8), (1024, 8)])
    width_multiplier: float = 1.0
    resolution_multiplier: float = 1.0
    num_classes: int = 2
    head_widths: list = field(default_factory=lambda: [256, 128])
    in_channels: int = 3
    voxel_convs_per_block: int = 2
    devox_mode: str = "trilinear"
    activation_slope: float = L.LEAKY_SLOPE

    def __post_init__(self):
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]
        self.head_widths = [int(v) for v in self.head_widths]
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.width_multiplier <= 0 or self.resolution_multiplier <= 0:
            raise ValueError("multipliers must be positive")
        if not self.blocks:
            raise ValueError("at least one PVConv block is required")
        if self.voxel_convs_per_block < 1:
            raise ValueError("voxel_convs_per_block must be >= 1")
        if self.devox_mode not in ("trilinear", "nearest"):
            raise ValueError(f"unknown devox_mode {self.devox_mode!r}")

    def channels(self, base: int) -> int:
        return max(1, _round_half_up(self.width_multiplier * base))

    def resolution(self, base: int) -> int:
        return max(1, _round_half_up(self.resolution_multiplier * base))

    def effective_blocks(self) -> list[tuple[int, int]]:
        return [(self.channels(c), self.resolution(r)) for c, r in self.blocks]

    def effective_head(self) -> list[int]:
        return [self.channels(w) for w in self.head_widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PVCNNConfig":
        return cls(**d)


def toy_config(width_multiplier: float = 0.125, resolution_multiplier: float = 1.0,
               num_classes: int = 2, **overrides) -> PVCNNConfig:
    """Three PVConv stages of 64/128/1024 base channels, voxel resolution capped at 8."""
    return PVCNNConfig(blocks=[(64, 8), (128, 8), (1024, 8)], width_multiplier=width_multiplier,
                       resolution_multiplier=resolution_multiplier, num_classes=num_classes,
                       **overrides)


def _kaiming(rng, shape, fan_in, slope, dtype):
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    return (rng.standard_normal(shape) * gain / math.sqrt(fan_in)).astype(dtype)


class ModelParams:
    """All network tensors, addressable through an ordered name registry."""

    def __init__(self, blocks, head, classifier):
        self.blocks: list[PVConvBlock] = blocks
        self.head: list[tuple[L.LinearParams, L.BatchNormState]] = head
        self.classifier: L.LinearParams = classifier

    def _entries(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"block{i}")
        for i, (lin, bn) in enumerate(self.head):
            yield from _linear_bn_tensors(f"head{i}", lin, bn)
        yield "classifier.weight", self.classifier.weight, True
        yield "classifier.bias", self.classifier.bias, True

    def registry(self) -> "OrderedDict[str, np.ndarray]":
        """Every tensor (running statistics included), in construction order."""
        return OrderedDict((name, arr) for name, arr, _ in self._entries())

    def trainable(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, arr) for name, arr, t in self._entries() if t)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.trainable().values())

    def load_state(self, tensors: dict) -> None:
        """Copy tensors into this model in place; names and shapes must match exactly."""
        reg = self.registry()
        missing = set(reg) - set(tensors)
        extra = set(tensors) - set(reg)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, arr in reg.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            if not np.all(np.isfinite(src)):
                raise ValueError(f"{name}: checkpoint holds non-finite values")
            arr[...] = src

    def set_mode(self, mode: str) -> None:
        for _, bn in self.batch_norms():
            bn.mode = mode

    def batch_norms(self):
        for i, block in enumerate(self.blocks):
            for j, (_, bn) in enumerate(block.voxel_convs):
                yield f"block{i}.voxel{j}", bn
            yield f"block{i}.point", block.point_branch[1]
        for i, (_, bn) in enumerate(self.head):
            yield f"head{i}", bn


def build_pvcnn(cfg: PVCNNConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Deterministically initialise a PVCNN: Kaiming fan-in weights, zero biases."""
    rng = np.random.default_rng(seed)
    slope = cfg.activation_slope
    blocks = []
    c_in = cfg.in_channels
    for c_out, r in cfg.effective_blocks():
        convs = []
        ci = c_in
        for _ in range(cfg.voxel_convs_per_block):
            w = _kaiming(rng, (c_out, ci, 3, 3, 3), ci * 27, slope, dtype)
            convs.append((L.Conv3dParams(w, np.zeros(c_out, dtype)), L.BatchNormState.create(c_out, dtype)))
            ci = c_out
        lin = L.LinearParams(_kaiming(rng, (c_out, c_in), c_in, slope, dtype), np.zeros(c_out, dtype))
        blocks.append(PVConvBlock(c_in, c_out, r, convs, (lin, L.BatchNormState.create(c_out, dtype)),
                                  slope, cfg.devox_mode))
        c_in = c_out
    width = sum(b.c_out for b in blocks) + blocks[-1].c_out
    head = []
    for h in cfg.effective_head():
        lin = L.LinearParams(_kaiming(rng, (h, width), width, slope, dtype), np.zeros(h, dtype))
        head.append((lin, L.BatchNormState.create(h, dtype)))
        width = h
    classifier = L.LinearParams(_kaiming(rng, (cfg.num_classes, width), width, 1.0, dtype),
                                np.zeros(cfg.num_classes, dtype))
    return ModelParams(blocks, head, classifier)


def count_parameters(cfg: PVCNNConfig) -> int:
    """Closed-form trainable-parameter count for a config."""
    total = 0
    c_in = cfg.in_channels
    blocks = cfg.effective_blocks()
    for c_out, _ in blocks:
        ci = c_in
        for _ in range(cfg.voxel_convs_per_block):
            total += c_out * ci * 27 + c_out + 2 * c_out
            ci = c_out
        total += c_out * c_in + c_out + 2 * c_out
        c_in = c_out
    width = sum(c for c, _ in blocks) + blocks[-1][0]
    for h in cfg.effective_head():
        total += h * width + h + 2 * h
        width = h
    return total + cfg.num_classes * width + cfg.num_classes


def voxel_activation_elements(cfg: PVCNNConfig) -> int:
    """Scalars held in voxel grids during one forward pass (input grid + every conv output)."""
    total = 0
    c_in = cfg.in_channels
    for c_out, r in cfg.effective_blocks():
        total += r ** 3 * (c_in + cfg.voxel_convs_per_block * c_out)
        c_in = c_out
    return total


@dataclass
class NetCache:
    clouds: list
    block_caches: list
    block_outputs: list
    argmax: list
    head_caches: list
    head_out: np.ndarray


def _forward(params: ModelParams, pcs: list, train: Optional[bool], dtype):
    clouds = [normalize(pc) for pc in pcs]
    segs = _segments(clouds)
    x = np.concatenate([np.asarray(pc.features, dtype=dtype) for pc in pcs])
    block_caches, outputs = [], []
    for block in params.blocks:
        x, cache = pvconv_forward(block, clouds, x, train)
        block_caches.append(cache)
        outputs.append(x)
    tiled, argmax = [], []
    for s in segs:
        g, am = reduce_max_over_points(x[s])
        tiled.append(np.broadcast_to(g, x[s].shape))
        argmax.append(am)
    h = np.concatenate(outputs + [np.concatenate(tiled)], axis=1)
    head_caches = []
    for lin, bn in params.head:
        h, cache = L.shared_mlp(h, lin, bn, params.blocks[0].activation_slope, train)
        head_caches.append(cache)
    logits = L.linear(h, params.classifier)
    return logits, NetCache(clouds, block_caches, outputs, argmax, head_caches, h)


def pvcnn_forward(params: ModelParams, cfg: PVCNNConfig, pc, train: bool = False,
                  return_cache: bool = False):
    """Per-point class logits.

    Normalization is computed once from the input coordinates and shared by
    every block. ``pc`` may be a list of clouds forming one batch; their logits
    come back stacked in order. ``train=False`` uses BN running statistics.
    """
    pcs = list(pc) if isinstance(pc, (list, tuple)) else [pc]
    if not pcs:
        raise ValueError("empty batch")
    for cloud in pcs:
        if cloud.n == 0:
            raise ValueError("cannot run the network on an empty cloud")
        if cloud.c != cfg.in_channels:
            raise ValueError(f"cloud has {cloud.c} feature channels, config expects {cfg.in_channels}")
    dtype = params.classifier.weight.dtype
    logits, cache = _forward(params, pcs, train, dtype)
    return (logits, cache) if return_cache else logits


def pvcnn_backward(params: ModelParams, cache: NetCache, dlogits: np.ndarray):
    """Returns ``(dfeatures, grads)`` with grads keyed by registry name."""
    grads = {}
    slope = params.blocks[0].activation_slope
    dh, dw, db = L.linear_backward(dlogits, cache.head_out, params.classifier)
    grads["classifier.weight"], grads["classifier.bias"] = dw, db
    for i in reversed(range(len(params.head))):
        lin, _ = params.head[i]
        dh, g = L.shared_mlp_backward(dh, cache.head_caches[i], lin, slope)
        grads[f"head{i}.linear.weight"], grads[f"head{i}.linear.bias"] = g["weight"], g["bias"]
        grads[f"head{i}.bn.gamma"], grads[f"head{i}.bn.beta"] = g["gamma"], g["beta"]
    widths = [o.shape[1] for o in cache.block_outputs]
    parts = np.split(dh, np.cumsum(widths), axis=1)
    dmax = np.concatenate([
        reduce_max_backward(parts[-1][s].sum(axis=0), am, s.stop - s.start)
        for s, am in zip(_segments(cache.clouds), cache.argmax)])
    dx = parts[len(widths) - 1] + dmax
    for i in reversed(range(len(params.blocks))):
        dx, g = pvconv_backward(dx, cache.block_caches[i], params.blocks[i])
        for k, v in g.items():
            grads[f"block{i}.{k}"] = v
        if i > 0:
            dx = dx + parts[i - 1]
    return dx, grads
