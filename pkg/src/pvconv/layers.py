"""Neural building blocks with explicit forward and backward passes.

conv3d works on ``b x c x r x r x r`` volumes (stride 1, zero padding 1,
3x3x3 cross-correlation). batch_norm normalizes over every axis except axis 1,
which makes it serve both voxel volumes and ``n x c`` point features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
KERNEL = 3


@dataclass
class Conv3dParams:
    weight: np.ndarray  # c_out x c_in x 3 x 3 x 3
    bias: np.ndarray    # c_out

    def __post_init__(self):
        if self.weight.ndim != 5 or self.weight.shape[2:] != (KERNEL,) * 3:
            raise ValueError(f"conv weight must be c_out x c_in x 3 x 3 x 3, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")


@dataclass
class LinearParams:
    weight: np.ndarray  # c_out x c_in
    bias: np.ndarray    # c_out

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"linear weight {self.weight.shape} and bias {self.bias.shape} disagree")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPS
    mode: str = "train"

    @classmethod
    def create(cls, c: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))


@dataclass
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple
    train: bool


# -- conv3d -------------------------------------------------------------------

_TAPS = [(i, j, k) for i in range(KERNEL) for j in range(KERNEL) for k in range(KERNEL)]


def _patches(x: np.ndarray) -> np.ndarray:
    """b x c x d x h x w -> b x (27 * c) x (d * h * w), tap-major rows."""
    b, c, d, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((b, KERNEL ** 3, c, d, h, w), dtype=x.dtype)
    for t, (i, j, k) in enumerate(_TAPS):
        cols[:, t] = padded[:, :, i:i + d, j:j + h, k:k + w]
    return cols.reshape(b, KERNEL ** 3 * c, d * h * w)


def _tap_major(weight: np.ndarray) -> np.ndarray:
    """c_out x c_in x 3 x 3 x 3 -> c_out x (27 * c_in), matching ``_patches`` rows."""
    c_out, c_in = weight.shape[:2]
    return weight.reshape(c_out, c_in, KERNEL ** 3).transpose(0, 2, 1).reshape(c_out, -1)


def conv3d(x: np.ndarray, p: Conv3dParams, return_patches: bool = False):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects b x c x r x r x r input, got {x.shape}")
    b, c_in, d, h, w = x.shape
    c_out = p.weight.shape[0]
    if p.weight.shape[1] != c_in:
        raise ValueError(f"conv3d channel mismatch: input has {c_in}, weight expects {p.weight.shape[1]}")
    cols = _patches(x)
    wmat = _tap_major(p.weight)
    out = np.empty((b, c_out, d * h * w), dtype=np.result_type(x, p.weight))
    for s in range(b):
        out[s] = wmat @ cols[s]
    out += p.bias[None, :, None]
    out = out.reshape(b, c_out, d, h, w)
    return (out, cols) if return_patches else out


def conv3d_backward(dout: np.ndarray, x: np.ndarray, p: Conv3dParams, patches=None):
    """Returns ``(dx, dweight, dbias)``. ``patches`` may carry the forward's patch matrix."""
    b, c_in, d, h, w = x.shape
    c_out = p.weight.shape[0]
    cols = _patches(x) if patches is None else patches
    wmat = _tap_major(p.weight)
    dflat = dout.reshape(b, c_out, d * h * w)
    dwmat = np.zeros_like(wmat)
    dpad = np.zeros((b, c_in, d + 2, h + 2, w + 2), dtype=dout.dtype)
    for s in range(b):
        dwmat += dflat[s] @ cols[s].T
        dcols = (wmat.T @ dflat[s]).reshape(KERNEL ** 3, c_in, d, h, w)
        for t, (i, j, k) in enumerate(_TAPS):
            dpad[s, :, i:i + d, j:j + h, k:k + w] += dcols[t]
    dweight = dwmat.reshape(c_out, KERNEL ** 3, c_in).transpose(0, 2, 1).reshape(p.weight.shape)
    dbias = dflat.sum(axis=(0, 2))
    return dpad[:, :, 1:-1, 1:-1, 1:-1], dweight, dbias


# -- batch norm ---------------------------------------------------------------

def _bn_shape(x: np.ndarray, c: int) -> tuple:
    shape = [1] * x.ndim
    shape[1] = c
    return tuple(shape)


def batch_norm(x: np.ndarray, s: BatchNormState, train: bool | None = None):
    """Normalize over all non-channel axes; returns ``(out, cache)``.

    In train mode the batch statistics (biased variance) are used and the
    running statistics are updated in place with the state's momentum.
    """
    if train is None:
        train = s.mode == "train"
    if x.ndim < 2:
        raise ValueError(f"batch_norm needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if s.gamma.shape != (c,):
        raise ValueError(f"batch_norm has {s.gamma.shape[0]} channels, input has {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = _bn_shape(x, c)
    if train:
        per_channel = x.size // c
        if per_channel < 2:
            raise ValueError("batch_norm in train mode needs at least 2 elements per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = s.momentum
        s.running_mean[...] = (1 - m) * s.running_mean + m * mean
        s.running_var[...] = (1 - m) * s.running_var + m * var
    else:
        mean, var = s.running_mean, s.running_var
    inv_std = (1.0 / np.sqrt(var + s.epsilon)).astype(x.dtype)
    x_hat = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = s.gamma.reshape(shape) * x_hat + s.beta.reshape(shape)
    return out.astype(x.dtype, copy=False), BNCache(x_hat, inv_std, s.gamma, axes, train)


def batch_norm_backward(dout: np.ndarray, cache: BNCache):
    """Returns ``(dx, dgamma, dbeta)``."""
    shape = _bn_shape(dout, dout.shape[1])
    dbeta = dout.sum(axis=cache.axes)
    dgamma = (dout * cache.x_hat).sum(axis=cache.axes)
    dx_hat = dout * cache.gamma.reshape(shape)
    if not cache.train:
        return dx_hat * cache.inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    mean_dx = dx_hat.sum(axis=cache.axes).reshape(shape) / m
    mean_dx_xhat = (dx_hat * cache.x_hat).sum(axis=cache.axes).reshape(shape) / m
    dx = cache.inv_std.reshape(shape) * (dx_hat - mean_dx - cache.x_hat * mean_dx_xhat)
    return dx, dgamma, dbeta


# -- activation and linear ------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(dout: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, dout, dout * dout.dtype.type(slope))


def linear(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ValueError(f"linear expects n x {p.weight.shape[1]} input, got {x.shape}")
    return x @ p.weight.T + p.bias


def linear_backward(dout: np.ndarray, x: np.ndarray, p: LinearParams):
    return dout @ p.weight, dout.T @ x, dout.sum(axis=0)


@dataclass
class MLPCache:
    x: np.ndarray
    pre_act: np.ndarray
    bn: BNCache


def shared_mlp(x: np.ndarray, p: LinearParams, bn: BatchNormState,
               slope: float = LEAKY_SLOPE, train: bool | None = None):
    """Per-point linear -> batch norm over points -> leaky ReLU. Returns ``(out, cache)``."""
    z = linear(x, p)
    y, bn_cache = batch_norm(z, bn, train)
    return leaky_relu(y, slope), MLPCache(x, y, bn_cache)


def shared_mlp_backward(dout: np.ndarray, cache: MLPCache, p: LinearParams,
                        slope: float = LEAKY_SLOPE):
    """Returns ``(dx, grads)`` with grads keyed weight, bias, gamma, beta."""
    dy = leaky_relu_backward(dout, cache.pre_act, slope)
    dz, dgamma, dbeta = batch_norm_backward(dy, cache.bn)
    dx, dw, db = linear_backward(dz, cache.x, p)
    return dx, {"weight": dw, "bias": db, "gamma": dgamma, "beta": dbeta}


# -- parameter container --------------------------------------------------------

MAGIC = b"PVCPARAM"


class ParamFormatError(ValueError):
    """Raised when a parameter container cannot be read."""


def save_params(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a little-endian blob preceded by a JSON manifest.

    Layout: 8-byte magic, uint64 manifest length, UTF-8 JSON manifest, data.
    Offsets in the manifest are relative to the start of the data section.
    """
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format": "pvc-params", "version": 1, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_params(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ParamFormatError(f"{path}: not a parameter container")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParamFormatError(f"{path}: unreadable manifest ({exc})") from None
    data = memoryview(blob)[16 + mlen:]
    out = {}
    for e in entries:
        try:
            dtype = np.dtype(e["dtype"]).newbyteorder("<")
            start, nbytes, shape = int(e["offset"]), int(e["nbytes"]), tuple(e["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParamFormatError(f"{path}: bad manifest entry {e!r} ({exc})") from None
        if start + nbytes > len(data) or nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ParamFormatError(f"{path}: tensor {e.get('name')!r} is truncated or inconsistent")
        arr = np.frombuffer(data[start:start + nbytes], dtype=dtype).reshape(shape)
        out[e["name"]] = arr.astype(dtype.newbyteorder("="))
    return out
