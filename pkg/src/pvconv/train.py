"""Loss, optimizer, part-averaged IoU and the deterministic training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloud import PointCloud
from .model import ModelParams, PVCNNConfig, build_pvcnn, pvcnn_backward, pvcnn_forward


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over points; returns ``(loss, dlogits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: dict, lr: float = 1e-3, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, lr=lr, **kw)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam, applied in place in ascending name order."""
    for name in sorted(params):
        if params[name].shape != grads[name].shape:
            raise ValueError(f"{name}: grad shape {grads[name].shape} != param {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        p, g = params[name], grads[name]
        m, v = state.m[name], state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)


@dataclass
class IoUReport:
    per_shape_miou: list
    mean_miou: float
    per_class_iou: list
    classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_miou": self.mean_miou, "per_shape_miou": self.per_shape_miou,
                "classes": self.classes, "per_class_iou": self.per_class_iou}


def evaluate_miou(preds: Sequence, gts: Sequence, parts_per_shape: Optional[Sequence] = None) -> IoUReport:
    """Part-averaged IoU.

    For each shape, IoU is taken for every part class in that shape's part set
    (default: classes present in its prediction or ground truth); a class whose
    union is empty for the shape is skipped. The shape score is the mean over
    its scored classes, and the final figure is the mean over shapes.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if parts_per_shape is not None and len(parts_per_shape) != len(gts):
        raise ValueError("parts_per_shape must have one entry per shape")
    per_shape, class_scores = [], {}
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape {i}: {p.shape[0]} predictions vs {g.shape[0]} labels")
        parts = (sorted(parts_per_shape[i]) if parts_per_shape is not None
                 else sorted(set(np.unique(p).tolist()) | set(np.unique(g).tolist())))
        scores = []
        for cls in parts:
            inter = int(np.sum((p == cls) & (g == cls)))
            union = int(np.sum((p == cls) | (g == cls)))
            if union == 0:
                continue
            iou = inter / union
            scores.append(iou)
            class_scores.setdefault(int(cls), []).append(iou)
        per_shape.append(float(np.mean(scores)) if scores else 0.0)
    classes = sorted(class_scores)
    return IoUReport(per_shape, float(np.mean(per_shape)) if per_shape else 0.0,
                     [float(np.mean(class_scores[c])) for c in classes], classes)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    devox_mode: str = "trilinear"
    voxel_convs_per_block: int = 2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.devox_mode not in ("trilinear", "nearest"):
            raise ValueError(f"unknown devox_mode {self.devox_mode!r}")
        if self.voxel_convs_per_block not in (1, 2, 3):
            raise ValueError("voxel_convs_per_block must be 1, 2 or 3")


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def predict(params: ModelParams, cfg: PVCNNConfig, clouds: Sequence[PointCloud]) -> list[np.ndarray]:
    return [np.argmax(pvcnn_forward(params, cfg, pc, train=False), axis=1) for pc in clouds]


def evaluate(params, cfg, clouds) -> tuple[IoUReport, float]:
    """Part-averaged IoU (part set = all classes of the config) and point accuracy."""
    preds = predict(params, cfg, clouds)
    gts = [pc.labels for pc in clouds]
    parts = [range(cfg.num_classes)] * len(clouds)
    correct = sum(int(np.sum(p == g)) for p, g in zip(preds, gts))
    total = sum(len(g) for g in gts)
    return evaluate_miou(preds, gts, parts), correct / total


def _check_labeled(clouds, name):
    if not clouds:
        raise ValueError(f"{name} dataset is empty")
    for i, pc in enumerate(clouds):
        if pc.labels is None:
            raise ValueError(f"{name} cloud {i} is unlabeled")


@dataclass
class TrainResult:
    params: ModelParams
    cfg: PVCNNConfig
    log: list


def train(cfg: PVCNNConfig, train_data: Sequence[PointCloud], tc: TrainConfig,
          val_data: Optional[Sequence[PointCloud]] = None, log_file=None,
          params: Optional[ModelParams] = None) -> TrainResult:
    """Train with Adam on mini-batches of clouds.

    The clouds of a batch share one forward pass, so batch norm sees the whole
    batch; the loss is the mean over clouds of each cloud's mean point loss.

    The run is a pure function of (config, data, seed): initialisation and the
    per-epoch shuffle both derive from ``tc.seed``. One metric record is
    produced per epoch: ``{epoch, loss, train_acc, val_miou}``.
    """
    _check_labeled(train_data, "training")
    if val_data:
        _check_labeled(val_data, "validation")
    cfg = PVCNNConfig.from_dict({**cfg.to_dict(), "devox_mode": tc.devox_mode,
                                 "voxel_convs_per_block": tc.voxel_convs_per_block})
    if params is None:
        params = build_pvcnn(cfg, tc.seed)
    trainable = params.trainable()
    opt = AdamState.create(trainable, lr=tc.lr)
    rng = np.random.default_rng(tc.seed)
    log = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_data))
        params.set_mode("train")
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), tc.batch_size):
            batch = [train_data[i] for i in order[start:start + tc.batch_size]]
            logits, cache = pvcnn_forward(params, cfg, batch, train=True, return_cache=True)
            labels = np.concatenate([pc.labels for pc in batch])
            dlogits, losses = [], []
            offset = 0
            for pc in batch:
                loss, d = cross_entropy(logits[offset:offset + pc.n], pc.labels)
                losses.append(loss)
                dlogits.append(d / len(batch))
                offset += pc.n
            if not all(math.isfinite(v) for v in losses):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            _, grads = pvcnn_backward(params, cache, np.concatenate(dlogits))
            adam_step(trainable, {k: grads[k] for k in trainable}, opt)
            loss_sum += sum(losses)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += len(labels)
        params.set_mode("eval")
        record = {"epoch": epoch, "loss": loss_sum / len(train_data),
                  "train_acc": correct / seen,
                  "val_miou": evaluate(params, cfg, val_data)[0].mean_miou if val_data else None}
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
    params.set_mode("eval")
    return TrainResult(params, cfg, log)
