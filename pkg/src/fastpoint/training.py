"""Optimizer, schedules, augmentation, the training loop and evaluation metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .data import DatasetFormatError, LabeledDataset
from .tensor import Parameter, Tape, softmax_cross_entropy

log = logging.getLogger(__name__)

BASE_LR = 0.001
MIN_LR = 1e-5
BN_DECAY_START = 0.7
BN_DECAY_MAX = 0.99
DECAY_PERIOD = 20


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for p in params:
        if p.grad is None or p.grad.shape != p.shape:
            raise ValueError(f"parameter {p.name!r} has no gradient of shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.zero_grad()


def lr_at_epoch(epoch: int) -> float:
    """0.001 halved every 20 epochs, floored at 1e-5."""
    return max(MIN_LR, BASE_LR * 0.5 ** (epoch // DECAY_PERIOD))


def bn_decay_at_epoch(epoch: int) -> float:
    """0.7 rising towards 0.99 on the same 20-epoch period as the learning rate."""
    return min(BN_DECAY_MAX, 1.0 - (1.0 - BN_DECAY_START) * 0.5 ** (epoch // DECAY_PERIOD))


def augment(cloud, rng: np.random.Generator, rotate: bool = True, scale_range=(0.8, 1.25),
            jitter_sigma: float = 0.01, jitter_clip: float = 0.05) -> np.ndarray:
    """Rotate about the up (y) axis, scale uniformly, then add clipped Gaussian jitter."""
    pts = np.asarray(cloud, dtype=np.float64)
    if rotate:
        theta = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        pts = pts @ np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]).T
    pts = pts * rng.uniform(*scale_range)
    if jitter_sigma > 0:
        pts = pts + np.clip(rng.normal(0, jitter_sigma, pts.shape), -jitter_clip, jitter_clip)
    return pts.astype(np.asarray(cloud).dtype)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    bn_decay: float
    train_loss: float
    train_acc: float
    wall_seconds: float

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6g} bn_decay={self.bn_decay:.6g} "
                f"train_loss={self.train_loss:.9g} train_acc={self.train_acc:.9g} "
                f"wall_seconds={self.wall_seconds:.3f}")


def train(model, dataset: LabeledDataset, epochs: int, batch_size: int = 32, seed: int = 0,
          indices=None, ckpt_path=None, log_path=None, resume: bool = False,
          meta: Optional[dict] = None) -> list[EpochLog]:
    """Train ``model`` on ``dataset`` (restricted to ``indices``) for ``epochs`` epochs.

    All randomness in epoch ``e`` comes from a generator seeded with
    ``(seed, e)``, so a run resumed from an epoch-``e`` checkpoint continues
    exactly like an uninterrupted one. The final short batch is dropped.
    """
    task = model.config.task
    if dataset.task != task:
        raise DatasetFormatError(f"model task {task!r} does not match dataset task {dataset.task!r}")
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot train on an empty dataset")
    n_batches = len(indices) // batch_size
    if epochs > 0 and n_batches == 0:
        raise ValueError(f"{len(indices)} training shapes do not fill one batch of {batch_size}")

    params = model.parameters()
    adam = AdamState()
    start = 0
    meta = dict(meta or {}, seed=seed, batch_size=batch_size)
    if resume and ckpt_path is not None and Path(ckpt_path).exists():
        ck = ckpt_io.load(ckpt_path)
        ckpt_io.restore(ck, model, adam)
        start = ck.epoch
        log.info("resuming from %s at epoch %d", ckpt_path, start)
    elif ckpt_path is not None:
        ckpt_io.save(ckpt_io.capture(model, 0, adam, meta), ckpt_path)

    history = []
    for epoch in range(start, epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, epoch])
        lr = lr_at_epoch(epoch)
        decay = bn_decay_at_epoch(epoch)
        model.set_bn_decay(decay)
        order = rng.permutation(indices)
        loss_sum, correct, seen = 0.0, 0, 0
        for bi in range(n_batches):
            idx = order[bi * batch_size:(bi + 1) * batch_size]
            clouds = np.stack([augment(dataset.points[i], rng) for i in idx])
            labels = dataset.labels[idx].astype(np.int64)
            with Tape() as tape:
                logits = model(clouds, training=True, rng=rng)
                loss = softmax_cross_entropy(logits, labels)
            tape.backward(loss)
            adam_step(params, adam, lr)
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=-1) == labels).sum())
            seen += labels.size
        entry = EpochLog(epoch, lr, decay, loss_sum / (n_batches * batch_size), correct / seen,
                         time.perf_counter() - t0)
        history.append(entry)
        log.info(entry.line())
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(entry.line() + "\n")
        if ckpt_path is not None:
            ckpt_io.save(ckpt_io.capture(model, epoch + 1, adam, meta), ckpt_path)
    return history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    count: int
    overall_accuracy: float
    mean_class_accuracy: Optional[float] = None
    per_class_accuracy: dict = field(default_factory=dict)
    excluded_classes: list = field(default_factory=list)
    per_category_miou: dict = field(default_factory=dict)
    mean_miou: Optional[float] = None

    def lines(self) -> list[str]:
        """Machine-readable ``key=value`` lines."""
        out = [f"count={self.count}", f"overall_accuracy={self.overall_accuracy:.6f}"]
        if self.mean_class_accuracy is not None:
            out.append(f"mean_class_accuracy={self.mean_class_accuracy:.6f}")
        out += [f"class_accuracy[{c}]={a:.6f}" for c, a in sorted(self.per_class_accuracy.items())]
        if self.excluded_classes:
            out.append("excluded_classes=" + ",".join(map(str, self.excluded_classes)))
        if self.mean_miou is not None:
            out.append(f"mean_miou={self.mean_miou:.6f}")
        out += [f"category_miou[{c}]={v:.6f}" for c, v in sorted(self.per_category_miou.items())]
        return out


def classification_report(pred, labels, num_classes: int) -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    per_class, excluded = {}, []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            excluded.append(c)
            continue
        per_class[c] = float((pred[mask] == c).mean())
    mean_cls = float(np.mean(list(per_class.values()))) if per_class else 0.0
    overall = float((pred == labels).mean()) if labels.size else 0.0
    return EvalReport(int(labels.size), overall, mean_cls, per_class, excluded)


def shape_iou(pred, gt, parts: Sequence[int]) -> float:
    """Mean IoU over ``parts`` for one shape; a part absent from both counts as 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (gt == p))
        union = np.sum((pred == p) | (gt == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def segmentation_report(preds, labels, categories, category_parts) -> EvalReport:
    """Per-category mIoU (mean over that category's shapes) and the shape-weighted mean."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    by_cat: dict[int, list] = {}
    for i, (p, g, c) in enumerate(zip(preds, labels, categories)):
        parts = category_parts[int(c)]
        if not np.isin(g, parts).all():
            raise DatasetFormatError(f"shape {i} has labels outside category {int(c)}'s parts {parts}")
        by_cat.setdefault(int(c), []).append(shape_iou(p, g, parts))
    all_ious = [v for vals in by_cat.values() for v in vals]
    return EvalReport(
        count=int(len(labels)),
        overall_accuracy=float((preds == labels).mean()) if labels.size else 0.0,
        per_category_miou={c: float(np.mean(v)) for c, v in by_cat.items()},
        mean_miou=float(np.mean(all_ious)) if all_ious else 0.0,
    )


def predict_logits(model, points, batch_size: int = 32) -> np.ndarray:
    """Inference-mode logits with the canonical sampling seed."""
    outs = [model(points[s:s + batch_size], training=False).data for s in range(0, len(points), batch_size)]
    return np.concatenate(outs)


def predict_parts(model, points, categories, category_parts, batch_size: int = 8) -> np.ndarray:
    """Per-point part ids, choosing only among the parts of each shape's category."""
    logits = predict_logits(model, points, batch_size)
    masked = np.full_like(logits, -np.inf)
    for i, c in enumerate(categories):
        parts = category_parts[int(c)]
        masked[i][:, parts] = logits[i][:, parts]
    return masked.argmax(axis=-1)


def evaluate_classification(model, dataset: LabeledDataset, indices=None, batch_size: int = 32) -> EvalReport:
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    pred = predict_logits(model, dataset.points[idx], batch_size).argmax(axis=-1)
    return classification_report(pred, dataset.labels[idx], dataset.num_classes)


def evaluate_segmentation_miou(model, dataset: LabeledDataset, indices=None, batch_size: int = 8) -> EvalReport:
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    cats = dataset.categories()[idx]
    pred = predict_parts(model, dataset.points[idx], cats, dataset.category_parts, batch_size)
    return segmentation_report(pred, dataset.labels[idx], cats, dataset.category_parts)
