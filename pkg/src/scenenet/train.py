"""Training and evaluation: Nesterov SGD with step decay and top-k metrics."""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import Network
from .data import Dataset, normalization_stats, worker_count
from .freq import FilterSpec, apply_filter
from .layers import softmax_cross_entropy
from .tensor import NumericError, ValidationError

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "train_loss", "train_top1", "val_top1", "val_top5")


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    lr_step: int = 30
    lr_factor: float = 0.1
    seed: int = 0
    strict_determinism: bool = False

    def __post_init__(self):
        if self.base_lr <= 0 or self.weight_decay < 0 or self.lr_factor <= 0:
            raise ValidationError("learning rate and decay factor must be positive, weight decay non-negative")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step < 1:
            raise ValidationError("batch_size and lr_step must be positive, epochs non-negative")


@dataclass
class Metrics:
    top1: float
    top5: float
    mean_loss: float
    n: int = 0


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.base_lr * cfg.lr_factor ** (epoch // cfg.lr_step)


def sgd_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, epoch: int) -> None:
    """In-place Nesterov SGD update of every array in ``params``.

    ``g' = g + wd * w``; ``v = mu * v + g'``; ``w -= lr * (g' + mu * v)``.
    Weight decay applies to every parameter, batch-norm scales included.
    ``state`` maps parameter names to velocity buffers and is updated too.
    """
    lr = lr_at(cfg, epoch)
    mu = cfg.momentum
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValidationError(f"{name}: gradient shape {g.shape} does not match {w.shape}")
        g = g + cfg.weight_decay * w if cfg.weight_decay else g
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(w)
        v *= mu
        v += g
        w -= (lr * (g + mu * v)).astype(w.dtype, copy=False)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per sample: is the label among the ``k`` largest logits?

    A class ranks ahead of the label if its logit is larger, or equal with
    a lower class index.
    """
    logits = np.asarray(logits)
    if logits.ndim == 4:
        logits = logits.reshape(logits.shape[:2])
    labels = np.asarray(labels).reshape(-1)
    n, classes = logits.shape
    if not 1 <= k <= classes:
        raise ValidationError(f"k must lie in [1, {classes}], got {k}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValidationError(f"labels must lie in [0, {classes})")
    true = logits[np.arange(n), labels][:, None]
    ahead = (logits > true) | ((logits == true) & (np.arange(classes)[None, :] < labels[:, None]))
    return ahead.sum(axis=1) < k


def topk_accuracy(logits: np.ndarray, labels, k: int) -> float:
    hits = topk_correct(logits, labels, k)
    return float(hits.mean()) if hits.size else 0.0


def _normalize(images: np.ndarray, norm, dtype) -> np.ndarray:
    if norm is None:
        return images.astype(dtype, copy=False)
    mean, std = norm
    out = (images - np.asarray(mean).reshape(1, -1, 1, 1)) / np.asarray(std).reshape(1, -1, 1, 1)
    return out.astype(dtype, copy=False)


def _thread_limit(strict: bool):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=worker_count(strict))


def check_compatible(net: Network, dataset: Dataset) -> None:
    if dataset.num_classes > net.spec.num_classes:
        raise ValidationError(
            f"dataset has {dataset.num_classes} classes but the model predicts {net.spec.num_classes}"
        )
    if (dataset.side, dataset.side) != tuple(net.spec.input_size):
        raise ValidationError(
            f"dataset images are {dataset.side}x{dataset.side}, model expects {net.spec.input_size}"
        )


def evaluate(net: Network, dataset: Dataset, filter_spec: Optional[FilterSpec] = None,
             batch_size: int = 256, strict: bool = False) -> Metrics:
    """Eval-mode metrics over the whole set, optionally low/high-pass filtering first.

    Filtered images are clamped to [0, 1] before normalisation.
    """
    check_compatible(net, dataset)
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    k5 = min(5, net.spec.num_classes)
    hits1 = hits5 = 0
    loss_sum = 0.0
    with _thread_limit(strict):
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            if filter_spec is not None:
                images = np.clip(apply_filter(images.astype(np.float64), filter_spec), 0.0, 1.0)
            logits = net.forward(_normalize(images, net.norm, net.dtype), train=False)
            loss, _ = softmax_cross_entropy(logits.astype(np.float64), labels)
            loss_sum += loss * len(labels)
            hits1 += int(topk_correct(logits, labels, 1).sum())
            hits5 += int(topk_correct(logits, labels, k5).sum())
    n = len(dataset)
    return Metrics(hits1 / n, hits5 / n, loss_sum / n, n)


@dataclass
class TrainResult:
    history: list[dict]
    checkpoint: Optional[Path] = None


def train(net: Network, dataset: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None,
          checkpoint_dir=None, log_path=None) -> TrainResult:
    """Train ``net`` in place and return the per-epoch history.

    Normalisation statistics come from ``dataset`` and are attached to the
    network (and its checkpoint).  A non-finite loss raises
    :class:`NumericError` naming the first layer that produced it.
    """
    from .arch import save_checkpoint

    check_compatible(net, dataset)
    if len(dataset) == 0:
        raise ValidationError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    net.norm = normalization_stats(dataset)
    inputs = _normalize(dataset.images, net.norm, net.dtype)
    labels = dataset.labels
    state: dict = {}
    history = []
    with _thread_limit(cfg.strict_determinism):
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg, epoch)
            order = rng.permutation(len(dataset))
            loss_sum, hits, seen = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = inputs[idx], labels[idx]
                logits = net.forward(xb, train=True)
                loss, grad = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    where = net.first_nonfinite(xb) or "loss"
                    raise NumericError(f"non-finite loss at epoch {epoch}, first offending layer: {where}")
                net.backward(grad)
                sgd_step(net.param_dict(), net.grad_dict(), state, cfg, epoch)
                loss_sum += loss * len(idx)
                hits += int(topk_correct(logits, yb, 1).sum())
                seen += len(idx)
            row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "train_top1": hits / seen,
                   "val_top1": None, "val_top5": None}
            if val is not None:
                m = evaluate(net, val, batch_size=cfg.batch_size, strict=cfg.strict_determinism)
                row["val_top1"], row["val_top5"] = m.top1, m.top5
            logger.info("epoch %d lr %g loss %.4f top1 %.4f", epoch, lr, row["train_loss"], row["train_top1"])
            history.append(row)
    if log_path is not None:
        write_log(history, log_path)
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = save_checkpoint(net, checkpoint_dir, extra={"seed": cfg.seed, "epochs": cfg.epochs})
    return TrainResult(history, ckpt)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_log(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for row in history:
            writer.writerow([_fmt(row[key]) for key in LOG_HEADER])
