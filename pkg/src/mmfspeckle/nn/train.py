"""Mini-batch training loop for the reconstruction network."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from ..metrics import jaccard_batch
from .optim import AdamState, adam_update, lr_schedule
from .unet import UNet, binarize_output

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    val_jaccard: float
    seconds: float


def _arrays(model: UNet, dataset):
    x = dataset.inputs()
    y = dataset.target_images(x.shape[2:])[:, None].astype(np.float32)
    return x, y


def validation_jaccard(model: UNet, x: np.ndarray, y: np.ndarray) -> float:
    pred = binarize_output(model.predict(x))
    return float(jaccard_batch(pred, y).mean())


def train(model: UNet, dataset, epochs: int, batch_size: int = 32, rng=None, base_lr: float = 1e-4,
          val=None, state: AdamState | None = None, on_epoch=None):
    """Adam with step decay and a seeded per-epoch shuffle.

    Returns ``(model, history)``; history holds one :class:`EpochStats` per
    epoch (validation JI is NaN without a validation set).
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(0) if rng is None else rng
    state = AdamState(lr=base_lr) if state is None else state
    x, y = _arrays(model, dataset)
    vx, vy = _arrays(model, val) if val is not None else (None, None)
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, base_lr)
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start:start + batch_size])
            loss, grads = model.loss_and_grad(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            adam_update(state, model.params, grads, lr)
            total += loss * len(idx)
        val_ji = validation_jaccard(model, vx, vy) if vx is not None else float("nan")
        stats = EpochStats(epoch, lr, total / len(x), val_ji, time.perf_counter() - t0)
        history.append(stats)
        log.info("epoch %d lr=%.2e loss=%.5f val_ji=%.4f (%.1fs)", epoch, lr, stats.loss, val_ji, stats.seconds)
        if on_epoch is not None:
            on_epoch(stats)
    return model, history


def history_csv(history) -> str:
    # wall time stays in the log so the CSV is reproducible
    lines = ["epoch,lr,loss,val_jaccard"]
    for h in history:
        lines.append(f"{h.epoch},{h.lr!r},{h.loss!r},{h.val_jaccard!r}")
    return "\n".join(lines) + "\n"
