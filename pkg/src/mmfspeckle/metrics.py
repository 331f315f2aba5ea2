"""Reconstruction and speckle similarity metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np


class ConstantInputError(ValueError):
    """Pearson correlation is undefined for constant data."""


def _same_shape(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def pixel_accuracy(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a > 0) == (b > 0)))


def jaccard_index(a, b) -> float:
    """Intersection over union of foreground pixels; 1.0 when both are empty."""
    a, b = _same_shape(a, b)
    a = a > 0
    b = b > 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def jaccard_batch(pred, truth) -> np.ndarray:
    pred, truth = _same_shape(pred, truth)
    p = (pred > 0).reshape(len(pred), -1)
    t = (truth > 0).reshape(len(truth), -1)
    inter = np.count_nonzero(p & t, axis=1)
    union = np.count_nonzero(p | t, axis=1)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def accuracy_batch(pred, truth) -> np.ndarray:
    pred, truth = _same_shape(pred, truth)
    return np.mean(((pred > 0) == (truth > 0)).reshape(len(pred), -1), axis=1)


def pearson_masked(x, y, mask=None) -> float:
    """Pearson correlation over the pixels selected by ``mask`` (64-bit)."""
    x, y = _same_shape(x, y)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if np.count_nonzero(mask) < 2:
        raise ConstantInputError("mask must select at least two pixels")
    xv = x[mask].astype(np.float64)
    yv = y[mask].astype(np.float64)
    xv = xv - xv.mean()
    yv = yv - yv.mean()
    sxx = xv @ xv
    syy = yv @ yv
    if sxx == 0 or syy == 0:
        raise ConstantInputError("masked values are constant")
    r = (xv @ yv) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation of two (n, d) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
    if np.any(den == 0):
        raise ConstantInputError("a row is constant")
    return np.clip(np.einsum("ij,ij->i", a, b) / den, -1.0, 1.0)


def classification_success(predictions, truths) -> float:
    p, t = _same_shape(predictions, truths)
    if p.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(p == t))


@dataclass
class EvalReport:
    partition: str
    n_samples: int
    accuracy_mean: float
    accuracy_std: float
    jaccard_mean: float
    jaccard_std: float
    classification_success: float

    @property
    def classification_error(self) -> float:
        return 1.0 - self.classification_success

    def row(self) -> dict:
        d = asdict(self)
        d["classification_error"] = self.classification_error
        return d


REPORT_COLUMNS = [
    "experiment",
    "partition",
    "n_samples",
    "accuracy_mean",
    "accuracy_std",
    "jaccard_mean",
    "jaccard_std",
    "classification_success",
    "classification_error",
]


def summarize(partition: str, pred, truth, pred_labels=None, labels=None) -> EvalReport:
    acc = accuracy_batch(pred, truth)
    ji = jaccard_batch(pred, truth)
    success = float("nan") if pred_labels is None else classification_success(pred_labels, labels)
    return EvalReport(
        partition=partition,
        n_samples=len(acc),
        accuracy_mean=float(acc.mean()),
        accuracy_std=float(acc.std()),
        jaccard_mean=float(ji.mean()),
        jaccard_std=float(ji.std()),
        classification_success=success,
    )


def evaluate(model, classifier, dataset, known_ids=(), batch_size: int = 128) -> dict[str, EvalReport]:
    """Reconstruct every record, binarize, and score per partition.

    Records whose configuration id is in ``known_ids`` form the "known"
    partition, the rest "unknown"; empty partitions are omitted.
    """
    from .nn.unet import reconstruct_binary

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    pred = reconstruct_binary(model, dataset, batch_size=batch_size)
    truth = dataset.target_images(dataset.speckle_raw.shape[1:])
    pred_labels = None if classifier is None else classifier.predict(pred)
    labels = dataset.labels.astype(np.int64)
    known = np.isin(dataset.config_ids, np.asarray(list(known_ids), dtype=np.int64))
    reports = {}
    for name, sel in (("known", known), ("unknown", ~known)):
        if not sel.any():
            continue
        reports[name] = summarize(
            name,
            pred[sel],
            truth[sel],
            None if pred_labels is None else pred_labels[sel],
            labels[sel],
        )
    return reports


def reports_to_csv(rows: list[tuple[str, EvalReport]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for experiment, report in rows:
        writer.writerow({"experiment": experiment, **{k: _fmt(v) for k, v in report.row().items()}})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
