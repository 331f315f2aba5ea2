"""Speckle statistics across fiber configurations and 2-D embeddings."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import fibersim as fs
from .dataio import quantize_u8, standardize
from .metrics import jaccard_batch, pearson_rows
from .nn.unet import binarize_output

log = logging.getLogger(__name__)

FAMILIES = ("same_config_diff_input", "diff_config_same_input", "diff_config_diff_input")


@dataclass
class CorrelationStudy:
    samples: dict  # family -> 1-D array of PCC values
    sign_test_p: float
    n_sign_pairs: int
    bin_edges: np.ndarray

    def mean(self, family: str) -> float:
        return float(np.mean(self.samples[family]))

    def std(self, family: str) -> float:
        return float(np.std(self.samples[family]))

    def histograms(self) -> dict:
        return {f: np.histogram(v, bins=self.bin_edges)[0] for f, v in self.samples.items()}

    def summary_csv(self) -> str:
        lines = ["family,n,mean,std"]
        for f in FAMILIES:
            v = self.samples[f]
            lines.append(f"{f},{len(v)},{np.mean(v)!r},{np.std(v)!r}")
        lines.append(f"sign_test_p,{self.n_sign_pairs},{self.sign_test_p!r},")
        return "\n".join(lines) + "\n"

    def histogram_csv(self) -> str:
        counts = self.histograms()
        lines = ["bin_lo,bin_hi," + ",".join(FAMILIES)]
        for i in range(len(self.bin_edges) - 1):
            row = [repr(float(self.bin_edges[i])), repr(float(self.bin_edges[i + 1]))]
            row += [str(int(counts[f][i])) for f in FAMILIES]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _masked_speckles(model, configs, inputs) -> np.ndarray:
    mask = model.core_mask.ravel()
    out = []
    for cfg in configs:
        s = fs.speckle_batch(model, fs.assemble_tm(model, cfg), inputs)
        out.append(s.reshape(len(inputs), -1)[:, mask])
    return np.stack(out)  # (configs, inputs, pixels)


def correlation_study(model, n_configs: int, n_inputs: int, rng, inputs=None) -> CorrelationStudy:
    """PCC samples for the three pair families plus a paired sign test.

    The sign test pairs every same-input sample ``(c1, c2, i)`` with the
    different-input sample ``(c1, c2, i+1 mod n)`` and tests whether the
    same-input correlation is larger more often than not.
    """
    if n_configs < 2 or n_inputs < 2:
        raise ValueError("need at least two configurations and two inputs")
    if inputs is None:
        inputs = _fresh_inputs(model, n_inputs, rng)
    configs = [fs.random_configuration(rng, model.n_actuators) for _ in range(n_configs)]
    s = _masked_speckles(model, configs, inputs)

    same_cfg = []
    ii, jj = np.triu_indices(n_inputs, 1)
    for c in range(n_configs):
        same_cfg.append(pearson_rows(s[c, ii], s[c, jj]))
    same_in, diff_both, paired_diff = [], [], []
    shift = (np.arange(n_inputs) + 1) % n_inputs
    for c1, c2 in zip(*np.triu_indices(n_configs, 1)):
        same_in.append(pearson_rows(s[c1], s[c2]))
        paired_diff.append(pearson_rows(s[c1], s[c2, shift]))
        diff_both.append(pearson_rows(s[c1, jj], s[c2, ii]))
    samples = {
        FAMILIES[0]: np.concatenate(same_cfg),
        FAMILIES[1]: np.concatenate(same_in),
        FAMILIES[2]: np.concatenate(diff_both),
    }
    a = samples[FAMILIES[1]]
    b = np.concatenate(paired_diff)
    wins = int(np.count_nonzero(a > b))
    n = int(np.count_nonzero(a != b))
    p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    pooled = np.concatenate(list(samples.values()))
    edges = np.histogram_bin_edges(pooled, bins="fd")
    return CorrelationStudy(samples, float(p), n, edges)


def _fresh_inputs(model, n, rng):
    from .dataio import synth_digits

    return np.stack([d.pixels for d in synth_digits(rng, n, model.in_dims)])


# --------------------------------------------------------- degradation curve


@dataclass
class CurvePoint:
    steps: int
    pcc: float
    jaccard: float


def default_step_counts(max_steps: int = 1024, n_points: int = 10) -> list[int]:
    """Evenly spaced walk lengths from 0 to ``max_steps``."""
    return np.unique(np.round(np.linspace(0, max_steps, n_points)).astype(int)).tolist()


def ji_vs_pcc_curve(model, unet, base_config, test_digits, n_points: int = 10, rng=None, delta: float | None = None,
                    max_steps: int = 1024, step_counts=None, end_pcc: float = 0.15) -> list[CurvePoint]:
    """Walk away from ``base_config`` with weak steps and score the network.

    At each checkpoint of the walk the train-test PCC is the mean core-masked
    PCC between base and perturbed speckle for the same test inputs, and the
    JI is the mean reconstruction JI on those speckles. Without ``delta`` the
    step size is calibrated so the full walk ends near ``end_pcc``. Sorted by
    PCC.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if delta is None:
        delta = fs.calibrate_walk(model, max_steps, end_pcc, rng=np.random.default_rng(rng.integers(2**63)))
    digits = np.asarray(test_digits)
    counts = sorted(step_counts or default_step_counts(max_steps, n_points))
    mask = model.core_mask.ravel()
    base = fs.speckle_batch(model, fs.assemble_tm(model, base_config), digits)
    base_flat = base.reshape(len(digits), -1)[:, mask]
    from .dataio import upscale_targets

    targets = upscale_targets(digits, model.out_shape)
    cfg = base_config
    done = 0
    points = []
    for target_steps in counts:
        while done < target_steps:
            cfg = fs.perturb_step(cfg, rng, delta)
            done += 1
        sp = fs.speckle_batch(model, fs.assemble_tm(model, cfg), digits)
        pcc = float(pearson_rows(base_flat, sp.reshape(len(digits), -1)[:, mask]).mean())
        rec = binarize_output(unet.predict(standardize(sp)[:, None]))[:, 0]
        ji = float(jaccard_batch(rec, targets).mean())
        log.info("curve: %d steps pcc=%.3f ji=%.3f", done, pcc, ji)
        points.append(CurvePoint(done, pcc, ji))
    return sorted(points, key=lambda p: (p.pcc, p.steps))


def curve_csv(points) -> str:
    lines = ["steps,pcc,jaccard"]
    lines += [f"{p.steps},{p.pcc!r},{p.jaccard!r}" for p in points]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------- t-SNE


@dataclass
class Embedding2D:
    coords: np.ndarray
    config_ids: np.ndarray
    digit_labels: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "config_id", "digit_label"])
        for (x, y), c, d in zip(self.coords, self.config_ids, self.digit_labels):
            w.writerow([repr(float(x)), repr(float(y)), int(c), int(d)])
        return buf.getvalue()


def pca_power(x: np.ndarray, n_components: int = 50, n_iter: int = 60, rng=None) -> np.ndarray:
    """Project centred rows onto the leading principal subspace found by
    block power (subspace) iteration."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=0)
    k = min(n_components, x.shape[0], x.shape[1])
    basis, _ = np.linalg.qr(rng.standard_normal((x.shape[1], k)))
    for _ in range(n_iter):
        basis, _ = np.linalg.qr(x.T @ (x @ basis))
    # order components by explained variance
    proj = x @ basis
    small = proj.T @ proj
    w, v = np.linalg.eigh(small)
    return proj @ v[:, ::-1]


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-wise Gaussian conditionals whose entropy equals ln(perplexity).

    Returns ``(P, entropies)`` with ``P[i]`` the conditional distribution of
    point ``i`` (zero diagonal).
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()
        lo, hi = 0.0, np.inf
        scale = np.median(d[d > 0]) if np.any(d > 0) else 1.0
        beta = 1.0 / max(scale, 1e-12)
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            total = max(w.sum(), 1e-12)
            row = w / total
            h = np.log(total) + beta * np.sum(d * row)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            beta = min(beta, 1e24)  # bandwidth floor: sigma >= 1e-12
        p[i, np.arange(n) != i] = row
        entropies[i] = h
    return p, entropies


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    cond, _ = conditional_probabilities(squared_distances(x), perplexity)
    p = cond + cond.T
    return p / p.sum()


def tsne_embed(points: np.ndarray, perplexity: float = 30.0, n_iters: int = 1000, rng=None,
               learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250,
               pca_dims: int | None = 50) -> np.ndarray:
    """Exact t-SNE to two dimensions; returns (n, 2) coordinates.

    Gradient descent with momentum 0.5, switched to 0.8 at the end of early
    exaggeration, plus per-coordinate adaptive gains.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(x)
    if n < 4:
        raise ValueError("t-SNE needs at least four points")
    if not perplexity < n / 3:
        raise ValueError(f"perplexity {perplexity} must be below n/3 = {n / 3:.2f}")
    if pca_dims and x.shape[1] > pca_dims:
        x = pca_power(x, pca_dims, rng=rng)
    p = joint_probabilities(x, perplexity)
    y = rng.standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iters):
        pe = p * exaggeration if it < exaggeration_iters else p
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        coeff = (pe - q) * num
        grad = 4.0 * (coeff.sum(axis=1)[:, None] * y - coeff @ y)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite t-SNE gradient at iteration {it}")
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2).clip(0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return y


def knn_label_agreement(coords: np.ndarray, labels, k: int = 5) -> float:
    """Fraction of points whose k nearest neighbours' majority label is their
    own; a tie for the majority counts as a mismatch."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(coords)
    if not k < n:
        raise ValueError("k must be smaller than the number of points")
    d = squared_distances(coords)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    hits = 0
    for i in range(n):
        vals, counts = np.unique(labels[nbrs[i]], return_counts=True)
        top = counts.max()
        winners = vals[counts == top]
        if len(winners) == 1 and winners[0] == labels[i]:
            hits += 1
    return hits / n


def speckle_embedding(model, n_configs: int, per_config: int, rng, perplexity: float = 30.0,
                      n_iters: int = 1000) -> Embedding2D:
    """Embed 8-bit speckle from several random configurations."""
    from .dataio import synth_digits

    feats, cids, labels = [], [], []
    for c in range(n_configs):
        cfg = fs.random_configuration(rng, model.n_actuators)
        digits = synth_digits(rng, per_config, model.in_dims)
        x = np.stack([d.pixels for d in digits])
        sp = fs.speckle_batch(model, fs.assemble_tm(model, cfg), x)
        feats.append(np.stack([quantize_u8(s) for s in sp]).reshape(per_config, -1).astype(np.float64))
        cids.append(np.full(per_config, c))
        labels.append([d.label for d in digits])
    coords = tsne_embed(np.concatenate(feats), perplexity, n_iters, rng)
    return Embedding2D(coords, np.concatenate(cids), np.concatenate(labels))
