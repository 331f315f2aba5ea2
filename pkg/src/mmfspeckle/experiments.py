"""Experiment protocols behind the CLI presets.

E1 single configuration, E2 eight configurations, E3 weak-perturbation
steps, E4 degradation curve, E5 configuration training, E6 macro-bend
comparison. Every random draw comes from ``rng_for(cfg, stream, ...)`` so a
run is a pure function of its RunConfig.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import analysis
from . import fibersim as fs
from .config import RunConfig
from .dataio import DatasetContainer, digit_arrays, mnist_digits, quantize_u8, synth_digits
from .metrics import EvalReport, evaluate, jaccard_batch
from .nn.classifier import Classifier, classifier_train
from .nn.train import train
from .nn.unet import UNet, reconstruct_binary

log = logging.getLogger(__name__)

STREAMS = {
    "calibrate": 1,
    "train_digits": 2,
    "test_digits": 3,
    "configs": 4,
    "init": 5,
    "shuffle": 6,
    "walk": 7,
    "curve": 8,
    "stats": 9,
    "embed": 10,
    "classifier": 11,
    "macro": 12,
}

# config ids for unknown test configurations start here
UNKNOWN_BASE = 1 << 20
VAL_RECORDS = 500


def rng_for(cfg: RunConfig, stream: str, *index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STREAMS[stream], *index])


# ----------------------------------------------------------------------- fiber


def build_fiber(cfg: RunConfig) -> tuple[fs.FiberModel, dict]:
    """Fiber for this run: fixed sigma if given, else calibrated to target_pcc."""
    model = fs.new_fiber(cfg.seed, cfg.n_modes, cfg.n_actuators, cfg.in_dims, cfg.out_dims)
    if cfg.sigma > 0:
        model.sigma = cfg.sigma
    else:
        fs.calibrate_sigma(model, cfg.target_pcc, cfg.pcc_tol, rng_for(cfg, "calibrate"))
    return model, {"sigma": model.sigma}


def remeasure_pcc(model: fs.FiberModel, rng, n_pairs: int = 50) -> tuple[float, float]:
    """Mean and std PCC over fresh configuration pairs and fresh probe digits."""
    k = model.n_actuators
    pairs = [(fs.random_configuration(rng, k), fs.random_configuration(rng, k)) for _ in range(n_pairs)]
    probes = np.stack([d.pixels for d in synth_digits(rng, fs.CALIBRATION_PROBES, model.in_dims)])
    return fs.mean_config_pcc(model, pairs, probes)


# ---------------------------------------------------------------------- digits


def draw_digits(cfg: RunConfig, split: str, n: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` binary digits for block ``index`` of a split ("train" or "test").

    MNIST blocks are consecutive slices of the matching MNIST split; the
    synthetic fallback seeds each block independently.
    """
    if cfg.mnist_dir:
        mnist_split = "train" if split == "train" else "test"
        return digit_arrays(mnist_digits(cfg.mnist_dir, mnist_split, n, cfg.in_dims, cfg.threshold, offset=index * n))
    return digit_arrays(synth_digits(rng_for(cfg, f"{split}_digits", index), n, cfg.in_dims))


def config_theta(cfg: RunConfig, config_id: int) -> np.ndarray:
    """float32 actuator vector for a configuration id (what records store)."""
    conf = fs.random_configuration(rng_for(cfg, "configs", config_id), cfg.n_actuators)
    return conf.theta.astype(np.float32)


def make_records(model: fs.FiberModel, config_id: int, theta, pixels: np.ndarray, labels) -> DatasetContainer:
    """Propagate digits through one configuration.

    The float32 theta is what gets stored, and it is also what propagates, so
    stored records replay exactly.
    """
    theta = np.asarray(theta, dtype=np.float32)
    tm = fs.assemble_tm(model, fs.Configuration(theta.astype(np.float64)))
    raw = fs.speckle_batch(model, tm, pixels)
    n = len(pixels)
    return DatasetContainer(
        np.stack([quantize_u8(s) for s in raw]) if n else np.zeros((0, *raw.shape[1:]), np.uint8),
        raw.astype(np.float32),
        np.asarray(pixels, dtype=np.uint8),
        np.asarray(labels, dtype=np.uint8),
        np.full(n, config_id, dtype=np.uint32),
        np.repeat(theta[None], n, axis=0),
    )


# ---------------------------------------------------------------------- splits


@dataclass
class Split:
    train: DatasetContainer
    test: DatasetContainer
    known_ids: tuple
    meta: dict = field(default_factory=dict)


def standard_split(cfg: RunConfig, model: fs.FiberModel) -> Split:
    """Random configurations (E1, E2, E5).

    Test block j uses the same digits for the j-th known and the j-th unknown
    configuration, so the two partitions differ only in the fiber state.
    """
    train_parts, test_parts = [], []
    for c in range(cfg.n_train_configs):
        pixels, labels = draw_digits(cfg, "train", cfg.train_per_config, c)
        train_parts.append(make_records(model, c, config_theta(cfg, c), pixels, labels))
    for j in range(cfg.n_known_test_configs):
        pixels, labels = draw_digits(cfg, "test", cfg.test_per_config, j)
        test_parts.append(make_records(model, j, config_theta(cfg, j), pixels, labels))
    for j in range(cfg.n_unknown_configs):
        cid = UNKNOWN_BASE + j
        pixels, labels = draw_digits(cfg, "test", cfg.unknown_per_config, j)
        test_parts.append(make_records(model, cid, config_theta(cfg, cid), pixels, labels))
    known = tuple(range(cfg.n_known_test_configs))
    return Split(DatasetContainer.concat(train_parts), DatasetContainer.concat(test_parts), known)


def training_steps(n_steps: int, schedule: str) -> np.ndarray:
    """Step indices used for training: five of every ten, or the first half."""
    steps = np.arange(n_steps)
    if schedule == "alternate":
        return steps[(steps // 5) % 2 == 0]
    if schedule == "first_half":
        return steps[: n_steps // 2]
    raise ValueError(f"unknown step schedule {schedule!r}")


def step_walk(cfg: RunConfig, model: fs.FiberModel) -> tuple[list[np.ndarray], float]:
    """Configurations visited by the weak-perturbation walk and its step size."""
    delta = cfg.step_delta
    if delta <= 0:
        delta = fs.calibrate_walk(model, max(1, cfg.n_steps // 2), 0.2, cfg.step_min_pcc, rng_for(cfg, "walk", 0))
    rng = rng_for(cfg, "walk", 1)
    conf = fs.Configuration(config_theta(cfg, 0).astype(np.float64))
    thetas = []
    for _ in range(cfg.n_steps):
        thetas.append(conf.theta.astype(np.float32))
        conf = fs.perturb_step(fs.Configuration(thetas[-1].astype(np.float64)), rng, delta)
    return thetas, delta


def step_split(cfg: RunConfig, model: fs.FiberModel) -> Split:
    """Weak-perturbation steps (E3); config id equals the step index.

    Every step shares one fixed test digit set.
    """
    thetas, delta = step_walk(cfg, model)
    trained = training_steps(cfg.n_steps, cfg.step_schedule)
    test_pixels, test_labels = draw_digits(cfg, "test", cfg.test_per_step, 0)
    train_parts, test_parts = [], []
    for s in trained:
        pixels, labels = draw_digits(cfg, "train", cfg.train_per_step, int(s))
        train_parts.append(make_records(model, int(s), thetas[s], pixels, labels))
    for s in range(cfg.n_steps):
        test_parts.append(make_records(model, s, thetas[s], test_pixels, test_labels))
    meta = {"step_delta": delta, "step_schedule": cfg.step_schedule}
    return Split(DatasetContainer.concat(train_parts), DatasetContainer.concat(test_parts),
                 tuple(int(s) for s in trained), meta)


def generate(cfg: RunConfig, model: fs.FiberModel) -> Split:
    if cfg.preset == "E3":
        return step_split(cfg, model)
    if cfg.preset in ("E1", "E2", "E5"):
        return standard_split(cfg, model)
    raise ValueError(f"preset {cfg.preset} has no training data; it reuses an E1 model or only samples speckle")


# -------------------------------------------------------------------- training


def validation_subset(split: Split) -> DatasetContainer:
    known = np.flatnonzero(np.isin(split.test.config_ids, split.known_ids))
    return split.test.subset(known[:VAL_RECORDS])


def fit(cfg: RunConfig, split: Split, on_epoch=None) -> tuple[UNet, Classifier, list]:
    """Train the reconstruction U-Net and the digit classifier for one split."""
    unet = UNet(cfg.channel_plan, cfg.head, rng=rng_for(cfg, "init"))
    val = validation_subset(split)
    unet, history = train(unet, split.train, cfg.epochs, cfg.batch_size, rng_for(cfg, "shuffle"), cfg.base_lr,
                          val=val if len(val) else None, on_epoch=on_epoch)
    clf = fit_classifier(cfg, split.train)
    return unet, clf, history


def fit_classifier(cfg: RunConfig, train_set: DatasetContainer) -> Classifier:
    """Classifier trained on the ground-truth targets at reconstruction size."""
    shape = train_set.speckle_raw.shape[1:]
    targets = train_set.target_images(shape).astype(np.float32)
    return classifier_train(targets, train_set.labels, cfg.classifier_epochs, rng_for(cfg, "classifier"))


def score(unet: UNet, clf, split: Split) -> dict[str, EvalReport]:
    return evaluate(unet, clf, split.test, split.known_ids)


# -------------------------------------------------------------------- analyses


def per_config_jaccard(unet: UNet, dataset: DatasetContainer) -> tuple[np.ndarray, np.ndarray]:
    """Mean JI per configuration id, ids ascending."""
    pred = reconstruct_binary(unet, dataset)
    ji = jaccard_batch(pred, dataset.target_images(pred.shape[1:]))
    ids = np.unique(dataset.config_ids)
    return ids, np.array([ji[dataset.config_ids == i].mean() for i in ids])


def step_distance_trend(unet: UNet, split: Split) -> dict:
    """JI against step distance from the training block for held-out steps."""
    ids, ji = per_config_jaccard(unet, split.test)
    trained = np.asarray(split.known_ids)
    held = ~np.isin(ids, trained)
    dist = np.array([np.abs(trained - i).min() for i in ids[held]])
    rho = spearmanr(dist, ji[held]).statistic if held.sum() > 1 else float("nan")
    return {
        "known_jaccard": float(ji[~held].mean()),
        "unknown_jaccard": float(ji[held].mean()) if held.any() else float("nan"),
        "spearman": float(rho),
        "steps": ids[held],
        "distance": dist,
        "jaccard": ji[held],
    }


def degradation_curve(cfg: RunConfig, model: fs.FiberModel, unet: UNet) -> list[analysis.CurvePoint]:
    """E4: walk away from the E1 training configuration (id 0)."""
    base = fs.Configuration(config_theta(cfg, 0).astype(np.float64))
    pixels, _ = draw_digits(cfg, "test", cfg.curve_test, 0)
    return analysis.ji_vs_pcc_curve(model, unet, base, pixels, cfg.curve_points, rng_for(cfg, "curve"),
                                    max_steps=cfg.curve_max_steps)


def curve_spearman(points) -> float:
    return float(spearmanr([p.pcc for p in points], [p.jaccard for p in points]).statistic)


def correlation_stats(cfg: RunConfig, model: fs.FiberModel) -> analysis.CorrelationStudy:
    return analysis.correlation_study(model, cfg.stats_configs, cfg.stats_inputs, rng_for(cfg, "stats"))


def macro_comparison(cfg: RunConfig, model: fs.FiberModel) -> dict[str, analysis.CorrelationStudy]:
    """E6: correlation statistics for actuator and macro-bend perturbations."""
    variant = fs.macro_bend_model(model, cfg.macro_bends, rng_for(cfg, "macro"), cfg.target_pcc, cfg.pcc_tol)
    return {
        "actuators": correlation_stats(cfg, model),
        "macro_bends": analysis.correlation_study(variant, cfg.stats_configs, cfg.stats_inputs,
                                                  rng_for(cfg, "stats")),
    }


def embedding(cfg: RunConfig, model: fs.FiberModel) -> analysis.Embedding2D:
    return analysis.speckle_embedding(model, cfg.embed_configs, cfg.embed_per_config, rng_for(cfg, "embed"),
                                      cfg.perplexity, cfg.tsne_iters)
