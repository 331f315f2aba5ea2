"""Command line entry point: ``mmfspeckle <subcommand> [flags]``.

Each subcommand reads and writes files in the output directory::

    calibrate  -> fiber.manifest
    generate   -> train.mmfd, test.mmfd, dataset.manifest
    train      -> unet.mmfc, classifier.mmfc, history.csv, train.manifest
    evaluate   -> report.csv, grid_known.pgm, grid_unknown.pgm, grid_truth.pgm
    curve      -> curve.csv, curve.manifest
    stats      -> correlation_summary.csv, correlation_hist.csv, stats.manifest
    embed      -> embedding.csv, embedding.pgm, embed.manifest
    report     -> report.txt

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import fibersim as fs
from .analysis import curve_csv, knn_label_agreement
from .config import PRESETS, RESULTS_SECTION, ConfigError, RunConfig, build_config, config_items
from .dataio import FormatError, read_dataset, read_manifest, write_dataset, write_manifest
from .metrics import reports_to_csv
from .nn.checkpoint import load_model, save_model
from .nn.optim import NonFiniteGradient
from .nn.train import TrainingDiverged, history_csv
from .nn.unet import reconstruct_binary

log = logging.getLogger("mmfspeckle")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------- helpers


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary (P5) PGM of an 8-bit grayscale image."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(img))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise FormatError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def image_grid(images: np.ndarray, labels: np.ndarray, rows: int, pad: int = 1) -> np.ndarray:
    """``rows`` x 10 tiles; column d holds the first examples of digit d.

    Missing examples stay black. Binary tiles are scaled to 0/255.
    """
    images = np.asarray(images)
    h, w = images.shape[1:]
    grid = np.zeros((rows * (h + pad) + pad, 10 * (w + pad) + pad), dtype=np.uint8)
    scale = 255 if images.max(initial=0) <= 1 else 1
    for d in range(10):
        for r, i in enumerate(np.flatnonzero(labels == d)[:rows]):
            y, x = pad + r * (h + pad), pad + d * (w + pad)
            grid[y:y + h, x:x + w] = images[i] * scale
    return grid


def scatter_pgm(coords: np.ndarray, labels: np.ndarray, size: int = 256) -> np.ndarray:
    """Rasterize a 2-D embedding; each label gets its own gray level."""
    img = np.zeros((size, size), dtype=np.uint8)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    px = np.clip(((coords - lo) / span * (size - 3)).astype(int) + 1, 1, size - 2)
    uniq = np.unique(labels)
    levels = dict(zip(uniq.tolist(), np.linspace(80, 255, len(uniq)).astype(np.uint8)))
    for (x, y), lab in zip(px, labels):
        img[size - 1 - y - 1:size - 1 - y + 2, x - 1:x + 2] = levels[lab.item() if hasattr(lab, "item") else lab]
    return img


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} not found; run '{hint}' first")
    return path


def _write_csv(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _manifest(path: Path, cfg: RunConfig, results: dict) -> None:
    write_manifest(path, {"run": config_items(cfg), RESULTS_SECTION: results})
    log.info("wrote %s", path)


def load_fiber(cfg: RunConfig, out: Path) -> fs.FiberModel:
    """Fiber with the sigma from fiber.manifest, calibrating if absent."""
    model = fs.new_fiber(cfg.seed, cfg.n_modes, cfg.n_actuators, cfg.in_dims, cfg.out_dims)
    path = out / "fiber.manifest"
    if cfg.sigma > 0:
        model.sigma = cfg.sigma
    elif path.exists():
        model.sigma = float(read_manifest(path)[RESULTS_SECTION]["sigma"])
    else:
        log.info("no fiber.manifest; calibrating sigma")
        model, _ = ex.build_fiber(cfg)
    return model


def _split_from_disk(out: Path) -> ex.Split:
    train = read_dataset(_require(out / "train.mmfd", "generate"))
    test = read_dataset(_require(out / "test.mmfd", "generate"))
    meta = read_manifest(_require(out / "dataset.manifest", "generate"))[RESULTS_SECTION]
    known = tuple(int(v) for v in meta["known_ids"].split(",") if v)
    return ex.Split(train, test, known)


# --------------------------------------------------------------- subcommands


def cmd_calibrate(cfg: RunConfig, args) -> dict:
    model, _ = ex.build_fiber(cfg)
    mean, std = ex.remeasure_pcc(model, ex.rng_for(cfg, "calibrate", 1))
    results = {"sigma": model.sigma, "pcc_mean": mean, "pcc_std": std, "pcc_pairs": 50}
    _manifest(args.out / "fiber.manifest", cfg, results)
    print(f"sigma = {model.sigma!r}  measured PCC = {mean:.4f} +/- {std:.4f}")
    return results


def cmd_generate(cfg: RunConfig, args) -> dict:
    model = load_fiber(cfg, args.out)
    split = ex.generate(cfg, model)
    write_dataset(args.out / "train.mmfd", split.train)
    write_dataset(args.out / "test.mmfd", split.test)
    results = {
        "sigma": model.sigma,
        "train_records": len(split.train),
        "test_records": len(split.test),
        "train_configs": len(np.unique(split.train.config_ids)),
        "test_configs": len(np.unique(split.test.config_ids)),
        "known_ids": split.known_ids,
        "macro_families": "none (configurations drawn independently)",
        **split.meta,
    }
    _manifest(args.out / "dataset.manifest", cfg, results)
    print(f"{len(split.train)} training and {len(split.test)} test records")
    return results


def cmd_train(cfg: RunConfig, args) -> dict:
    split = _split_from_disk(args.out)
    unet, clf, history = ex.fit(cfg, split)
    save_model(args.out / "unet.mmfc", unet)
    save_model(args.out / "classifier.mmfc", clf)
    _write_csv(args.out / "history.csv", history_csv(history))
    results = {"epochs": len(history), "final_loss": history[-1].loss if history else float("nan"),
               "final_val_jaccard": history[-1].val_jaccard if history else float("nan"),
               "n_params": unet.n_params()}
    _manifest(args.out / "train.manifest", cfg, results)
    return results


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    split = _split_from_disk(args.out)
    unet = load_model(_require(args.out / "unet.mmfc", "train"))
    clf = load_model(args.out / "classifier.mmfc") if (args.out / "classifier.mmfc").exists() else None
    reports = ex.score(unet, clf, split)
    _write_csv(args.out / "report.csv", reports_to_csv([(cfg.preset, r) for r in reports.values()]))
    pred = reconstruct_binary(unet, split.test)
    known = np.isin(split.test.config_ids, split.known_ids)
    truth = split.test.target_images(pred.shape[1:])
    labels = split.test.labels
    write_pgm(args.out / "grid_truth.pgm", image_grid(truth, labels, args.rows))
    for name, sel in (("known", known), ("unknown", ~known)):
        if sel.any():
            write_pgm(args.out / f"grid_{name}.pgm", image_grid(pred[sel], labels[sel], args.rows))
    for name, r in reports.items():
        print(f"{name:8s} n={r.n_samples:5d}  accuracy={r.accuracy_mean:.4f}  jaccard={r.jaccard_mean:.4f}"
              f"  classification={r.classification_success:.4f}")
    return {name: r.jaccard_mean for name, r in reports.items()}


def cmd_curve(cfg: RunConfig, args) -> dict:
    model = load_fiber(cfg, args.out)
    unet = load_model(_require(Path(args.model) if args.model else args.out / "unet.mmfc", "train"))
    points = ex.degradation_curve(cfg, model, unet)
    _write_csv(args.out / "curve.csv", curve_csv(points))
    rho = ex.curve_spearman(points)
    _manifest(args.out / "curve.manifest", cfg, {"points": len(points), "spearman": rho})
    print(f"{len(points)} curve points, Spearman(PCC, JI) = {rho:.3f}")
    return {"spearman": rho}


def cmd_stats(cfg: RunConfig, args) -> dict:
    model = load_fiber(cfg, args.out)
    if cfg.preset == "E6":
        studies = ex.macro_comparison(cfg, model)
    else:
        studies = {"actuators": ex.correlation_stats(cfg, model)}
    summary, hist, results = [], [], {}
    for source, study in studies.items():
        s_lines = study.summary_csv().splitlines()
        h_lines = study.histogram_csv().splitlines()
        if not summary:
            summary.append("source," + s_lines[0])
            hist.append("source," + h_lines[0])
        summary += [f"{source},{line}" for line in s_lines[1:]]
        hist += [f"{source},{line}" for line in h_lines[1:]]
        results[f"{source}_sign_test_p"] = study.sign_test_p
        for fam in study.samples:
            results[f"{source}_{fam}_mean"] = study.mean(fam)
    _write_csv(args.out / "correlation_summary.csv", "\n".join(summary) + "\n")
    _write_csv(args.out / "correlation_hist.csv", "\n".join(hist) + "\n")
    _manifest(args.out / "stats.manifest", cfg, results)
    for key, value in results.items():
        print(f"{key} = {value:.4g}")
    return results


def cmd_embed(cfg: RunConfig, args) -> dict:
    model = load_fiber(cfg, args.out)
    emb = ex.embedding(cfg, model)
    _write_csv(args.out / "embedding.csv", emb.to_csv())
    write_pgm(args.out / "embedding.pgm", scatter_pgm(emb.coords, emb.config_ids))
    results = {
        "knn_config_agreement": knn_label_agreement(emb.coords, emb.config_ids, 5),
        "knn_digit_agreement": knn_label_agreement(emb.coords, emb.digit_labels, 5),
    }
    _manifest(args.out / "embed.manifest", cfg, results)
    print(f"k-NN agreement: configuration {results['knn_config_agreement']:.3f}, "
          f"digit {results['knn_digit_agreement']:.3f}")
    return results


def cmd_report(cfg: RunConfig, args) -> dict:
    lines = [f"run directory: {args.out}", ""]
    for name in ("fiber", "dataset", "train", "curve", "stats", "embed"):
        path = args.out / f"{name}.manifest"
        if path.exists():
            lines.append(f"[{name}]")
            lines += [f"  {k} = {v}" for k, v in read_manifest(path).get(RESULTS_SECTION, {}).items()]
            lines.append("")
    if (args.out / "report.csv").exists():
        lines.append("[evaluation]")
        lines += ["  " + line for line in (args.out / "report.csv").read_text(encoding="utf-8").splitlines()]
    if len(lines) == 2:
        raise DataError(f"nothing to report in {args.out}")
    text = "\n".join(lines) + "\n"
    (args.out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return {}


COMMANDS = {
    "calibrate": (cmd_calibrate, "calibrate sigma to the PCC target and record it"),
    "generate": (cmd_generate, "simulate the training and test speckle datasets"),
    "train": (cmd_train, "train the U-Net and the digit classifier"),
    "evaluate": (cmd_evaluate, "score known and unknown configurations"),
    "curve": (cmd_curve, "reconstruction JI against train-test PCC"),
    "stats": (cmd_stats, "speckle correlation statistics"),
    "embed": (cmd_embed, "t-SNE embedding of speckle patterns"),
    "report": (cmd_report, "collect results from a run directory"),
}


# ---------------------------------------------------------------------- main


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key = value config file")
    p.add_argument("--seed", type=lambda s: int(s, 0), default=argparse.SUPPRESS, help="64-bit run seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--preset", choices=PRESETS, default=argparse.SUPPRESS, help="experiment preset")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="mmfspeckle", description="Multimode-fiber speckle simulator and U-Net lab.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name == "evaluate":
            p.add_argument("--rows", type=_positive, default=4, help="grid rows per digit column")
        if name == "curve":
            p.add_argument("--model", default=None, help="U-Net checkpoint (default: <out>/unet.mmfc)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    func = COMMANDS[args.command][0]
    try:
        cfg = build_config(getattr(args, "preset", None), getattr(args, "config", None),
                           seed=getattr(args, "seed", None),
                           out=str(args.out) if hasattr(args, "out") else None)
        args.out = Path(cfg.out)
        args.out.mkdir(parents=True, exist_ok=True)
        func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (fs.CalibrationError, TrainingDiverged, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
