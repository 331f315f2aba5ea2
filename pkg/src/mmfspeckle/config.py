"""Run configuration: defaults, experiment presets, and the config-file parser.

Config files are UTF-8 ``key = value`` lines with ``#`` comments and
optional ``[section]`` headers. Keys are flat; sections only group them, and
a key may appear under any section. Unknown keys are errors. The
``[results]`` section that run manifests carry is skipped, so a manifest can
be passed back as a config file to replay its run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

PRESETS = ("E1", "E2", "E3", "E4", "E5", "E6")
RESULTS_SECTION = "results"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1234
    preset: str = "E1"
    out: str = "runs/default"

    # fiber
    n_modes: int = 64
    n_actuators: int = 37
    in_width: int = 16
    in_height: int = 16
    out_width: int = 32
    out_height: int = 32
    sigma: float = 0.0  # 0 means "calibrate"
    target_pcc: float = 0.12
    pcc_tol: float = 0.02

    # digits
    mnist_dir: str = ""
    threshold: int = 128

    # dataset sizes
    n_train_configs: int = 1
    train_per_config: int = 4000
    test_per_config: int = 1000
    n_known_test_configs: int = 1
    n_unknown_configs: int = 1
    unknown_per_config: int = 1000

    # weak perturbations
    n_steps: int = 300
    step_min_pcc: float = 0.7
    step_delta: float = 0.0  # 0 means "calibrate"
    train_per_step: int = 40
    test_per_step: int = 20
    step_schedule: str = "alternate"  # alternate | first_half

    # network and training
    channels: str = "8,16,32,64"
    head: str = "sigmoid"
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 1e-3
    classifier_epochs: int = 6

    # analysis
    stats_configs: int = 24
    stats_inputs: int = 16
    embed_configs: int = 8
    embed_per_config: int = 100
    perplexity: float = 30.0
    tsne_iters: int = 1000
    curve_points: int = 10
    curve_max_steps: int = 1024
    curve_test: int = 500
    macro_bends: int = 6

    @property
    def in_dims(self) -> tuple[int, int]:
        return (self.in_width, self.in_height)

    @property
    def out_dims(self) -> tuple[int, int]:
        return (self.out_width, self.out_height)

    @property
    def channel_plan(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.channels.split(","))

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: {self.preset!r} is not one of {', '.join(PRESETS)}")
        counts = ("n_modes", "n_actuators", "in_width", "in_height", "out_width", "out_height",
                  "n_train_configs", "train_per_config", "test_per_config", "n_unknown_configs",
                  "unknown_per_config", "n_steps", "train_per_step", "test_per_step", "batch_size",
                  "stats_configs", "stats_inputs", "embed_configs", "embed_per_config", "curve_points",
                  "macro_bends")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if self.epochs < 0 or self.classifier_epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        if not 0 < self.target_pcc < 1:
            raise ConfigError("target_pcc: must lie strictly between 0 and 1")
        if self.head not in ("relu", "sigmoid"):
            raise ConfigError(f"head: {self.head!r} must be relu or sigmoid")
        if self.step_schedule not in ("alternate", "first_half"):
            raise ConfigError(f"step_schedule: {self.step_schedule!r} must be alternate or first_half")
        try:
            plan = self.channel_plan
        except ValueError as exc:
            raise ConfigError(f"channels: {self.channels!r} is not a comma-separated list of integers") from exc
        if len(plan) < 2 or min(plan) <= 0:
            raise ConfigError("channels: need at least two positive widths")
        scale = 1 << (len(plan) - 1)
        if self.out_width % scale or self.out_height % scale:
            raise ConfigError(f"out_width, out_height: must be divisible by {scale} for channels {self.channels}")
        if self.n_known_test_configs > self.n_train_configs:
            raise ConfigError("n_known_test_configs: cannot exceed n_train_configs")
        return self


# Desk-scale experiment presets. Values override RunConfig defaults.
PRESET_VALUES = {
    "E1": dict(n_train_configs=1, train_per_config=4000, test_per_config=1000, n_known_test_configs=1,
               n_unknown_configs=1, unknown_per_config=1000, epochs=20),
    "E2": dict(n_train_configs=8, train_per_config=1000, test_per_config=125, n_known_test_configs=8,
               n_unknown_configs=1, unknown_per_config=1000, epochs=12),
    "E3": dict(n_steps=300, train_per_step=40, test_per_step=20, epochs=10, step_schedule="alternate"),
    "E4": dict(curve_points=10, curve_max_steps=1024, curve_test=500),
    "E5": dict(n_train_configs=200, train_per_config=200, test_per_config=20, n_known_test_configs=50,
               n_unknown_configs=50, unknown_per_config=20, epochs=12),
    "E6": dict(macro_bends=6, stats_configs=24, stats_inputs=16),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind in ("int", int):
            return int(raw, 0)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    skipping = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            skipping = line[1:-1].strip() == RESULTS_SECTION
            continue
        if skipping:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key (line {lineno})")
        values[key] = _coerce(key, value.strip())
    return values


def build_config(preset: str | None = None, path=None, **overrides) -> RunConfig:
    """Defaults, then preset values, then config-file values, then overrides."""
    file_values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    preset = overrides.get("preset") or file_values.get("preset") or preset or RunConfig.preset
    if preset not in PRESETS:
        raise ConfigError(f"preset: {preset!r} is not one of {', '.join(PRESETS)}")
    values = dict(PRESET_VALUES[preset])
    values.update(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    values["preset"] = preset
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key")
    return replace(RunConfig(), **values).validate()


def config_items(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
