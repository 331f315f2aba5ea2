"""Coherent propagation through a multimode fiber bent by an actuator array.

The fiber is a chain of ``K`` segments. Segment ``k`` applies a bend unitary
``exp(i * sigma * theta_k * H_k)`` followed by a fixed diagonal propagation
phase ``D_k``; the transmission matrix is the ordered product with segment 1
acting first. Binary input images couple into the ``N`` modes through a fixed
complex matrix ``P`` and the output field is sampled on the camera grid by a
matrix ``Q`` with orthonormal columns, so total speckle energy equals the
coupled mode energy ``||P x||^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import exp_from_eigh, hermitian_exp, jacobi_eigh
from .metrics import pearson_rows

log = logging.getLogger(__name__)

SIGMA_MAX = 50.0
BISECTION_STEPS = 40
CALIBRATION_PAIRS = 64
CALIBRATION_PROBES = 32

__all__ = [
    "FiberModel",
    "Configuration",
    "TransmissionMatrix",
    "SpecklePattern",
    "CalibrationError",
    "new_fiber",
    "hermitian_exp",
    "assemble_tm",
    "partial_products",
    "propagate",
    "speckle_batch",
    "random_configuration",
    "perturb_step",
    "core_mask",
    "mean_config_pcc",
    "calibrate_sigma",
    "calibrate_step",
    "calibrate_walk",
    "walk_pcc",
    "macro_bend_model",
    "probe_digits",
]


class CalibrationError(RuntimeError):
    pass


@dataclass
class FiberModel:
    """Fixed per-fiber randomness. ``sigma`` is the only field changed after
    construction (by :func:`calibrate_sigma`)."""

    seed: int
    n_modes: int
    in_dims: tuple[int, int]
    out_dims: tuple[int, int]
    input_proj: np.ndarray  # (N, M_in) complex
    output_proj: np.ndarray  # (M_out, N) complex, orthonormal columns
    bend_generators: np.ndarray  # (K, N, N) Hermitian, unit spectral norm
    gen_eigvals: np.ndarray  # (K, N)
    gen_eigvecs: np.ndarray  # (K, N, N)
    seg_phases: np.ndarray  # (K, N) unit-modulus diagonals of D_k
    core_mask: np.ndarray  # (H_out, W_out) bool
    sigma: float = 1.0
    active: np.ndarray = field(default=None)  # (K,) bool, bends allowed to move

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.n_actuators, dtype=bool)

    @property
    def n_actuators(self) -> int:
        return self.bend_generators.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        w, h = self.out_dims
        return h, w

    @property
    def in_shape(self) -> tuple[int, int]:
        w, h = self.in_dims
        return h, w


@dataclass(frozen=True)
class Configuration:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1:
            raise ValueError("theta must be a vector")
        if np.any(theta < 0) or np.any(theta > 1):
            raise ValueError("theta components must lie in [0, 1]")
        object.__setattr__(self, "theta", theta)

    def __len__(self):
        return len(self.theta)


@dataclass(frozen=True)
class TransmissionMatrix:
    u: np.ndarray


@dataclass(frozen=True)
class SpecklePattern:
    intensity: np.ndarray
    core_mask: np.ndarray


def core_mask(out_dims: tuple[int, int]) -> np.ndarray:
    """Inscribed disk of diameter ``min(W, H)`` centred on the grid."""
    w, h = out_dims
    yy, xx = np.mgrid[0:h, 0:w]
    radius = min(w, h) / 2
    return (yy + 0.5 - h / 2) ** 2 + (xx + 0.5 - w / 2) ** 2 <= radius**2


def _complex_gaussian(rng, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def new_fiber(
    seed: int,
    n_modes: int = 64,
    n_actuators: int = 37,
    in_dims: tuple[int, int] = (16, 16),
    out_dims: tuple[int, int] = (32, 32),
) -> FiberModel:
    """Build a fiber model as a pure function of its arguments."""
    if n_modes < 2:
        raise ValueError("n_modes must be >= 2")
    if n_actuators < 1:
        raise ValueError("n_actuators must be >= 1")
    if min(*in_dims, *out_dims) < 4:
        raise ValueError("image dimensions must be at least 4x4")
    m_in = in_dims[0] * in_dims[1]
    m_out = out_dims[0] * out_dims[1]
    if n_modes > m_out:
        raise ValueError(
            f"n_modes={n_modes} exceeds the {m_out} output pixels; "
            "orthonormal output columns are impossible"
        )

    rng = np.random.default_rng(seed)
    p = _complex_gaussian(rng, (n_modes, m_in))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    q, _ = np.linalg.qr(_complex_gaussian(rng, (m_out, n_modes)))

    gens = np.empty((n_actuators, n_modes, n_modes), dtype=np.complex128)
    vals = np.empty((n_actuators, n_modes))
    vecs = np.empty_like(gens)
    for k in range(n_actuators):
        a = _complex_gaussian(rng, (n_modes, n_modes))
        h = (a + a.conj().T) / 2
        w, v = jacobi_eigh(h)
        norm = np.abs(w).max()
        gens[k] = h / norm
        vals[k] = w / norm
        vecs[k] = v
    phases = np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=(n_actuators, n_modes)))

    return FiberModel(
        seed=seed,
        n_modes=n_modes,
        in_dims=tuple(in_dims),
        out_dims=tuple(out_dims),
        input_proj=p,
        output_proj=q,
        bend_generators=gens,
        gen_eigvals=vals,
        gen_eigvecs=vecs,
        seg_phases=phases,
        core_mask=core_mask(out_dims),
    )


def _as_theta(model: FiberModel, config) -> np.ndarray:
    theta = config.theta if isinstance(config, Configuration) else np.asarray(config, dtype=float)
    if theta.shape != (model.n_actuators,):
        raise ValueError(
            f"configuration has {theta.shape[0] if theta.ndim else 0} components, "
            f"fiber has {model.n_actuators} actuators"
        )
    return theta


def _segment(model: FiberModel, k: int, theta_k: float, sigma: float) -> np.ndarray:
    bend = exp_from_eigh(model.gen_eigvals[k], model.gen_eigvecs[k], sigma * theta_k)
    return model.seg_phases[k][:, None] * bend


def partial_products(model: FiberModel, config, sigma: float | None = None) -> list[np.ndarray]:
    """Cumulative products; entry ``k`` covers segments ``1..k+1``."""
    theta = _as_theta(model, config) * model.active
    sigma = model.sigma if sigma is None else sigma
    u = np.eye(model.n_modes, dtype=np.complex128)
    out = []
    for k in range(model.n_actuators):
        u = _segment(model, k, theta[k], sigma) @ u
        out.append(u)
    return out


def assemble_tm(model: FiberModel, config, sigma: float | None = None) -> TransmissionMatrix:
    return TransmissionMatrix(partial_products(model, config, sigma)[-1])


def _flat_inputs(model: FiberModel, images) -> np.ndarray:
    x = np.asarray(images)
    if x.shape[-2:] != model.in_shape:
        raise ValueError(f"input image shape {x.shape[-2:]} does not match fiber input {model.in_shape}")
    return x.reshape(-1, model.in_shape[0] * model.in_shape[1]).astype(np.float64)


def speckle_batch(model: FiberModel, tm: TransmissionMatrix, images) -> np.ndarray:
    """Intensities ``|Q u P x|^2`` for a stack of images, shape (n, H_out, W_out)."""
    x = _flat_inputs(model, images)
    field_ = (model.output_proj @ (tm.u @ (model.input_proj @ x.T))).T
    return (np.abs(field_) ** 2).reshape((-1,) + model.out_shape)


def propagate(model: FiberModel, tm: TransmissionMatrix, image) -> SpecklePattern:
    pixels = getattr(image, "pixels", image)
    intensity = speckle_batch(model, tm, np.asarray(pixels)[None])[0]
    return SpecklePattern(intensity, model.core_mask)


def random_configuration(rng, n_actuators: int = 37) -> Configuration:
    return Configuration(rng.uniform(0.0, 1.0, size=n_actuators))


def perturb_step(config: Configuration, rng, delta: float) -> Configuration:
    """Nudge one uniformly chosen actuator by +/-delta, clamped to [0, 1]."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    theta = config.theta.copy()
    k = rng.integers(len(theta))
    sign = 1.0 if rng.integers(2) else -1.0
    theta[k] = min(1.0, max(0.0, theta[k] + sign * delta))
    return Configuration(theta)


def probe_digits(model: FiberModel, n: int = CALIBRATION_PROBES) -> np.ndarray:
    """Fixed binary probe images used for every PCC estimate of this fiber."""
    from .dataio import synth_digits

    rng = np.random.default_rng([model.seed, 0xCA1])
    return np.stack([d.pixels for d in synth_digits(rng, n, model.in_dims)])


def mean_config_pcc(
    model: FiberModel,
    pairs,
    probes: np.ndarray,
    sigma: float | None = None,
) -> tuple[float, float]:
    """Mean and std over configuration pairs of the core-masked speckle PCC
    for identical inputs."""
    mask = model.core_mask.ravel()
    per_pair = []
    for a, b in pairs:
        sa = speckle_batch(model, assemble_tm(model, a, sigma), probes).reshape(len(probes), -1)
        sb = speckle_batch(model, assemble_tm(model, b, sigma), probes).reshape(len(probes), -1)
        per_pair.append(pearson_rows(sa[:, mask], sb[:, mask]).mean())
    per_pair = np.asarray(per_pair)
    return float(per_pair.mean()), float(per_pair.std())


def _draw_pairs(model: FiberModel, rng, n_pairs: int):
    k = model.n_actuators
    return [(random_configuration(rng, k), random_configuration(rng, k)) for _ in range(n_pairs)]


def calibrate_sigma(
    model: FiberModel,
    target_pcc: float = 0.12,
    tol: float = 0.02,
    rng=None,
    n_pairs: int = CALIBRATION_PAIRS,
) -> float:
    """Bisect the coupling scale so the mean cross-configuration PCC hits the
    target, then store it on the model.

    Configuration pairs and probe inputs are drawn once, so the estimate is a
    deterministic function of sigma during the search.
    """
    if not 0.0 < target_pcc < 1.0:
        raise ValueError("target_pcc must lie strictly between 0 and 1")
    rng = np.random.default_rng([model.seed, 0x5161]) if rng is None else rng
    pairs = _draw_pairs(model, rng, max(n_pairs, 50))
    probes = probe_digits(model)

    lo, hi = 0.0, SIGMA_MAX
    if mean_config_pcc(model, pairs, probes, hi)[0] > target_pcc + tol:
        raise CalibrationError(f"PCC target {target_pcc} unreachable with sigma <= {SIGMA_MAX}")
    best = None
    for step in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        est = mean_config_pcc(model, pairs, probes, mid)[0]
        log.debug("bisection step %d: sigma=%.6f pcc=%.4f", step, mid, est)
        if best is None or abs(est - target_pcc) < abs(best[1] - target_pcc):
            best = (mid, est)
        if abs(est - target_pcc) <= tol / 10:
            break
        if est > target_pcc:
            lo = mid
        else:
            hi = mid
    sigma, est = best
    if abs(est - target_pcc) > tol:
        raise CalibrationError(f"bisection ended at PCC {est:.4f}, outside {target_pcc} +/- {tol}")
    model.sigma = sigma
    return sigma


def calibrate_step(
    model: FiberModel,
    min_pcc: float = 0.7,
    rng=None,
    n_steps: int = 40,
    delta_max: float = 0.5,
) -> float:
    """Largest step size (halving from ``delta_max``) whose adjacent-step PCC
    stays above ``min_pcc`` for every sampled step."""
    rng = np.random.default_rng([model.seed, 0x57E9]) if rng is None else rng
    probes = probe_digits(model, 8)
    start = random_configuration(rng, model.n_actuators)
    delta = delta_max
    for _ in range(20):
        step_rng = np.random.default_rng(rng.integers(2**63))
        cfg = start
        pairs = []
        for _ in range(n_steps):
            nxt = perturb_step(cfg, step_rng, delta)
            pairs.append((cfg, nxt))
            cfg = nxt
        worst = min(mean_config_pcc(model, [p], probes)[0] for p in pairs)
        if worst > min_pcc:
            return delta
        delta /= 2
    raise CalibrationError("no step size keeps adjacent configurations correlated")


def walk_pcc(model: FiberModel, starts, n_steps: int, delta: float, seeds, probes) -> float:
    """Mean same-input PCC between each start and the end of its walk."""
    pairs = []
    for start, seed in zip(starts, seeds):
        walk_rng = np.random.default_rng(seed)
        cfg = start
        for _ in range(n_steps):
            cfg = perturb_step(cfg, walk_rng, delta)
        pairs.append((start, cfg))
    return mean_config_pcc(model, pairs, probes)[0]


def calibrate_walk(
    model: FiberModel,
    n_steps: int,
    end_pcc: float,
    min_pcc: float = 0.7,
    rng=None,
    n_walks: int = 6,
    delta_max: float = 0.5,
) -> float:
    """Step size whose ``n_steps``-long walks end near ``end_pcc``.

    Bisects log(delta) with fixed walks and probes, then checks the weak-step
    floor: every adjacent step must keep PCC above ``min_pcc``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    rng = np.random.default_rng([model.seed, 0x3A1C]) if rng is None else rng
    probes = probe_digits(model, 8)
    starts = [random_configuration(rng, model.n_actuators) for _ in range(n_walks)]
    seeds = rng.integers(2**63, size=n_walks)
    lo, hi = np.log(1e-4), np.log(delta_max)
    if walk_pcc(model, starts, n_steps, delta_max, seeds, probes) > end_pcc:
        delta = delta_max
    else:
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            if walk_pcc(model, starts, n_steps, float(np.exp(mid)), seeds, probes) > end_pcc:
                lo = mid
            else:
                hi = mid
        delta = float(np.exp(hi))
    floor = calibrate_step(model, min_pcc, np.random.default_rng(rng.integers(2**63)), delta_max=delta)
    if floor < delta:
        log.warning("walk step %.4f violates the weak-step floor; using %.4f", delta, floor)
    return min(delta, floor)


def macro_bend_model(model: FiberModel, n_bends: int, rng, target_pcc: float = 0.12, tol: float = 0.02,
                     calibrate: bool = True) -> FiberModel:
    """Variant where only ``n_bends`` randomly chosen generators move.

    With ``calibrate`` the variant gets its own coupling scale hitting the same
    PCC target; otherwise it inherits the parent's sigma.
    """
    k = model.n_actuators
    if not 1 <= n_bends <= k:
        raise ValueError(f"n_bends must lie in [1, {k}]")
    active = np.zeros(k, dtype=bool)
    active[rng.choice(k, size=n_bends, replace=False)] = True
    variant = replace(model, active=active)
    if calibrate and n_bends < k:
        calibrate_sigma(variant, target_pcc, tol, np.random.default_rng(rng.integers(2**63)))
    return variant

