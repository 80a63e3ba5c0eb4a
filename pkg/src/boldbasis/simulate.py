"""Synthetic 4D datasets with planted activation and ROI connectivity.

Generators reproduce the reference noise processes: a short-range field
built by averaging an AR(2)-in-time white field over the 7-point L1
stencil, and a long-range field adding three global temporal factors with
sinusoidal spatial loadings. The activation regime is

    Y_t(v) = baseline(v) + k0 * X_t B(v) + k1 * U_t(v) + k2 * E_t(v)

with U_t = e_t Lambda sharing one factor per ROI, e_t ~ N(0, Sigma_roi)
carrying the planted inter-ROI correlations, and E the long-range field.
The null regime is Y_t(v) = baseline(v) + E_t(v).

Everything is a pure function of (config, seed): reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import DesignMatrix, StimulusSchedule, build_design, write_events_csv
from .errors import ConfigError
from .volume import Parcellation, Volume4D, save_parcellation, save_volume

__all__ = [
    "SimConfig",
    "SimulatedDataset",
    "gen_short_range",
    "gen_long_range",
    "gen_activation_dataset",
    "gen_null_dataset",
    "voronoi_parcellation",
    "default_schedule",
    "default_b_true",
    "baseline_field",
]

AR_PHI1 = 0.9
AR_PHI2 = -0.8
AR_INNOVATION_VAR = 0.5
AR_BURN_IN = 200
FACTOR_VAR = 0.5
PARCELLATION_SEED = 20


@dataclass(frozen=True)
class SimConfig:
    """Settings of the synthetic study.

    ``planted`` lists (roi_a, roi_b, correlation) entries of Sigma_roi
    (unit diagonal elsewhere); ``kappas`` are the (signal, ROI-factor,
    noise) scale constants.
    """

    dims: tuple = (32, 32, 25)
    n_time: int = 100
    kappas: tuple = (1.0, 0.5, 2.2)
    noise: str = "long-range"
    temporal: str = "ar2"
    planted: tuple = ((1, 22, 0.7), (4, 5, 0.6), (2, 7, 0.8))
    n_rois: int = 33
    baseline_amplitude: float = 1.0
    noise_scale: float = 1.0
    tr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(k < 0 for k in self.kappas) or len(self.kappas) != 3:
            raise ConfigError("kappas must be three non-negative constants")
        if any(d <= 0 for d in self.dims):
            raise ConfigError("dims must be positive")
        if self.noise not in ("short-range", "long-range"):
            raise ConfigError("noise must be 'short-range' or 'long-range'")
        if self.temporal not in ("iid", "ar2"):
            raise ConfigError("temporal must be 'iid' or 'ar2'")
        for a, b, rho in self.planted:
            if not -1 < rho < 1:
                raise ConfigError(f"planted correlation {rho} must lie in (-1, 1)")
            if a == b:
                raise ConfigError("planted entries must be off-diagonal")


@dataclass(frozen=True)
class SimulatedDataset:
    """A generated volume plus everything needed to fit and score it."""

    volume: Volume4D
    parcellation: Parcellation
    schedule: StimulusSchedule
    design: DesignMatrix
    b_true: np.ndarray          # (P, Nv)
    sigma_roi: np.ndarray       # (K, K)
    baseline: np.ndarray        # (Nv,)
    config: SimConfig

    def truth_contrast(self, weights) -> np.ndarray:
        """Ground-truth contrast map sum_a d_a B_a over all voxels."""
        return np.asarray(weights, dtype=np.float64) @ self.b_true

    def save(self, outdir) -> None:
        """Write volume/parcellation archives, events CSV, and truth files."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_volume(self.volume, outdir / "data")
        save_parcellation(self.parcellation, outdir / "data")
        write_events_csv(self.schedule, outdir / "events.csv")
        truth_vol = Volume4D(dims=self.volume.dims, values=self.b_true)
        save_volume(truth_vol, outdir / "btrue")
        meta = {
            "dims": list(self.config.dims),
            "n_time": self.config.n_time,
            "tr": self.config.tr,
            "kappas": list(self.config.kappas),
            "planted": [list(p) for p in self.config.planted],
            "seed": self.config.seed,
            "sigma_roi": self.sigma_roi.tolist(),
            "n_coefficients": int(self.b_true.shape[0]),
        }
        (outdir / "truth.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n"
        )


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _stencil_average(frames: np.ndarray) -> np.ndarray:
    """Average over the in-bounds 7-point L1 stencil (center + 6 faces)."""
    total = frames.copy()
    count = np.ones(frames.shape[1:], dtype=np.float64)
    for axis in range(3):
        ax = axis + 1
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        total[tuple(lo)] += frames[tuple(hi)]
        total[tuple(hi)] += frames[tuple(lo)]
        cl = [slice(None)] * 3
        ch = [slice(None)] * 3
        cl[axis] = slice(None, -1)
        ch[axis] = slice(1, None)
        count[tuple(cl)] += 1
        count[tuple(ch)] += 1
    return total / count


def _white_field(dims, n_time, temporal, rng) -> np.ndarray:
    """Raw per-voxel series before spatial smoothing, shape (T, X, Y, Z).

    iid mode draws one standard-normal (T, Nv) block; ar2 mode draws a
    single (burn_in + T, Nv) block of innovations with variance 0.5 and
    runs the second-order recursion, discarding the burn-in.
    """
    nv = int(np.prod(dims))
    if temporal == "iid":
        flat = rng.standard_normal((n_time, nv))
    else:
        n_total = AR_BURN_IN + n_time
        eps = rng.standard_normal((n_total, nv)) * np.sqrt(AR_INNOVATION_VAR)
        series = np.empty_like(eps)
        series[0] = eps[0]
        series[1] = eps[1]
        for t in range(2, n_total):
            series[t] = AR_PHI1 * series[t - 1] + AR_PHI2 * series[t - 2] + eps[t]
        flat = series[AR_BURN_IN:]
    return flat.reshape((n_time,) + tuple(dims), order="F")


def gen_short_range(dims, n_time, temporal: str = "ar2", seed=0) -> Volume4D:
    """Short-range spatially correlated noise: stencil-averaged white field."""
    rng = np.random.default_rng(_seed_seq(seed))
    frames = _stencil_average(_white_field(dims, n_time, temporal, rng))
    return Volume4D.from_frames(frames)


def _sinusoid_loadings(dims) -> np.ndarray:
    """The three spatial loading grids (1-based voxel coordinates)."""
    x, y, z = np.meshgrid(
        np.arange(1, dims[0] + 1),
        np.arange(1, dims[1] + 1),
        np.arange(1, dims[2] + 1),
        indexing="ij",
    )
    return np.stack([
        2.0 * np.sin(np.pi * x / 10.0),
        2.0 * np.cos(np.pi * y / 10.0),
        2.0 * np.sin(np.pi * z / 5.0),
    ])


def gen_long_range(dims, n_time, seed=0, temporal: str = "ar2") -> Volume4D:
    """Long-range noise: three shared temporal factors with sinusoidal
    loadings added to a short-range field."""
    children = _seed_seq(seed).spawn(2)
    short = gen_short_range(dims, n_time, temporal=temporal, seed=children[0])
    rng = np.random.default_rng(children[1])
    factors = rng.standard_normal((n_time, 3)) * np.sqrt(FACTOR_VAR)
    loadings = _sinusoid_loadings(dims)
    frames = short.values.reshape((n_time,) + tuple(dims), order="F").copy()
    for k in range(3):
        frames += factors[:, k][:, None, None, None] * loadings[k][None]
    return Volume4D.from_frames(frames)


def voronoi_parcellation(
    dims,
    n_rois: int = 33,
    seed: int = PARCELLATION_SEED,
    lloyd_iters: int = 15,
    min_size: int = 125,
) -> Parcellation:
    """Deterministic Voronoi parcellation, relaxed by Lloyd iterations so
    every region clears ``min_size`` voxels."""
    rng = np.random.default_rng(seed)
    x, y, z = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    coords = np.column_stack(
        [x.reshape(-1, order="F"), y.reshape(-1, order="F"), z.reshape(-1, order="F")]
    ).astype(np.float64)
    sites = rng.uniform(low=0, high=np.asarray(dims, dtype=float), size=(n_rois, 3))
    labels = None
    for _ in range(lloyd_iters + 1):
        d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        for r in range(n_rois):
            sel = labels == r
            if np.any(sel):
                sites[r] = coords[sel].mean(axis=0)
    parc = Parcellation.from_labels(labels + 1, dims, min_size=min_size)
    if parc.n_rois != n_rois:
        raise ConfigError(
            f"Voronoi relaxation left {parc.n_rois} regions above {min_size} "
            f"voxels (wanted {n_rois}); adjust seed or region count"
        )
    return parc


def default_schedule(n_time: int = 100, tr: float = 1.0) -> StimulusSchedule:
    """Two-condition block design used by the synthetic studies."""
    span = n_time * tr
    events = []
    for onset in np.arange(10.0, span - 30.0, 40.0):
        events.append(("stim1", float(onset), 10.0))
        events.append(("stim2", float(onset + 20.0), 10.0))
    if not events:
        raise ConfigError("series too short for the default block design")
    return StimulusSchedule(
        conditions=("stim1", "stim2"), events=tuple(events), tr=tr
    )


def _ellipsoid_mask(dims, center, semiaxes) -> np.ndarray:
    x, y, z = np.meshgrid(
        np.arange(1, dims[0] + 1),
        np.arange(1, dims[1] + 1),
        np.arange(1, dims[2] + 1),
        indexing="ij",
    )
    val = (
        ((x - center[0]) / semiaxes[0]) ** 2
        + ((y - center[1]) / semiaxes[1]) ** 2
        + ((z - center[2]) / semiaxes[2]) ** 2
    )
    return (val <= 1.0).reshape(-1, order="F")


def default_b_true(dims, amplitude: float = 1.0) -> np.ndarray:
    """Two disjoint ellipsoidal active regions, one per stimulus."""
    scale = np.asarray(dims, dtype=float) / np.array([32.0, 32.0, 25.0])
    c1 = np.maximum(np.round(np.array([10, 10, 10]) * scale), 1)
    c2 = np.maximum(np.round(np.array([23, 23, 16]) * scale), 1)
    axes = np.maximum(np.round(np.array([5, 5, 4]) * scale), 1)
    b = np.zeros((2, int(np.prod(dims))))
    b[0, _ellipsoid_mask(dims, c1, axes)] = amplitude
    b[1, _ellipsoid_mask(dims, c2, axes)] = amplitude
    return b


def baseline_field(dims, amplitude: float) -> np.ndarray:
    """Smooth deterministic baseline: sum of three low-frequency cosines."""
    x, y, z = np.meshgrid(
        np.linspace(0.0, 1.0, dims[0]),
        np.linspace(0.0, 1.0, dims[1]),
        np.linspace(0.0, 1.0, dims[2]),
        indexing="ij",
    )
    grid = (
        np.cos(np.pi * (x + y)) + np.cos(np.pi * (y + 2 * z)) + np.cos(np.pi * x)
    ) * (amplitude / 3.0)
    return grid.reshape(-1, order="F")


def _sigma_roi(cfg: SimConfig) -> np.ndarray:
    sigma = np.eye(cfg.n_rois)
    for a, b, rho in cfg.planted:
        if not (1 <= a <= cfg.n_rois and 1 <= b <= cfg.n_rois):
            raise ConfigError(f"planted pair ({a}, {b}) outside 1..{cfg.n_rois}")
        sigma[a - 1, b - 1] = sigma[b - 1, a - 1] = rho
    w = np.linalg.eigvalsh(sigma)
    if w.min() < -1e-10:
        clipped = float(-w.min())
        raise ConfigError(
            "planted Sigma_roi is not positive semidefinite "
            f"(min eigenvalue {w.min():.3g}); the nearest PSD matrix clips "
            f"eigenvalues below 0 (shift of {clipped:.3g})"
        )
    return sigma


def _roi_factor_field(parc: Parcellation, sigma_roi: np.ndarray, n_time, rng):
    chol = np.linalg.cholesky(
        sigma_roi + 1e-12 * np.eye(sigma_roi.shape[0])
    )
    e = rng.standard_normal((n_time, sigma_roi.shape[0])) @ chol.T
    u = np.zeros((n_time, parc.labels.size))
    for pos, roi in enumerate(parc.roi_ids):
        u[:, parc.labels == roi] = e[:, pos][:, None]
    return u


def gen_activation_dataset(
    cfg: SimConfig,
    parc: Parcellation = None,
    b_true: np.ndarray = None,
    schedule: StimulusSchedule = None,
) -> SimulatedDataset:
    """Generate the activation-plus-connectivity regime with ground truth."""
    if parc is None:
        parc = voronoi_parcellation(cfg.dims, n_rois=cfg.n_rois)
    if schedule is None:
        schedule = default_schedule(cfg.n_time, cfg.tr)
    design = build_design(schedule, cfg.n_time)
    if b_true is None:
        b_true = default_b_true(cfg.dims)
    b_true = np.asarray(b_true, dtype=np.float64)
    if b_true.shape != (design.n_columns, int(np.prod(cfg.dims))):
        raise ConfigError("b_true shape must be (P, Nv)")
    sigma_roi = _sigma_roi(cfg)
    k0, k1, k2 = cfg.kappas

    children = _seed_seq(cfg.seed).spawn(2)
    noise_gen = gen_long_range if cfg.noise == "long-range" else gen_short_range
    noise = noise_gen(cfg.dims, cfg.n_time, seed=children[0], temporal=cfg.temporal)
    rng = np.random.default_rng(children[1])
    u = _roi_factor_field(parc, sigma_roi, cfg.n_time, rng)

    baseline = baseline_field(cfg.dims, cfg.baseline_amplitude)
    values = (
        baseline[None, :]
        + k0 * (design.values @ b_true)
        + k1 * u
        + k2 * noise.values
    )
    return SimulatedDataset(
        volume=Volume4D(dims=cfg.dims, values=values),
        parcellation=parc,
        schedule=schedule,
        design=design,
        b_true=b_true,
        sigma_roi=sigma_roi,
        baseline=baseline,
        config=cfg,
    )


def gen_null_dataset(cfg: SimConfig, parc: Parcellation = None,
                     schedule: StimulusSchedule = None) -> SimulatedDataset:
    """Generate the no-task regime: baseline plus noise, no stimulus term."""
    if parc is None:
        parc = voronoi_parcellation(cfg.dims, n_rois=cfg.n_rois)
    if schedule is None:
        schedule = default_schedule(cfg.n_time, cfg.tr)
    design = build_design(schedule, cfg.n_time)
    noise_gen = gen_long_range if cfg.noise == "long-range" else gen_short_range
    noise = noise_gen(
        cfg.dims, cfg.n_time, seed=_seed_seq(cfg.seed).spawn(1)[0],
        temporal=cfg.temporal,
    )
    baseline = baseline_field(cfg.dims, cfg.baseline_amplitude)
    values = baseline[None, :] + noise.values
    return SimulatedDataset(
        volume=Volume4D(dims=cfg.dims, values=values),
        parcellation=parc,
        schedule=schedule,
        design=design,
        b_true=np.zeros((design.n_columns, int(np.prod(cfg.dims)))),
        sigma_roi=_sigma_roi(cfg),
        baseline=baseline,
        config=cfg,
    )
