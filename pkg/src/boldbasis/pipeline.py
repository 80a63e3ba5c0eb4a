"""End-to-end orchestration: fit, contrast, connectivity, and report runs.

``fit_volume`` is the in-memory pipeline (basis fit, wavelet transform,
long-memory estimation, Gibbs, back-projection summaries); the ``run_*``
functions wrap it with archive I/O under an output directory. Every run
writes a ``manifest.json`` with the resolved configuration, so reports are
regenerable from the archives alone, and identical config + seed gives
byte-identical archives regardless of the worker count.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .basis import (CompositeBasis, fit_composite_basis, load_basis,
                    save_basis, scatter_to_volume)
from .connectivity import (induced_roi_covariance, rv_connectivity,
                           write_connectivity_csv, write_connectivity_long_csv,
                           write_edges_json)
from .design import DesignMatrix, build_design, read_events_csv
from .errors import ConfigError, IOFormatError, StageError
from .gibbs import (ModelSpec, PosteriorDraws, coefficient_summary,
                    contrast_draws, gibbs_fit, load_draws, save_draws,
                    transform_model)
from .simbas import (ContrastSpec, cluster_count_table, cluster_flags,
                     evaluate_fit, faces_vs_places_weights, simbas,
                     summarize_clusters)
from .volume import (Parcellation, Volume4D, load_parcellation, load_volume,
                     save_volume)
from .wavelets import LongMemoryParams, dwt, estimate_long_memory, make_plan

logger = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "FitResult",
    "fit_volume",
    "run_fit",
    "run_contrast",
    "run_connectivity",
    "read_config_file",
    "load_run_inputs",
]


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings of a fit run (defaults, config file, CLI merged)."""

    volume: str = ""
    parcellation: str = ""
    events: str = ""
    out: str = ""
    mode: str = "CHSB"
    a_local: float = 0.9
    a_global: float = 0.9
    center: bool = False
    min_roi_size: int = 125
    wavelet_family: str = "db4"
    wavelet_levels: int = 0          # 0 = default depth
    wavelet_boundary: str = "periodic"
    tr: float = 1.0
    derivative: bool = False
    k_v: float = 100.0
    a0: float = 0.01
    b0: float = 0.01
    iters: int = 6000
    burnin: int = 2000
    thin: int = 5
    seed: int = 0
    threads: int = 1
    alpha: float = 0.05
    contrast: str = ""               # preset name, or "" for none
    contrast_weights: tuple = ()     # explicit weights override the preset
    cluster_min_size: int = 1
    connectivity_threshold: float = 0.7
    truth: str = ""

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            k_v=self.k_v, a0=self.a0, b0=self.b0, n_iter=self.iters,
            burn_in=self.burnin, thin=self.thin, seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` config file (JSON-style values,
    ``#`` comments). Unknown keys are rejected against :class:`RunConfig`."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        val = val.strip()
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val.strip("\"'")
        out[key] = parsed
    return out


def make_run_config(*sources) -> RunConfig:
    """Merge dicts (later wins) into a validated RunConfig."""
    merged = {}
    for src in sources:
        for k, v in src.items():
            if v is not None:
                merged[k] = v
    known = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "contrast_weights" in merged and merged["contrast_weights"] is not None:
        merged["contrast_weights"] = tuple(float(w) for w in merged["contrast_weights"])
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad configuration: {exc}")
    if cfg.mode not in ("CHSB", "LSB", "GSB", "NSB"):
        raise ConfigError(f"unknown basis mode '{cfg.mode}'")
    if not 0 < cfg.alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    cfg.model_spec()  # validates the MCMC block
    return cfg


@dataclass
class FitResult:
    """In-memory products of one fit."""

    basis: CompositeBasis
    plan: object
    longmem: LongMemoryParams
    draws: PosteriorDraws
    coef_mean: np.ndarray      # (P, n_analyzed)
    coef_std: np.ndarray
    timings: dict = field(default_factory=dict)


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        timings[name] = time.perf_counter() - start
        raise StageError(name, exc) from exc
    timings[name] = time.perf_counter() - start


def fit_volume(
    vol: Volume4D,
    parc: Parcellation | None,
    design: DesignMatrix,
    cfg: RunConfig,
) -> FitResult:
    """Run basis fit, wavelet transform, long-memory estimation, Gibbs
    sampling, and back-projection summaries. Pure computation, no I/O."""
    timings = {}
    with _stage("initial_values", timings):
        basis = fit_composite_basis(
            vol, parc, mode=cfg.mode, a_local=cfg.a_local,
            a_global=cfg.a_global, center=cfg.center,
        )
        plan = make_plan(
            vol.n_time, family=cfg.wavelet_family,
            levels=cfg.wavelet_levels or None, boundary=cfg.wavelet_boundary,
        )
        ystar, xstar = transform_model(vol, basis, plan, design)
        longmem = estimate_long_memory(ystar, plan.coef_levels)
    with _stage("mcmc", timings):
        draws = gibbs_fit(
            ystar, xstar, longmem.alpha, cfg.model_spec(), plan,
            n_threads=cfg.threads,
        )
    with _stage("projection", timings):
        coef_mean, coef_std = coefficient_summary(draws, basis)
    return FitResult(
        basis=basis, plan=plan, longmem=longmem, draws=draws,
        coef_mean=coef_mean, coef_std=coef_std, timings=timings,
    )


def _design_from_config(cfg: RunConfig, n_time: int) -> DesignMatrix:
    sched = read_events_csv(cfg.events, tr=cfg.tr)
    return build_design(sched, n_time, include_derivative=cfg.derivative)


def _write_manifest(outdir: Path, cfg: RunConfig, extra: dict = None) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "package": "boldbasis",
        "version": __version__,
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )


def _map_volume(rows, basis: CompositeBasis) -> Volume4D:
    """Per-voxel map(s) as a volume archive: unanalyzed voxels 0, masked."""
    rows = np.atleast_2d(rows)
    mask = np.zeros(int(np.prod(basis.dims)), dtype=bool)
    mask[basis.voxel_index] = True
    return Volume4D(
        dims=basis.dims, values=scatter_to_volume(rows, basis, fill=0.0), mask=mask
    )


def run_fit(cfg: RunConfig) -> FitResult:
    """CLI fit entry: load inputs, fit, write archives + timings + manifest."""
    if not cfg.volume or not cfg.out:
        raise ConfigError("fit needs --volume and --out")
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    vol = load_volume(cfg.volume)
    parc = None
    if cfg.parcellation:
        parc = load_parcellation(cfg.parcellation, min_size=cfg.min_roi_size)
    if not cfg.events:
        raise ConfigError("fit needs an events CSV (--events)")
    design = _design_from_config(cfg, vol.n_time)

    result = fit_volume(vol, parc, design, cfg)
    save_basis(result.basis, outdir / "fit")
    save_draws(result.draws, outdir / "fit")
    save_volume(_map_volume(result.coef_mean, result.basis), outdir / "coef_mean")
    save_volume(_map_volume(result.coef_std, result.basis), outdir / "coef_std")
    _write_manifest(outdir, cfg, {"n_time": vol.n_time, "dims": list(vol.dims)})

    if cfg.contrast or cfg.contrast_weights:
        with _stage("simbas", result.timings):
            run_contrast(outdir, cfg=cfg, _preloaded=(result, design))
    (outdir / "timings.json").write_text(
        json.dumps({k: round(v, 6) for k, v in result.timings.items()}, indent=1)
        + "\n"
    )
    return result


def _resolve_contrast(cfg: RunConfig, n_columns: int) -> ContrastSpec:
    if cfg.contrast_weights:
        weights = np.asarray(cfg.contrast_weights, dtype=np.float64)
        if weights.size != n_columns:
            raise ConfigError(
                f"contrast needs {n_columns} weights, got {weights.size}"
            )
        return ContrastSpec(weights=weights, name="custom")
    if cfg.contrast == "faces-vs-places":
        return faces_vs_places_weights(n_columns)
    if cfg.contrast == "first-vs-second":
        weights = np.zeros(n_columns)
        weights[0] = 1.0
        weights[1 if n_columns > 1 else 0] = -1.0
        return ContrastSpec(weights=weights, name="first-vs-second")
    raise ConfigError(f"unknown contrast preset '{cfg.contrast}'")


def load_run_inputs(run_dir):
    """Load the archives of a previous fit run (manifest, basis, draws)."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise IOFormatError(f"not a run directory (no manifest.json): {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    cfg = make_run_config(manifest["config"])
    basis = load_basis(run_dir / "fit")
    draws = load_draws(run_dir / "fit")
    return manifest, cfg, basis, draws


def run_contrast(
    run_dir,
    cfg: RunConfig = None,
    alpha: float = None,
    _preloaded=None,
) -> dict:
    """Compute the contrast SimBas map and cluster report for a run.

    Writes contrast_{mean,std,psimbas,flags} volumes, clusters.json, and,
    when ground truth is configured, metrics.json. Returns the metrics or
    cluster summary dict.
    """
    run_dir = Path(run_dir)
    if _preloaded is not None:
        result, _ = _preloaded
        basis, draws = result.basis, result.draws
        if cfg is None:
            raise ConfigError("internal: preloaded contrast needs a config")
    else:
        _, stored_cfg, basis, draws = load_run_inputs(run_dir)
        if cfg is None:
            cfg = stored_cfg
    if alpha is not None:
        cfg = replace(cfg, alpha=alpha)
    spec = _resolve_contrast(cfg, draws.b_star.shape[1])

    sig = simbas(
        lambda: contrast_draws(draws, basis, spec.weights),
        alpha=cfg.alpha,
        dims=basis.dims,
        voxel_index=basis.voxel_index,
    )
    save_volume(_map_volume(sig.mean, basis), run_dir / "contrast_mean")
    save_volume(_map_volume(sig.std, basis), run_dir / "contrast_std")
    mask = np.zeros(int(np.prod(basis.dims)), dtype=bool)
    mask[basis.voxel_index] = True
    save_volume(
        Volume4D(
            dims=basis.dims,
            values=sig.scatter(sig.p_simbas, fill=1.0)[None, :],
            mask=mask,
        ),
        run_dir / "contrast_psimbas",
    )
    save_volume(
        _map_volume(sig.flagged.astype(np.float64), basis), run_dir / "contrast_flags"
    )
    labels, sizes = cluster_flags(
        sig.flag_volume(), min_size=cfg.cluster_min_size
    )
    clusters = {
        "alpha": cfg.alpha,
        "contrast": spec.name,
        "weights": spec.weights.tolist(),
        "mean_band_width": sig.mean_band_width,
        "n_flagged": int(np.count_nonzero(sig.flagged)),
        "table": cluster_count_table(sizes),
        "clusters": summarize_clusters(
            labels, sizes, stat=sig.scatter(sig.mean, fill=0.0).reshape(
                basis.dims, order="F"
            )
        ),
    }
    (run_dir / "clusters.json").write_text(
        json.dumps(clusters, sort_keys=True, indent=1) + "\n"
    )

    if cfg.truth:
        truth_dir = Path(cfg.truth)
        btrue = load_volume(truth_dir / "btrue")
        c_true = spec.weights @ btrue.values
        metrics = evaluate_fit(c_true, sig)
        (run_dir / "metrics.json").write_text(
            json.dumps(metrics, sort_keys=True, indent=1) + "\n"
        )
        return metrics
    return clusters


def run_connectivity(run_dir, threshold: float = None) -> dict:
    """Estimate the ROI connectivity matrix of a fitted run and write
    connectivity.csv, connectivity_long.csv, and edges.json."""
    run_dir = Path(run_dir)
    manifest, cfg, basis, draws = load_run_inputs(run_dir)
    if threshold is None:
        threshold = cfg.connectivity_threshold
    plan = make_plan(
        int(manifest["n_time"]), family=cfg.wavelet_family,
        levels=cfg.wavelet_levels or None, boundary=cfg.wavelet_boundary,
    )
    psi_mean = draws.psi.mean(axis=0)
    cov = induced_roi_covariance(psi_mean, draws.alpha, plan, basis)
    conn = rv_connectivity(cov)
    write_connectivity_csv(conn, run_dir / "connectivity.csv")
    write_connectivity_long_csv(conn, run_dir / "connectivity_long.csv")
    payload = write_edges_json(conn, threshold, run_dir / "edges.json")
    return payload
