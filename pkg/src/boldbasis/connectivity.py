"""Background connectivity: induced covariance in the ROI feature space and
square-root-RV summaries between ROIs.

The fitted noise model assigns each basis series s a wavelet-domain
diagonal covariance psi_s * 2^(-alpha_s m). Rotating back to the time
domain gives a per-frame variance profile whose mode theta_s summarizes
the series' background variance; the global loadings then induce

    Sigma_ROI = Psi diag(theta) Psi'

over the stacked local components. The sqrt-RV coefficient between the
whitened blocks of two ROIs is the reported connectivity value.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import CompositeBasis
from .errors import ConfigError, NumericalError
from .wavelets import WaveletPlan, block_row_energy

logger = logging.getLogger(__name__)

__all__ = [
    "RoiCovariance",
    "ConnectivityMatrix",
    "induced_roi_covariance",
    "rv_connectivity",
    "select_strong_pairs",
    "write_connectivity_csv",
    "write_connectivity_long_csv",
    "write_edges_json",
]


@dataclass(frozen=True)
class RoiCovariance:
    """Symmetric covariance over the stacked local components.

    ``p_k[i]`` components belong to ``roi_ids[i]``; blocks follow that
    order. ``theta`` keeps the per-series variance summaries for
    diagnostics.
    """

    matrix: np.ndarray
    roi_ids: tuple
    p_k: tuple
    theta: np.ndarray = None

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ConfigError("covariance must be square")
        if mat.shape[0] != sum(self.p_k):
            raise ConfigError("covariance size does not match component counts")
        if np.abs(mat - mat.T).max(initial=0.0) > 1e-10 * max(
            1.0, np.abs(mat).max(initial=0.0)
        ):
            raise NumericalError("covariance is not symmetric")
        object.__setattr__(self, "matrix", (mat + mat.T) / 2.0)
        object.__setattr__(self, "roi_ids", tuple(int(k) for k in self.roi_ids))
        object.__setattr__(self, "p_k", tuple(int(p) for p in self.p_k))

    @property
    def block_slices(self) -> tuple:
        out = []
        start = 0
        for p in self.p_k:
            out.append(slice(start, start + p))
            start += p
        return tuple(out)


@dataclass(frozen=True)
class ConnectivityMatrix:
    """K x K symmetric matrix of sqrt-RV values in [0, 1], unit diagonal."""

    values: np.ndarray
    roi_ids: tuple

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.roi_ids),) * 2:
            raise ConfigError("connectivity shape does not match ROI ids")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "roi_ids", tuple(int(k) for k in self.roi_ids))

    def long_rows(self) -> list:
        """Upper-triangle (roi_a, roi_b, value) rows for heatmap-ready CSV."""
        out = []
        k = len(self.roi_ids)
        for i in range(k):
            for j in range(i + 1, k):
                out.append((self.roi_ids[i], self.roi_ids[j], float(self.values[i, j])))
        return out


def _profile_mode(profiles: np.ndarray, estimator: str = "mode") -> np.ndarray:
    """Mode (midpoint of the fullest Freedman-Diaconis bin) per row."""
    if estimator == "median":
        return np.median(profiles, axis=1)
    if estimator != "mode":
        raise ConfigError("theta estimator must be 'mode' or 'median'")
    out = np.empty(profiles.shape[0])
    for i, row in enumerate(profiles):
        if np.ptp(row) == 0:
            out[i] = row[0]
            continue
        counts, edges = np.histogram(row, bins="fd")
        j = int(np.argmax(counts))
        out[i] = 0.5 * (edges[j] + edges[j + 1])
    return out


def theta_profiles(
    psi: np.ndarray, alpha: np.ndarray, plan: WaveletPlan, energies: np.ndarray = None
) -> np.ndarray:
    """Per-frame induced variance profiles diag(W' Sigma_s W), shape (S, T).

    Computed as a per-level weighted sum of the transform's row energies,
    so the wavelet operator is never materialized.
    """
    if energies is None:
        energies = block_row_energy(plan)
    psi = np.atleast_1d(np.asarray(psi, dtype=np.float64))
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), psi.shape)
    m_eff = np.maximum(np.asarray(plan.block_levels), 1)
    level_w = np.exp2(-np.multiply.outer(alpha, m_eff))  # (S, n_blocks)
    return psi[:, None] * (level_w @ energies)


def induced_roi_covariance(
    psi: np.ndarray,
    alpha: np.ndarray,
    plan: WaveletPlan,
    basis: CompositeBasis,
    estimator: str = "mode",
    energies: np.ndarray = None,
) -> RoiCovariance:
    """Induced background covariance in the ROI component space.

    ``psi`` is the per-series posterior summary (typically the posterior
    mean). For a local-only basis there is no inter-ROI structure and the
    result is diagonal (logged as a warning).

    Raises
    ------
    ConfigError
        Basis mode has no ROI component structure (GSB/NSB).
    """
    if basis.mode not in ("CHSB", "LSB"):
        raise ConfigError(
            f"background connectivity needs ROI components, not mode {basis.mode}"
        )
    profiles = theta_profiles(psi, alpha, plan, energies)
    theta = _profile_mode(profiles, estimator)
    roi_ids = basis.local.roi_ids
    p_k = basis.local.p_k
    if basis.mode == "LSB":
        logger.warning(
            "local-only basis: induced ROI covariance is diagonal, "
            "no inter-ROI background connectivity"
        )
        mat = np.diag(theta)
    else:
        psi_mat = basis.global_.psi
        mat = (psi_mat * theta[None, :]) @ psi_mat.T
    return RoiCovariance(matrix=mat, roi_ids=roi_ids, p_k=p_k, theta=theta)


def _inv_sqrt(block: np.ndarray, roi: int, ridge: float, floor: float) -> np.ndarray:
    sym = (block + block.T) / 2.0
    w, u = np.linalg.eigh(sym)
    if w.min() <= 0:
        logger.info("ROI %s block not positive definite; adding ridge %.1e", roi, ridge)
        sym = sym + ridge * np.eye(sym.shape[0])
        w, u = np.linalg.eigh(sym)
        if w.min() < -ridge:
            raise NumericalError(f"ROI {roi} covariance block is not PSD after ridge")
    w = np.maximum(w, floor)
    return (u / np.sqrt(w)) @ u.T


def rv_connectivity(
    cov: RoiCovariance, ridge: float = 1e-8, floor: float = 1e-10
) -> ConnectivityMatrix:
    """sqrt-RV between every ROI pair of the covariance blocks.

    RV(j, k) = ||M||_F^2 / sqrt(p_j p_k) with
    M = (S_jj)^(-1/2) S_jk (S_kk)^(-1/2); the component counts in the
    denominator make the self-RV exactly one.
    """
    slices = cov.block_slices
    k = len(cov.roi_ids)
    inv_roots = [
        _inv_sqrt(cov.matrix[sl, sl], roi, ridge, floor)
        for sl, roi in zip(slices, cov.roi_ids)
    ]
    vals = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            cross = cov.matrix[slices[i], slices[j]]
            m = inv_roots[i] @ cross @ inv_roots[j]
            rv = float(np.sum(m * m)) / np.sqrt(cov.p_k[i] * cov.p_k[j])
            root = np.sqrt(max(rv, 0.0))
            if root > 1.0 + 1e-6:
                raise NumericalError(
                    f"sqrt-RV {root:.6f} for ROIs ({cov.roi_ids[i]}, "
                    f"{cov.roi_ids[j]}) exceeds 1; covariance is not PSD"
                )
            vals[i, j] = vals[j, i] = min(root, 1.0)
    return ConnectivityMatrix(values=vals, roi_ids=cov.roi_ids)


def select_strong_pairs(conn: ConnectivityMatrix, threshold: float):
    """ROIs with any off-diagonal value above ``threshold``, plus the edges.

    Returns (roi_ids ascending, edges), edges sorted by descending value
    then by id pair; only strictly-greater values qualify.
    """
    edges = [
        {"roi_a": a, "roi_b": b, "value": v}
        for a, b, v in conn.long_rows()
        if v > threshold
    ]
    edges.sort(key=lambda e: (-e["value"], e["roi_a"], e["roi_b"]))
    rois = sorted({e["roi_a"] for e in edges} | {e["roi_b"] for e in edges})
    return rois, edges


def write_connectivity_csv(conn: ConnectivityMatrix, path) -> None:
    """K x K matrix CSV with ROI ids as header and row labels."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi"] + [str(k) for k in conn.roi_ids])
        for rid, row in zip(conn.roi_ids, conn.values):
            writer.writerow([str(rid)] + [f"{v:.10g}" for v in row])


def write_connectivity_long_csv(conn: ConnectivityMatrix, path) -> None:
    """Heatmap-ready long format: roi_a, roi_b, value."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi_a", "roi_b", "value"])
        for a, b, v in conn.long_rows():
            writer.writerow([a, b, f"{v:.10g}"])


def write_edges_json(conn: ConnectivityMatrix, threshold: float, path) -> dict:
    """Edges above threshold as JSON; returns the written payload."""
    rois, edges = select_strong_pairs(conn, threshold)
    payload = {"threshold": threshold, "rois": rois, "edges": edges}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return payload
