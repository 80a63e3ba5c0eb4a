"""Composite-hybrid spatial basis: per-ROI PCA composed with a second PCA
over the concatenated local scores, plus the single-level ablations.

Modes
-----
CHSB
    Two-level basis: block-diagonal local loadings followed by a global
    loading matrix fitted to the local score series.
LSB
    Local loadings only.
GSB
    One PCA fitted directly to all analyzed voxel columns.
NSB
    No spatial projection (identity on the analyzed voxels).

PCA is computed on the uncentered Gram matrix of the data (centering is
exposed as an option but off by default), with components ordered by
descending eigenvalue and truncated at the smallest count whose cumulative
eigenvalue fraction reaches the requested threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._archive import load_archive, save_archive
from .errors import ConfigError, IOFormatError, NumericalError
from .volume import Parcellation, Volume4D, roi_column_order

logger = logging.getLogger(__name__)

__all__ = [
    "LocalBasis",
    "GlobalBasis",
    "CompositeBasis",
    "fit_local_basis",
    "fit_global_basis",
    "fit_composite_basis",
    "project",
    "back_project",
    "scatter_to_volume",
    "save_basis",
    "load_basis",
]

MODES = ("CHSB", "LSB", "GSB", "NSB")


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Force the largest-magnitude loading of each component positive."""
    if components.size == 0:
        return components
    lead = np.abs(components).argmax(axis=0)
    signs = np.sign(components[lead, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def _truncation_count(eigvals: np.ndarray, threshold: float) -> int:
    """Smallest L with cumulative eigenvalue fraction >= threshold."""
    total = eigvals.sum()
    frac = np.cumsum(eigvals) / total
    return int(np.searchsorted(frac, threshold - 1e-12) + 1)


def pca_truncated(mat: np.ndarray, threshold: float, center: bool = False):
    """PCA of the columns of ``mat`` (T x D) truncated by explained variance.

    Returns (components (D, p), eigvals (p,), total_variance, rank), where
    eigvals are those of mat.T @ mat. Uses an economy SVD, switching to the
    T x T Gram problem when D >> T so the D x D matrix is never formed.
    """
    if not 0 < threshold <= 1:
        raise ConfigError("variance threshold must lie in (0, 1]")
    mat = np.asarray(mat, dtype=np.float64)
    t, d = mat.shape
    if center:
        mat = mat - mat.mean(axis=0, keepdims=True)
    if d > 4 * t:
        gram = mat @ mat.T
        w, u = np.linalg.eigh(gram)
        w = w[::-1]
        u = u[:, ::-1]
        s = np.sqrt(np.clip(w, 0.0, None))
        cutoff = s[0] * max(t, d) * np.finfo(np.float64).eps if s.size else 0.0
        rank = int(np.count_nonzero(s > cutoff))
        if rank == 0:
            raise NumericalError("matrix has rank 0 (all-zero data)")
        s = s[:rank]
        eig = s ** 2
        p = _truncation_count(eig, threshold)
        comps = (mat.T @ u[:, :p]) / s[:p]
    else:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        cutoff = s[0] * max(t, d) * np.finfo(np.float64).eps if s.size else 0.0
        rank = int(np.count_nonzero(s > cutoff))
        if rank == 0:
            raise NumericalError("matrix has rank 0 (all-zero data)")
        s = s[:rank]
        eig = s ** 2
        p = _truncation_count(eig, threshold)
        comps = vt[:p].T
    return _fix_signs(comps), eig[:p], float(eig.sum()), rank


@dataclass(frozen=True)
class LocalBasis:
    """Per-ROI orthonormal loading blocks with their retained eigenvalues."""

    roi_ids: tuple
    blocks: tuple          # ndarray (n_k, p_k) per ROI
    eigenvalues: tuple     # retained eigenvalues per ROI, descending
    totals: tuple          # total variance (sum of nonzero eigenvalues) per ROI
    threshold: float

    @property
    def p_k(self) -> tuple:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def n_components(self) -> int:
        return int(sum(self.p_k))

    @property
    def component_slices(self) -> tuple:
        out = []
        start = 0
        for p in self.p_k:
            out.append(slice(start, start + p))
            start += p
        return tuple(out)


@dataclass(frozen=True)
class GlobalBasis:
    """Second-level orthonormal loading matrix over stacked features."""

    psi: np.ndarray        # (D, S)
    eigenvalues: np.ndarray
    total: float
    threshold: float

    @property
    def n_components(self) -> int:
        return self.psi.shape[1]


@dataclass(frozen=True)
class CompositeBasis:
    """A fitted spatial basis plus the voxel bookkeeping to apply it.

    ``voxel_index`` holds the linear indices of the analyzed voxels in the
    canonical column order of the projected data (ROI-concatenated for
    CHSB/LSB, ascending for GSB/NSB).
    """

    mode: str
    dims: tuple
    voxel_index: np.ndarray
    local: LocalBasis | None = None
    global_: GlobalBasis | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown basis mode '{self.mode}'")

    @property
    def n_series(self) -> int:
        if self.mode == "CHSB" or self.mode == "GSB":
            return self.global_.n_components
        if self.mode == "LSB":
            return self.local.n_components
        return int(self.voxel_index.size)

    @property
    def n_analyzed(self) -> int:
        return int(self.voxel_index.size)

    def column_map(self) -> list:
        """(voxel linear index, roi id, within-ROI position) per column."""
        if self.local is None:
            return [(int(v), 0, i) for i, v in enumerate(self.voxel_index)]
        out = []
        pos = 0
        sizes = [b.shape[0] for b in self.local.blocks]
        for roi, n_k in zip(self.local.roi_ids, sizes):
            for j in range(n_k):
                out.append((int(self.voxel_index[pos]), int(roi), j))
                pos += 1
        return out


def fit_local_basis(
    vol: Volume4D, parc: Parcellation, a_local: float, center: bool = False
) -> LocalBasis:
    """Fit per-ROI PCA loadings at variance threshold ``a_local``."""
    blocks = []
    eigs = []
    totals = []
    for k in parc.roi_ids:
        idx = parc.voxel_indices(k)
        if vol.mask is not None:
            idx = idx[vol.mask[idx]]
        sub = vol.values[:, idx]
        try:
            comps, eig, total, _ = pca_truncated(sub, a_local, center=center)
        except NumericalError:
            raise NumericalError(f"ROI {k} has rank 0 (constant zero data)")
        blocks.append(comps)
        eigs.append(eig)
        totals.append(total)
    return LocalBasis(
        roi_ids=tuple(int(k) for k in parc.roi_ids),
        blocks=tuple(blocks),
        eigenvalues=tuple(eigs),
        totals=tuple(totals),
        threshold=float(a_local),
    )


def fit_global_basis(scores: np.ndarray, a_global: float, center: bool = False) -> GlobalBasis:
    """Fit the second-level PCA to the stacked local score series."""
    comps, eig, total, _ = pca_truncated(scores, a_global, center=center)
    return GlobalBasis(
        psi=comps, eigenvalues=eig, total=total, threshold=float(a_global)
    )


def _analyzed_index(vol: Volume4D, parc: Parcellation | None, mode: str) -> np.ndarray:
    if mode in ("CHSB", "LSB"):
        if parc is None:
            raise ConfigError(f"mode {mode} requires a parcellation")
        return roi_column_order(parc, vol.mask)
    if parc is not None and mode in ("GSB", "NSB"):
        logger.warning("mode %s ignores the parcellation", mode)
    if vol.mask is not None:
        return np.flatnonzero(vol.mask).astype(np.int64)
    return np.arange(vol.n_voxels, dtype=np.int64)


def fit_composite_basis(
    vol: Volume4D,
    parc: Parcellation | None,
    mode: str = "CHSB",
    a_local: float = 0.9,
    a_global: float = 0.9,
    center: bool = False,
) -> CompositeBasis:
    """Fit the spatial basis for the requested mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown basis mode '{mode}'")
    voxel_index = _analyzed_index(vol, parc, mode)
    if voxel_index.size == 0:
        raise ConfigError("no analyzed voxels (empty mask or parcellation)")
    local = None
    global_ = None
    if mode in ("CHSB", "LSB"):
        local = fit_local_basis(vol, parc, a_local, center=center)
        if mode == "CHSB":
            scores = _local_scores(vol.values[:, voxel_index], local)
            global_ = fit_global_basis(scores, a_global, center=center)
    elif mode == "GSB":
        global_ = fit_global_basis(vol.values[:, voxel_index], a_global, center=center)
    return CompositeBasis(
        mode=mode,
        dims=vol.dims,
        voxel_index=voxel_index,
        local=local,
        global_=global_,
    )


def _local_scores(tilde: np.ndarray, local: LocalBasis) -> np.ndarray:
    """Apply the block-diagonal local loadings: (.., n_analyzed) -> (.., sum p_k)."""
    out = np.empty(tilde.shape[:-1] + (local.n_components,))
    col = 0
    pos = 0
    for block in local.blocks:
        n_k, p = block.shape
        out[..., pos : pos + p] = tilde[..., col : col + n_k] @ block
        col += n_k
        pos += p
    return out


def _local_backproject(scores: np.ndarray, local: LocalBasis) -> np.ndarray:
    """Adjoint of :func:`_local_scores`: (.., sum p_k) -> (.., n_analyzed)."""
    n_analyzed = sum(b.shape[0] for b in local.blocks)
    out = np.empty(scores.shape[:-1] + (n_analyzed,))
    col = 0
    pos = 0
    for block in local.blocks:
        n_k, p = block.shape
        out[..., col : col + n_k] = scores[..., pos : pos + p] @ block.T
        col += n_k
        pos += p
    return out


def project(data, basis: CompositeBasis) -> np.ndarray:
    """Project data onto the basis: rows stay, columns become series.

    ``data`` is a :class:`Volume4D` or an array whose last axis runs over
    all Nv voxels; analyzed columns are selected internally.
    """
    values = data.values if isinstance(data, Volume4D) else np.asarray(data)
    tilde = values[..., basis.voxel_index]
    if basis.mode == "NSB":
        return tilde
    if basis.mode == "GSB":
        return tilde @ basis.global_.psi
    scores = _local_scores(tilde, basis.local)
    if basis.mode == "LSB":
        return scores
    return scores @ basis.global_.psi


def back_project(coeffs: np.ndarray, basis: CompositeBasis) -> np.ndarray:
    """Map basis-space rows back to analyzed-voxel columns.

    Returns an array over the analyzed voxels in ``basis.voxel_index``
    order; use :func:`scatter_to_volume` to place them into a full grid.
    """
    coeffs = np.asarray(coeffs)
    if basis.mode == "NSB":
        return coeffs
    if basis.mode == "GSB":
        return coeffs @ basis.global_.psi.T
    scores = coeffs @ basis.global_.psi.T if basis.mode == "CHSB" else coeffs
    return _local_backproject(scores, basis.local)


def scatter_to_volume(rows: np.ndarray, basis: CompositeBasis, fill: float = 0.0) -> np.ndarray:
    """Place analyzed-voxel columns into full-volume columns.

    Unanalyzed voxels receive ``fill`` (they are reported as not analyzed,
    not as zero signal, so NaN is a reasonable alternative fill).
    """
    rows = np.asarray(rows)
    nv = int(np.prod(basis.dims))
    out = np.full(rows.shape[:-1] + (nv,), fill, dtype=np.float64)
    out[..., basis.voxel_index] = rows
    return out


def save_basis(basis: CompositeBasis, stem) -> None:
    """Write ``<stem>.basis.json`` + ``<stem>.basis.raw``."""
    meta = {
        "mode": basis.mode,
        "dims": list(basis.dims),
        "n_series": basis.n_series,
    }
    arrays = {"voxel_index": basis.voxel_index.astype("<i8")}
    if basis.local is not None:
        meta["roi_ids"] = list(basis.local.roi_ids)
        meta["p_k"] = list(basis.local.p_k)
        meta["a_local"] = basis.local.threshold
        meta["local_totals"] = list(basis.local.totals)
        for roi, block, eig in zip(
            basis.local.roi_ids, basis.local.blocks, basis.local.eigenvalues
        ):
            arrays[f"phi_{roi}"] = block
            arrays[f"eig_{roi}"] = eig
    if basis.global_ is not None:
        meta["a_global"] = basis.global_.threshold
        meta["global_total"] = basis.global_.total
        arrays["psi"] = basis.global_.psi
        arrays["global_eig"] = basis.global_.eigenvalues
    save_archive(stem, "basis", meta, arrays)


def load_basis(stem) -> CompositeBasis:
    """Read a basis archive written by :func:`save_basis`."""
    meta, arrays = load_archive(stem, "basis")
    if "mode" not in meta or meta["mode"] not in MODES:
        raise IOFormatError("basis archive missing or invalid mode")
    local = None
    if "roi_ids" in meta:
        roi_ids = tuple(meta["roi_ids"])
        local = LocalBasis(
            roi_ids=roi_ids,
            blocks=tuple(arrays[f"phi_{k}"] for k in roi_ids),
            eigenvalues=tuple(arrays[f"eig_{k}"] for k in roi_ids),
            totals=tuple(meta["local_totals"]),
            threshold=meta["a_local"],
        )
    global_ = None
    if "psi" in arrays:
        global_ = GlobalBasis(
            psi=arrays["psi"],
            eigenvalues=arrays["global_eig"],
            total=meta["global_total"],
            threshold=meta["a_global"],
        )
    return CompositeBasis(
        mode=meta["mode"],
        dims=tuple(meta["dims"]),
        voxel_index=arrays["voxel_index"],
        local=local,
        global_=global_,
    )
