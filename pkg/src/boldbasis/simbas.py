"""Simultaneous credible bands, significance flagging, and cluster reports.

Joint bands over all analyzed voxels are built from the posterior draws of
a contrast map: with z_m the per-draw maximum absolute standardized
deviation over voxels, the 100(1-alpha)% joint band at voxel v is
mean(v) +/- q_{1-alpha}(z) * std(v), and the per-voxel score

    P(v) = (1/M) * #{m : |mean(v)/std(v)| <= z_m}

is the smallest alpha at which the band excludes zero. Scores are floored
at 1/M (the finest resolution M draws can support).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, NumericalError

__all__ = [
    "ContrastSpec",
    "SignificanceMap",
    "simbas",
    "cluster_flags",
    "summarize_clusters",
    "cluster_count_table",
    "evaluate_fit",
    "faces_vs_places_weights",
]


@dataclass(frozen=True)
class ContrastSpec:
    """Per-design-column weights d_a defining C = sum_a d_a B_a."""

    weights: np.ndarray
    name: str = "contrast"

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.size == 0 or not np.any(weights != 0):
            raise ConfigError("contrast needs at least one nonzero weight")
        object.__setattr__(self, "weights", weights)


def faces_vs_places_weights(n_columns: int = 16) -> ContrastSpec:
    """The Faces-versus-Places preset: (B3 + B11)/2 - (B5 + B13)/2,
    in 1-based design-column indexing over the canonical 16-column layout."""
    if n_columns < 13:
        raise ConfigError("faces-vs-places preset needs at least 13 design columns")
    w = np.zeros(n_columns)
    w[2] = 0.5
    w[10] = 0.5
    w[4] = -0.5
    w[12] = -0.5
    return ContrastSpec(weights=w, name="faces-vs-places")


@dataclass(frozen=True)
class SignificanceMap:
    """Joint-band summary per analyzed voxel.

    ``p_simbas`` is the per-voxel minimum level at which the joint band
    excludes zero; ``flagged`` is ``p_simbas <= alpha``; ``q_alpha`` the
    empirical max-z quantile defining the band at ``alpha``.
    """

    dims: tuple
    voxel_index: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    p_simbas: np.ndarray
    alpha: float
    q_alpha: float

    @property
    def flagged(self) -> np.ndarray:
        return self.p_simbas <= self.alpha

    @property
    def band_width(self) -> np.ndarray:
        """Per-voxel joint band width 2 * q_{1-alpha} * std."""
        return 2.0 * self.q_alpha * self.std

    @property
    def mean_band_width(self) -> float:
        return float(self.band_width.mean())

    def flag_volume(self) -> np.ndarray:
        """Flags as a 3D boolean grid (unanalyzed voxels False)."""
        nv = int(np.prod(self.dims))
        out = np.zeros(nv, dtype=bool)
        out[self.voxel_index] = self.flagged
        return out.reshape(self.dims, order="F")

    def scatter(self, field: np.ndarray, fill=np.nan) -> np.ndarray:
        """Place a per-analyzed-voxel field into a flat full-volume array."""
        nv = int(np.prod(self.dims))
        out = np.full(nv, fill, dtype=np.float64)
        out[self.voxel_index] = field
        return out


def _iter_chunks(source):
    if callable(source):
        yield from source()
    else:
        arr = np.asarray(source, dtype=np.float64)
        step = max(1, (1 << 20) // max(1, arr.shape[1]))
        for d0 in range(0, arr.shape[0], step):
            yield arr[d0 : d0 + step]


def ceiling_rank_quantile(z: np.ndarray, level: float) -> float:
    """Empirical quantile using the conservative ceiling rank."""
    z = np.sort(np.asarray(z, dtype=np.float64))
    rank = min(max(int(math.ceil(level * z.size)), 1), z.size)
    return float(z[rank - 1])


def simbas(
    source,
    alpha: float = 0.05,
    dims: tuple = None,
    voxel_index: np.ndarray = None,
) -> SignificanceMap:
    """Compute joint credible bands and per-voxel SimBas scores.

    Parameters
    ----------
    source : ndarray or callable
        Either the full (M, n_analyzed) contrast draw matrix, or a
        zero-argument callable returning a fresh iterator of draw chunks
        (called twice; the draws are streamed in two passes).
    alpha : float
        Flagging level.
    dims, voxel_index : optional
        Grid shape and analyzed voxel indices for volume scatter; default
        to a flat layout over the draw columns.

    Raises
    ------
    ConfigError
        Fewer than 100 draws.
    NumericalError
        Zero posterior standard deviation at an analyzed voxel.
    """
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    total = None
    count = 0
    acc = acc2 = None
    for block in _iter_chunks(source):
        if acc is None:
            acc = np.zeros(block.shape[1])
            acc2 = np.zeros(block.shape[1])
        acc += block.sum(axis=0)
        acc2 += (block ** 2).sum(axis=0)
        count += block.shape[0]
    if acc is None or count < 100:
        raise ConfigError(f"need at least 100 draws for joint bands, got {count}")
    total = count
    mean = acc / total
    var = np.maximum((acc2 - total * mean ** 2) / (total - 1), 0.0)
    std = np.sqrt(var)
    degenerate = np.flatnonzero(std == 0)
    if degenerate.size:
        raise NumericalError(
            f"zero posterior std at {degenerate.size} voxel(s), e.g. "
            f"{degenerate[:10].tolist()}"
        )

    ratio = np.abs(mean) / std
    z = np.empty(total)
    exceed = np.zeros(mean.size, dtype=np.int64)
    pos = 0
    for block in _iter_chunks(source):
        dev = np.abs(block - mean) / std
        zb = dev.max(axis=1)
        z[pos : pos + block.shape[0]] = zb
        exceed += (ratio[None, :] <= zb[:, None]).sum(axis=0)
        pos += block.shape[0]
    if pos != total:
        raise ConfigError("draw source yielded different lengths across passes")

    p = np.maximum(exceed, 1) / total
    q_alpha = ceiling_rank_quantile(z, 1.0 - alpha)
    if dims is None:
        dims = (mean.size, 1, 1)
    if voxel_index is None:
        voxel_index = np.arange(mean.size)
    return SignificanceMap(
        dims=tuple(dims),
        voxel_index=np.asarray(voxel_index),
        mean=mean,
        std=std,
        p_simbas=p,
        alpha=float(alpha),
        q_alpha=q_alpha,
    )


def cluster_flags(mask: np.ndarray, min_size: int = 1, connectivity: int = 6):
    """Label connected flagged components in 3D.

    Components are face-connected by default (``connectivity=6``; 26 uses
    corners too). Components smaller than ``min_size`` are dropped; labels
    are renumbered 1..n by descending size (ties by first occurrence).

    Returns (labels, sizes): a 3D int array and the per-label voxel counts
    (sizes[i] is the size of label i+1).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ConfigError("cluster_flags expects a 3D boolean grid")
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndimage.generate_binary_structure(3, 3)
    else:
        raise ConfigError("connectivity must be 6 or 26")
    raw, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros(mask.shape, dtype=np.int32), np.zeros(0, dtype=np.int64)
    counts = np.bincount(raw.ravel())[1:]
    keep = np.flatnonzero(counts >= min_size) + 1
    order = keep[np.argsort(-counts[keep - 1], kind="stable")]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, order.size + 1)
    labels = remap[raw]
    sizes = counts[order - 1].astype(np.int64)
    return labels, sizes


def summarize_clusters(labels: np.ndarray, sizes: np.ndarray, stat: np.ndarray = None) -> list:
    """Cluster records (label, size, bounding box, peak voxel) for reports.

    ``stat`` is an optional 3D map; the peak voxel maximizes |stat| within
    the cluster (first voxel in scan order otherwise).
    """
    out = []
    for lab in range(1, sizes.size + 1):
        where = np.argwhere(labels == lab)
        lo = where.min(axis=0)
        hi = where.max(axis=0)
        if stat is not None:
            vals = np.abs(stat[tuple(where.T)])
            peak = where[int(np.argmax(vals))]
        else:
            peak = where[0]
        out.append(
            {
                "label": int(lab),
                "size": int(sizes[lab - 1]),
                "bbox": [lo.tolist(), hi.tolist()],
                "peak": peak.tolist(),
            }
        )
    return out


def cluster_count_table(sizes: np.ndarray, thresholds=(125, 64, 27)) -> dict:
    """Counts and total voxels of clusters strictly larger than each threshold."""
    sizes = np.asarray(sizes)
    table = {}
    for thr in thresholds:
        big = sizes[sizes > thr]
        table[str(thr)] = {"clusters": int(big.size), "voxels": int(big.sum())}
    table["biggest"] = int(sizes.max()) if sizes.size else 0
    return table


def evaluate_fit(c_true: np.ndarray, sig: SignificanceMap) -> dict:
    """Score a contrast fit against ground truth over the analyzed voxels.

    Returns MSE of the posterior mean, false-positive rate (flagged among
    truly null), real-positive rate (flagged among truly active), and the
    mean joint band width.
    """
    c_true = np.asarray(c_true, dtype=np.float64).reshape(-1)
    truth = c_true[sig.voxel_index]
    active = truth != 0
    flagged = sig.flagged
    mse = float(np.mean((sig.mean - truth) ** 2))
    n_null = int(np.count_nonzero(~active))
    n_act = int(np.count_nonzero(active))
    fp = float(np.count_nonzero(flagged & ~active) / n_null) if n_null else 0.0
    rp = float(np.count_nonzero(flagged & active) / n_act) if n_act else float("nan")
    return {
        "mse": mse,
        "fp_rate": fp,
        "rp_rate": rp,
        "mean_band_width": sig.mean_band_width,
        "n_flagged": int(np.count_nonzero(flagged)),
        "n_active_true": n_act,
    }
