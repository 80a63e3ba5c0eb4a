"""Volumetric data model: 4D BOLD volumes, masks, ROI parcellations, file I/O.

Native on-disk format is a JSON sidecar header plus a raw little-endian
payload (float32 for volumes, int32 for parcellations), chosen so round
trips are bit-exact. Voxel linear order is fixed x-fastest:
``lin = x + X*(y + Y*z)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IOFormatError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "Volume4D",
    "Parcellation",
    "load_volume",
    "save_volume",
    "load_parcellation",
    "save_parcellation",
    "extract_roi",
    "roi_column_order",
    "xyz_to_linear",
    "linear_to_xyz",
]


def xyz_to_linear(x, y, z, dims):
    """Map grid coordinates to the canonical x-fastest linear index."""
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def linear_to_xyz(idx, dims):
    """Inverse of :func:`xyz_to_linear`; round-trips exactly."""
    nx, ny, _ = dims
    idx = np.asarray(idx)
    x = idx % nx
    y = (idx // nx) % ny
    z = idx // (nx * ny)
    return x, y, z


@dataclass(frozen=True)
class Volume4D:
    """A T x Nv matrix of BOLD intensities over an (X, Y, Z) grid.

    Parameters
    ----------
    dims : tuple of int
        Grid shape (X, Y, Z); Nv = X*Y*Z.
    values : ndarray, shape (T, Nv)
        One row per frame, one column per voxel in x-fastest order.
    mask : ndarray of bool, shape (Nv,), optional
        Voxels eligible for analysis. None means all voxels.
    """

    dims: tuple
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("values must be a 2D (T, Nv) array")
        nv = int(np.prod(self.dims))
        if values.shape[1] != nv:
            raise ValidationError(
                f"values has {values.shape[1]} columns, dims {self.dims} imply {nv}"
            )
        if not np.isfinite(values).all():
            raise ValidationError("volume contains NaN or Inf values")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "values", values)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if mask.size != nv:
                raise ValidationError("mask length does not match voxel count")
            object.__setattr__(self, "mask", mask)

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.values.shape[1]

    def frame(self, t: int) -> np.ndarray:
        """Return frame t as a 3D (X, Y, Z) grid view."""
        return self.values[t].reshape(self.dims, order="F")

    @staticmethod
    def from_frames(frames: np.ndarray, mask=None) -> "Volume4D":
        """Build from a (T, X, Y, Z) stack."""
        frames = np.asarray(frames, dtype=np.float64)
        t = frames.shape[0]
        dims = frames.shape[1:]
        flat = frames.reshape(t, -1, order="C") if frames.ndim == 2 else (
            frames.transpose(1, 2, 3, 0).reshape(-1, t, order="F").T
        )
        return Volume4D(dims=dims, values=flat, mask=mask)


@dataclass(frozen=True)
class Parcellation:
    """Integer ROI labels per voxel; 0 marks unassigned voxels.

    ``roi_ids`` lists the retained positive labels in ascending order;
    ``sizes[i]`` is the voxel count of ``roi_ids[i]``.
    """

    dims: tuple
    labels: np.ndarray
    roi_ids: np.ndarray = field(default=None)
    sizes: np.ndarray = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        nv = int(np.prod(self.dims))
        if labels.size != nv:
            raise ValidationError("labels length does not match voxel count")
        if labels.min(initial=0) < 0:
            raise ValidationError("labels must be non-negative")
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "roi_ids", ids.astype(np.int64))
        object.__setattr__(self, "sizes", counts.astype(np.int64))

    @classmethod
    def from_labels(cls, labels, dims, min_size: int = 125) -> "Parcellation":
        """Build a parcellation, dropping ROIs smaller than ``min_size``.

        Dropped voxels are relabelled 0 and reported as not analyzed.
        """
        labels = np.asarray(labels, dtype=np.int32).reshape(-1).copy()
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        small = ids[counts < min_size]
        if small.size:
            logger.warning(
                "dropping %d ROI(s) smaller than %d voxels: %s",
                small.size, min_size, small.tolist(),
            )
            labels[np.isin(labels, small)] = 0
        return cls(dims=dims, labels=labels)

    @property
    def n_rois(self) -> int:
        return len(self.roi_ids)

    def voxel_indices(self, k: int) -> np.ndarray:
        """Ascending linear indices of the voxels labelled ``k``."""
        if k not in self.roi_ids:
            raise KeyError(f"ROI id {k} not in parcellation")
        return np.flatnonzero(self.labels == k)


def extract_roi(vol: Volume4D, parc: Parcellation, k: int) -> np.ndarray:
    """Return the T x n_k submatrix of voxels labelled ``k``.

    Columns follow ascending linear-index order, so concatenating the
    extractions over all ROI ids reproduces the canonical ROI-reordered
    data matrix.
    """
    if vol.dims != parc.dims:
        raise ValidationError(
            f"volume dims {vol.dims} do not match parcellation dims {parc.dims}"
        )
    return vol.values[:, parc.voxel_indices(k)]


def roi_column_order(parc: Parcellation, mask=None) -> np.ndarray:
    """Linear voxel indices in ROI-concatenated order (ascending within ROI).

    If ``mask`` is given, voxels outside it are excluded with a warning when
    the mask and parcellation disagree.
    """
    labels = parc.labels
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        dropped = int(np.count_nonzero((labels > 0) & ~mask))
        if dropped:
            logger.warning(
                "mask excludes %d parcellated voxel(s); intersecting", dropped
            )
        labels = np.where(mask, labels, 0)
    parts = [np.flatnonzero(labels == k) for k in parc.roi_ids]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts).astype(np.int64)


# ---------------------------------------------------------------------------
# File I/O: <stem>.vol.json/.vol.raw and <stem>.parc.json/.parc.raw


def _strip_suffix(path, kind: str) -> Path:
    path = Path(path)
    name = path.name
    for suf in (f".{kind}.json", f".{kind}.raw"):
        if name.endswith(suf):
            return path.with_name(name[: -len(suf)])
    return path


def _mask_to_runs(mask: np.ndarray) -> list:
    """Run-length encode True runs as [start, length] pairs."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return [[int(idx[s]), int(idx[e] - idx[s] + 1)] for s, e in zip(starts, ends)]


def _runs_to_mask(runs, nv: int) -> np.ndarray:
    mask = np.zeros(nv, dtype=bool)
    for start, length in runs:
        mask[start : start + length] = True
    return mask


def _write_json(path: Path, header: dict) -> None:
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise IOFormatError(f"missing header file: {path}")
    except json.JSONDecodeError as exc:
        raise IOFormatError(f"malformed header {path}: {exc}")


def save_volume(vol: Volume4D, path) -> Path:
    """Write ``<stem>.vol.json`` + ``<stem>.vol.raw`` (little-endian float32)."""
    stem = _strip_suffix(path, "vol")
    header = {
        "dims": list(vol.dims),
        "n_time": vol.n_time,
        "dtype": "float32",
        "order": "x-fastest",
    }
    if vol.mask is not None:
        header["mask_runs"] = _mask_to_runs(vol.mask)
    _write_json(stem.with_name(stem.name + ".vol.json"), header)
    payload = np.ascontiguousarray(vol.values, dtype="<f4").tobytes()
    stem.with_name(stem.name + ".vol.raw").write_bytes(payload)
    return stem


def load_volume(path) -> Volume4D:
    """Read a volume archive; validates header/payload consistency."""
    stem = _strip_suffix(path, "vol")
    header = _read_json(stem.with_name(stem.name + ".vol.json"))
    for key in ("dims", "n_time", "dtype", "order"):
        if key not in header:
            raise IOFormatError(f"volume header missing field '{key}'")
    if header["dtype"] != "float32" or header["order"] != "x-fastest":
        raise IOFormatError(
            f"unsupported volume encoding {header['dtype']}/{header['order']}"
        )
    dims = tuple(int(d) for d in header["dims"])
    n_time = int(header["n_time"])
    nv = int(np.prod(dims))
    raw_path = stem.with_name(stem.name + ".vol.raw")
    try:
        raw = raw_path.read_bytes()
    except FileNotFoundError:
        raise IOFormatError(f"missing payload file: {raw_path}")
    expected = 4 * n_time * nv
    if len(raw) != expected:
        raise IOFormatError(
            f"payload size mismatch: {raw_path} has {len(raw)} bytes, "
            f"header implies {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(n_time, nv).astype(np.float64)
    mask = None
    if "mask_runs" in header:
        mask = _runs_to_mask(header["mask_runs"], nv)
    return Volume4D(dims=dims, values=values, mask=mask)


def save_parcellation(parc: Parcellation, path) -> Path:
    """Write ``<stem>.parc.json`` + ``<stem>.parc.raw`` (little-endian int32)."""
    stem = _strip_suffix(path, "parc")
    header = {
        "dims": list(parc.dims),
        "dtype": "int32",
        "order": "x-fastest",
    }
    _write_json(stem.with_name(stem.name + ".parc.json"), header)
    payload = np.ascontiguousarray(parc.labels, dtype="<i4").tobytes()
    stem.with_name(stem.name + ".parc.raw").write_bytes(payload)
    return stem


def load_parcellation(path, min_size: int = 1) -> Parcellation:
    """Read a parcellation archive.

    ``min_size`` defaults to 1 here: size filtering is a modelling choice
    applied by the caller, not by I/O.
    """
    stem = _strip_suffix(path, "parc")
    header = _read_json(stem.with_name(stem.name + ".parc.json"))
    for key in ("dims", "dtype", "order"):
        if key not in header:
            raise IOFormatError(f"parcellation header missing field '{key}'")
    if header["dtype"] != "int32" or header["order"] != "x-fastest":
        raise IOFormatError("unsupported parcellation encoding")
    dims = tuple(int(d) for d in header["dims"])
    nv = int(np.prod(dims))
    raw_path = stem.with_name(stem.name + ".parc.raw")
    try:
        raw = raw_path.read_bytes()
    except FileNotFoundError:
        raise IOFormatError(f"missing payload file: {raw_path}")
    if len(raw) != 4 * nv:
        raise IOFormatError(
            f"payload size mismatch: {raw_path} has {len(raw)} bytes, "
            f"header implies {4 * nv}"
        )
    labels = np.frombuffer(raw, dtype="<i4").astype(np.int32)
    return Parcellation.from_labels(labels, dims, min_size=min_size)
