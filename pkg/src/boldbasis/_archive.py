"""Shared JSON-header + raw-payload container used by basis and draws
archives. All payloads are little-endian; round trips are bit-exact."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import IOFormatError

_DTYPES = {"<f8": "<f8", "<f4": "<f4", "<i8": "<i8", "<i4": "<i4"}


def save_archive(stem, suffix: str, meta: dict, arrays: dict) -> Path:
    """Write ``<stem>.<suffix>.json`` and ``<stem>.<suffix>.raw``.

    ``arrays`` maps segment names to ndarrays; segment order, dtype, and
    shape are recorded in the header so loading restores them exactly.
    """
    stem = Path(stem)
    segments = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            arr = arr.astype("<f8")
            code = "<f8"
        payload = arr.astype(code, copy=False).tobytes()
        segments.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(payload)
        offset += len(payload)
    header = {"meta": meta, "segments": segments, "payload_bytes": offset}
    stem.with_name(stem.name + f".{suffix}.json").write_text(
        json.dumps(header, sort_keys=True, indent=1) + "\n"
    )
    stem.with_name(stem.name + f".{suffix}.raw").write_bytes(b"".join(chunks))
    return stem


def load_archive(stem, suffix: str):
    """Read an archive written by :func:`save_archive`; returns (meta, arrays)."""
    stem = Path(stem)
    name = stem.name
    for suf in (f".{suffix}.json", f".{suffix}.raw"):
        if name.endswith(suf):
            stem = stem.with_name(name[: -len(suf)])
            break
    json_path = stem.with_name(stem.name + f".{suffix}.json")
    raw_path = stem.with_name(stem.name + f".{suffix}.raw")
    try:
        header = json.loads(json_path.read_text())
    except FileNotFoundError:
        raise IOFormatError(f"missing archive header: {json_path}")
    except json.JSONDecodeError as exc:
        raise IOFormatError(f"malformed archive header {json_path}: {exc}")
    try:
        raw = raw_path.read_bytes()
    except FileNotFoundError:
        raise IOFormatError(f"missing archive payload: {raw_path}")
    if len(raw) != header.get("payload_bytes"):
        raise IOFormatError(
            f"payload size mismatch: {raw_path} has {len(raw)} bytes, "
            f"header implies {header.get('payload_bytes')}"
        )
    arrays = {}
    for seg in header["segments"]:
        dtype = np.dtype(seg["dtype"])
        count = int(np.prod(seg["shape"])) if seg["shape"] else 1
        start = seg["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        arrays[seg["name"]] = arr.reshape(seg["shape"]).copy()
    return header["meta"], arrays
