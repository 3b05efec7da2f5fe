"""
Named-tensor archive.

Layout::

    CSAM1 <header bytes>\\n
    <JSON header: metadata + one entry per tensor (name, dtype, shape, offset, length)>
    <little-endian float32 payload>

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ArchiveError

MAGIC = "CSAM1"
DTYPE = "f32"
_WIRE = np.dtype("<f4")


def save_archive(path: str, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> str:
    """
    Write ``arrays`` (in name order) and ``metadata`` to ``path``.

    Args:
        path (str): Destination file; parent directories are created.
        arrays (dict[str, np.ndarray]): Tensors by parameter name.
        metadata (dict | None): JSON-serializable run metadata.

    Returns:
        str: The path written.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_WIRE)
        blob = data.tobytes()
        entries.append({"name": name, "dtype": DTYPE, "shape": list(data.shape), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata or {}, "tensors": entries}, indent=1, sort_keys=True).encode("utf-8")

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {len(header)}\n".encode("ascii"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_header(path: str) -> tuple[dict, int]:
    """Parse the header; returns it with the byte position where the payload starts."""
    with open(path, "rb") as fh:
        first = fh.readline()
        parts = first.decode("ascii", errors="replace").split()
        if len(parts) != 2 or parts[0] != MAGIC or not parts[1].isdigit():
            raise ArchiveError(f"{path} is not a tensor archive")
        size = int(parts[1])
        raw = fh.read(size)
    if len(raw) != size:
        raise ArchiveError(f"{path}: header truncated")
    try:
        header = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise ArchiveError(f"{path}: malformed header ({exc})") from exc
    return header, len(first) + size


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()

    arrays, end = {}, 0
    for entry in sorted(header.get("tensors", []), key=lambda e: e["offset"]):
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["dtype"] != DTYPE:
            raise ArchiveError(f"{name}: unsupported dtype {entry['dtype']}")
        if entry["offset"] < end:
            raise ArchiveError(f"{name}: overlaps the previous tensor")
        expected = int(np.prod(shape, dtype=np.int64)) * _WIRE.itemsize
        if entry["length"] != expected:
            raise ArchiveError(f"{name}: length {entry['length']} does not match shape {list(shape)}")
        end = entry["offset"] + entry["length"]
        if end > len(payload):
            raise ArchiveError(f"{name}: extends past the end of the payload")
        buf = payload[entry["offset"] : end]
        arrays[name] = np.frombuffer(buf, dtype=_WIRE).reshape(shape).astype(np.float32)
    return arrays, header.get("metadata", {})


def save_model(model, path: str, subset: str = "all", metadata: dict | None = None) -> str:
    """Archive every parameter (``subset='all'``) or only the tunable ones."""
    if subset not in ("all", "tunable"):
        raise ValueError(f"archive subset must be 'all' or 'tunable', got {subset!r}")
    arrays = {name: p.data for name, p in model.named_parameters() if subset == "all" or p.tunable}
    header = dict(metadata or {})
    header["subset"] = subset
    return save_archive(path, arrays, header)


def load_into_model(model, path: str) -> dict:
    """
    Overlay archived tensors onto ``model``; names missing from the archive are left untouched.

    Returns:
        dict: The archive metadata.
    """
    arrays, metadata = load_archive(path)
    params = model.parameter_dict()
    unknown = sorted(set(arrays) - set(params))
    if unknown:
        raise ArchiveError(f"archive names not in model: {', '.join(unknown)}")
    for name, arr in arrays.items():
        if arr.shape != params[name].shape:
            raise ArchiveError(f"{name}: archive shape {arr.shape} != model shape {params[name].shape}")
    for name, arr in arrays.items():
        params[name].data = arr.astype(params[name].dtype, copy=True)
    return metadata
