"""Checkpoint persistence: flat little-endian arrays plus a JSON manifest.

A checkpoint is a pair of files sharing a base path: ``<base>.json`` holds
the manifest (format version, per-entry name/shape/dtype/offset/checksum,
parent config hash, free-form metadata) and ``<base>.bin`` holds the raw
array bytes back to back. Loading verifies every checksum before returning,
so a truncated or corrupted file never yields a partial result.
"""

import hashlib
import json

import numpy as np

FORMAT_VERSION = 1

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(base_path, arrays, config_hash="", meta=None):
    """Write ``arrays`` (name -> ndarray) to ``<base>.json`` + ``<base>.bin``."""
    base_path = str(base_path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPE_TAGS:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPE_TAGS[arr.dtype.name], copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "meta": meta or {},
        "entries": entries,
    }
    with open(base_path + ".bin", "wb") as f:
        for raw in blobs:
            f.write(raw)
    with open(base_path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_checkpoint(base_path):
    """Read and verify a checkpoint; returns (name -> ndarray, manifest)."""
    base_path = str(base_path)
    try:
        with open(base_path + ".json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint manifest {base_path}.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{base_path}: format version {manifest.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")
    try:
        with open(base_path + ".bin", "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint data {base_path}.bin")
    arrays = {}
    for entry in manifest["entries"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        raw = blob[lo:hi]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{base_path}: truncated data for entry {entry['name']!r}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{base_path}: checksum mismatch for entry {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPE_TAGS[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"])
    return arrays, manifest


def params_to_arrays(named_params):
    return {name: p.data.copy() for name, p in named_params}


def load_params(named_params, arrays):
    """Copy checkpoint arrays into existing parameter tensors, shape-checked."""
    for name, p in named_params:
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr
