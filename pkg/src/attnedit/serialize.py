"""Parameter serialization: raw little-endian float blobs + JSON manifest.

A checkpoint directory holds params.bin (concatenated row-major tensor
data) and manifest.json listing name, dtype, shape, and byte offset per
tensor. Entries are sorted by name so rewriting the same parameters
yields byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _dtype_tag(dtype) -> str:
    if dtype == np.float32:
        return "f4"
    if dtype == np.float64:
        return "f8"
    raise ConfigError(f"unsupported parameter dtype {dtype}")


def save_params(params: dict, directory) -> None:
    """Write params (name -> Tensor or ndarray) under directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = getattr(params[name], "data", params[name])
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr.dtype)
        blob = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    with open(directory / "params.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    with open(directory / "manifest.json", "w") as fh:
        json.dump({"tensors": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_params(directory) -> dict:
    """Read a manifest/params.bin pair back into name -> ndarray."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    raw = (directory / "params.bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(
            raw, dtype=dt, count=n, offset=e["offset"]
        ).reshape(e["shape"])
        out[e["name"]] = arr.copy()
    return out
