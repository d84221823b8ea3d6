"""Manifest + sidecar persistence.

A saved object is a JSON manifest (``<base>.json``) listing named arrays with
dtype and shape, plus a binary sidecar (``<base>.bin``) holding the raw
little-endian values in manifest order. Round trips are bit-exact.
"""

import json
import os

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _code_for(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iu":
        return "i8"
    if arr.dtype.kind == "b":
        return "b1"
    raise ValueError(f"unsupported dtype {arr.dtype}")


def save_bundle(base: str, kind: str, meta: dict, arrays) -> None:
    """Write ``arrays`` (iterable of (name, ndarray)) under ``base``."""
    entries = []
    blobs = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = _code_for(arr)
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes())
    manifest = {"v": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": entries}
    with open(base + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + ".bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_bundle(base: str, expect_kind: str = None):
    """Read a bundle back as (meta, {name: ndarray})."""
    path = base + ".json"
    if not os.path.exists(path) and os.path.exists(base) and base.endswith(".json"):
        path = base
        base = base[: -len(".json")]
    with open(path) as fh:
        manifest = json.load(fh)
    version = manifest.get("v")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version!r}, this build reads version {FORMAT_VERSION}")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise ValueError(f"{path}: bundle kind {manifest.get('kind')!r}, expected {expect_kind!r}")
    with open(base + ".bin", "rb") as fh:
        raw = fh.read()
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(
                f"{base}.bin: sidecar truncated, need {offset + nbytes} bytes but file has {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{base}.bin: sidecar has {len(raw) - offset} trailing bytes")
    return manifest["meta"], arrays
