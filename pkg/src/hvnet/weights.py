"""Weight archive: JSON manifest plus little-endian float32 blobs in one file.

Layout::

    b"HVNW" | u32 version | u64 manifest length | manifest JSON | data

The manifest lists ``{"name", "shape", "offset", "nbytes"}`` per parameter
(offsets relative to the start of the data section) and the config
fingerprint.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HVNW"
VERSION = 1


class ArchiveError(ValueError):
    pass


def quantize(store: dict) -> dict:
    """Round every parameter to float32 precision (kept as float64 arrays)."""
    return {k: np.asarray(v, dtype="<f4").astype(float) for k, v in store.items()}


def save_weights(path, store: dict, fingerprint: str) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(store):
        arr = np.ascontiguousarray(store[name], dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"format_version": VERSION, "fingerprint": fingerprint,
                           "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 16:
        raise ArchiveError(f"{path}: not a weight archive")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    manifest = json.loads(raw[16:16 + mlen])
    return manifest, raw[16 + mlen:]


def load_weights(path, expected_shapes: dict | None = None,
                 fingerprint: str | None = None) -> dict:
    """Load parameters as float64 arrays; checks fingerprint and declared shapes."""
    manifest, data = read_manifest(path)
    if fingerprint is not None and manifest["fingerprint"] != fingerprint:
        raise ArchiveError(
            f"{path}: config fingerprint {manifest['fingerprint']} does not match {fingerprint}")
    store = {}
    for e in manifest["params"]:
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ArchiveError(f"{path}: parameter {e['name']} is truncated")
        store[e["name"]] = np.frombuffer(chunk, dtype="<f4").astype(float).reshape(e["shape"])
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in store:
                raise ArchiveError(f"{path}: missing parameter {name}")
            if tuple(store[name].shape) != tuple(shape):
                raise ArchiveError(
                    f"{path}: parameter {name} has shape {store[name].shape}, expected {tuple(shape)}")
    return store
