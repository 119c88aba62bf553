"""Checkpoint container: magic, u32 header length, JSON header, raw little-endian payload.

The header records the format version, the model config and its digest, and for
every parameter path its shape, dtype and byte offset into the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"EVGCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for key in sorted(params):
        arr = np.asarray(params[key])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"path": key, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": VERSION,
        "config": config,
        "config_digest": config_digest(config),
        "entries": entries,
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path, expected_digest: str | None = None):
    """Return ``(params, header)``; refuses files whose config digest differs from ``expected_digest``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError(f"{path}: stored config does not match its digest")
    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise CheckpointError(f"{path}: checkpoint was built for a different model config")
    payload = memoryview(blob)[12 + hlen:]
    params = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {e['path']!r}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        params[e["path"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return params, header
