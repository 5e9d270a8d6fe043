"""Versioned binary container for model parameters.

Layout::

    b"DCKPT\\0" | u16 version | u32 header length | JSON header | array bytes

The header holds a ``kind`` tag, free-form metadata, the array table
(name, dtype, shape, offset) and a sha256 content hash over the canonical
metadata plus every array's raw bytes. Nothing time-dependent is written, so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DCKPT\0"
VERSION = 1


class CheckpointError(Exception):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _content_hash(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    h.update(canonical_json({"kind": kind, "meta": meta}).encode())
    for name in sorted(arrays):
        a = arrays[name]
        h.update(canonical_json([name, a.dtype.str, list(a.shape)]).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        k: np.ascontiguousarray(v.detach().cpu().numpy())
        for k, v in module.state_dict().items()
    }


def arrays_to_state(arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}


def save(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a checkpoint and return its content hash."""
    arrays = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    digest = _content_hash(kind, meta, arrays)
    table = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = canonical_json({"kind": kind, "meta": meta, "arrays": table,
                             "content_hash": digest}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(header)))
        f.write(header)
        for name in sorted(arrays):
            f.write(arrays[name].tobytes())
    return digest


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray], str]:
    """Read and verify a checkpoint. Returns ``(meta, arrays, content_hash)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += struct.calcsize("<HI")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += hlen
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    arrays = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
    digest = _content_hash(header["kind"], header["meta"], arrays)
    if digest != header["content_hash"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    return header["meta"], arrays, digest
