"""Portable checkpoint files.

Layout: one UTF-8 JSON manifest line terminated by ``\\n``, immediately followed
by a single payload of little-endian float64 values.  The manifest lists the
parameter blocks in payload order with their shapes and element offsets, so a
reader in any language can slice the blob without further conventions::

    {"format": "georecon-checkpoint", "version": 1, "dtype": "<f8",
     "blocks": [{"name": "embed", "shape": [101, 64], "offset": 0, "count": 6464}, ...],
     "meta": {...}}
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "georecon-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    blocks, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    manifest = {"format": FORMAT, "version": VERSION, "dtype": "<f8", "blocks": blocks,
                "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return head + b"\n" + b"".join(chunks)


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported version {manifest.get('version')}")
    body = raw[nl + 1:]
    if len(body) % 8:
        raise CheckpointError("payload is not a whole number of float64 values")
    payload = np.frombuffer(body, dtype="<f8")
    expected = sum(int(b["count"]) for b in manifest.get("blocks", []))
    if payload.size != expected:
        raise CheckpointError(f"payload holds {payload.size} values, manifest declares {expected}")
    params = {}
    for b in manifest["blocks"]:
        lo, n = b["offset"], b["count"]
        if lo + n > payload.size or n != int(np.prod(b["shape"], dtype=np.int64)):
            raise CheckpointError(f"block {b['name']!r} inconsistent with payload")
        params[b["name"]] = payload[lo:lo + n].astype(np.float64).reshape(b["shape"])
    return params, manifest.get("meta", {})


def save(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, meta))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
