"""Checkpoint files: one JSON manifest line, then raw little-endian float64 data.

Manifest keys: ``format``, ``format_version``, ``config`` (ModelConfig fields),
``tensors`` (name, shape, byte offset into the data section), optional ``hooks``
(block, rank, dim, offset) and free-form ``meta``. Tensors are stored in the
manifest order, hooks after them.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..linalg import ProjectionBasis
from .model import BaseModel, HookedModel, ModelConfig, param_shapes

FORMAT = "mrplab-checkpoint"
FORMAT_VERSION = 1
_LE = np.dtype("<f8")


def checkpoint_bytes(model, meta: dict | None = None) -> bytes:
    hooked = model if isinstance(model, HookedModel) else HookedModel(model)
    base = hooked.base
    chunks, tensors, offset = [], [], 0
    for name in param_shapes(base.config):
        arr = np.ascontiguousarray(base.params[name], dtype=_LE)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    hooks = []
    for layer in sorted(hooked.hooks):
        rows = np.ascontiguousarray(hooked.hooks[layer].rows, dtype=_LE)
        hooks.append({"layer": layer, "rank": rows.shape[0], "dim": rows.shape[1], "offset": offset})
        chunks.append(rows.tobytes())
        offset += rows.nbytes
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config": asdict(base.config),
        "tensors": tensors,
        "hooks": hooks,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + b"".join(chunks)


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def load_checkpoint(path) -> tuple[HookedModel, dict]:
    """Return the stored model (hooks attached, possibly none) and its ``meta``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad manifest ({exc.msg})") from None
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint format")
    data = memoryview(raw)[nl + 1:]
    config = ModelConfig(**manifest["config"])

    def take(offset, shape):
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise ParseError(f"{path}: truncated data section")
        return np.frombuffer(data[offset:end], dtype=_LE).astype(np.float64).reshape(shape)

    params = {t["name"]: take(t["offset"], tuple(t["shape"])) for t in manifest["tensors"]}
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ParseError(f"{path}: tensor set does not match config")
    params = {name: params[name] for name in expected}
    hooks = {
        h["layer"]: ProjectionBasis(take(h["offset"], (h["rank"], h["dim"])))
        for h in manifest.get("hooks", [])
    }
    return HookedModel(BaseModel(config, params), hooks), manifest.get("meta", {})
