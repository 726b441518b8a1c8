"""Checkpoint container: named arrays plus JSON metadata in a single ``.npz``.

Arrays are stored uncompressed with their exact dtype and shape, so a save/load
round trip is bitwise. Keys are prefixed ``param/`` or ``buffer/``; the JSON
metadata (including ``format_version``) lives under ``__meta__``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    buffers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v.copy(), requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def _raw(value) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value)


def save_checkpoint(path, params: dict, buffers: dict | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": _raw(v) for k, v in params.items()}
    arrays.update({f"buffer/{k}": _raw(v) for k, v in (buffers or {}).items()})
    header = {"format_version": FORMAT_VERSION, **(meta or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise CheckpointError(f"{path} has no metadata record")
        meta = json.loads(data["__meta__"].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version {meta.get('format_version')}")
        params = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
        buffers = {k[len("buffer/") :]: data[k] for k in data.files if k.startswith("buffer/")}
    return Checkpoint(params, buffers, meta)
