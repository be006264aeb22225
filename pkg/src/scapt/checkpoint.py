"""JSON parameter checkpoints (``scapt-ckpt-v1``).

Layout::

    {"format": "scapt-ckpt-v1",
     "meta": {...},                      # free-form: configs, vocab, step
     "params": {"name": {"shape": [..], "values": [..]}, ...}}

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT = "scapt-ckpt-v1"


class CheckpointError(ValueError):
    """Checkpoint is unreadable or incompatible with the requested model."""


def dump_params(params: dict[str, Tensor | np.ndarray]) -> dict:
    out = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        out[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    return out


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    path = Path(path)
    payload = {"format": FORMAT, "meta": meta or {}, "params": dump_params(params)}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: format {payload.get('format')!r}, expected {FORMAT!r}")
    params = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if int(np.prod(shape)) != arr.size:
            raise CheckpointError(f"{path}: parameter {name} has {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    return params, payload.get("meta", {})


def assign_params(target: dict[str, Tensor], source: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy arrays from ``source`` into matching tensors.  Returns names not found in ``source``."""
    missing = []
    for name, p in target.items():
        if name not in source:
            missing.append(name)
            continue
        arr = source[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    return missing
