"""Versioned checkpoint container: named arrays plus a JSON metadata record."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Arrays keep their dtype (f64 or f32); ``meta`` must be JSON-serialisable."""
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    record = dict(meta, format_version=FORMAT_VERSION)
    blob = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **{_META_KEY: blob}, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as npz:
        if _META_KEY not in npz.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata record)")
        meta = json.loads(npz[_META_KEY].tobytes().decode())
        arrays = {k: npz[k] for k in npz.files if k != _META_KEY}
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return arrays, meta
