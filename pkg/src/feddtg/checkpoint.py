"""Versioned checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive holding named float64
arrays plus one JSON metadata blob. The blob names the format and version so
that stale or foreign files are rejected with a clear message.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

FORMAT = "feddtg-checkpoint"
VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps({"format": FORMAT, "version": VERSION, **meta}, sort_keys=True).encode("utf-8")
    payload = {_META_KEY: np.frombuffer(blob, dtype=np.uint8)}
    for name, arr in arrays.items():
        if name == _META_KEY:
            raise CheckpointError(f"reserved array name {name!r}")
        payload[name] = np.asarray(arr)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if _META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing metadata block")
    try:
        meta = json.loads(arrays.pop(_META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r} (expected {VERSION})")
    return meta, arrays
