"""Named-parameter checkpoints.

A checkpoint is a NumPy ``.npz`` archive. Each parameter is stored as
``param/<dotted.name>``; every entry is a ``.npy`` member, which carries its
own dtype and shape header. A ``__meta__`` entry holds a JSON document with
the format tag (``kgreport-checkpoint``), the format version, the model kind
and the configuration needed to rebuild the model before loading weights.

Parameters shared between modules appear once per name; loading writes the
same values into the same storage, so aliasing survives a round trip.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_TAG = "kgreport-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_params: dict, kind: str, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT_TAG, "version": FORMAT_VERSION, "kind": kind,
            "config": config or {}, "extra": extra or {}}
    arrays = {f"param/{name}": np.asarray(t.data) for name, t in named_params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, {name: array})``."""
    try:
        archive = np.load(Path(path), allow_pickle=False)
    except (ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(archive, np.lib.npyio.NpzFile):
        raise CheckpointError(f"{path}: not an npz archive")
    with archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path}: missing __meta__ entry")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != FORMAT_TAG:
            raise CheckpointError(f"{path}: not a {FORMAT_TAG} file")
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
        arrays = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
    return meta, arrays


def load_into(named_params: dict, arrays: dict, strict: bool = True) -> None:
    missing = set(named_params) - set(arrays)
    unexpected = set(arrays) - set(named_params)
    if strict and (missing or unexpected):
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)[:5]} "
                              f"unexpected={sorted(unexpected)[:5]}")
    for name, t in named_params.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data[...] = arr.astype(t.dtype)
