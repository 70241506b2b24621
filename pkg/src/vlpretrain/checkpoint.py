"""Tensor bundles on disk: a JSON manifest plus one little-endian float64 blob.

``<stem>.json`` lists every tensor's name, shape, dtype and byte offset into
``<stem>.bin``.  Writes go to a temporary file first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

FORMAT = "vlpretrain-tensors/1"
_LE_F64 = np.dtype("<f8")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _paths(stem: Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(stem: Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``tensors`` (in mapping order) and return the manifest path."""
    manifest_path, blob_path = _paths(stem)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float64",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"format": FORMAT, "blob": blob_path.name, "sha256": hashlib.sha256(blob).hexdigest(),
                "tensors": entries, "meta": meta or {}}
    atomic_write_bytes(blob_path, blob)
    atomic_write_text(manifest_path, dump_json(manifest))
    return manifest_path


def load_tensors(stem: Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, _ = _paths(stem)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    try:
        blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor blob for {manifest_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{manifest_path}: blob checksum mismatch")
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float64":
            raise CheckpointError(f"tensor {e['name']}: unsupported dtype {e['dtype']}")
        arr = np.frombuffer(blob, dtype=_LE_F64, count=e["nbytes"] // 8, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})


def file_digest(stem: Path) -> str:
    """sha256 over manifest and blob bytes, for change detection."""
    h = hashlib.sha256()
    for p in _paths(stem):
        h.update(Path(p).read_bytes())
    return h.hexdigest()
