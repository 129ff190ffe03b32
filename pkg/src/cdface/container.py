"""Directory container: a JSON manifest plus raw little-endian float32 arrays.

Layout::

    <dir>/manifest.json
    <dir>/<key>.f32        one file per array, key path dots kept verbatim

The manifest carries the dtype tag, shapes and a sha256 of every array file,
plus any free-form metadata the caller supplies.
"""

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

from cdface.errors import ContainerError

DTYPE_TAG = "f32-le"
FORMAT = "cdface-container/1"
MANIFEST = "manifest.json"

_SAFE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def write_container(path, arrays: dict, meta: dict = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for key in sorted(arrays):
        if not _SAFE.match(key):
            raise ContainerError(f"array key {key!r} is not a safe file name")
        arr = np.asarray(arrays[key], dtype="<f4")
        raw = arr.tobytes(order="C")
        (path / f"{key}.f32").write_bytes(raw)
        entries[key] = {"shape": list(arr.shape), "file": f"{key}.f32", "sha256": _digest(raw)}
    manifest = {"format": FORMAT, "dtype": DTYPE_TAG, "arrays": entries, "meta": meta or {}}
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ContainerError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("dtype") != DTYPE_TAG:
        raise ContainerError(f"{path}: dtype tag {manifest.get('dtype')!r} != {DTYPE_TAG!r}")
    return manifest


def read_container(path, keys=None, verify: bool = True):
    """Return (arrays, meta). Arrays come back as float32 numpy arrays."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for key, entry in manifest["arrays"].items():
        if keys is not None and key not in keys:
            continue
        try:
            raw = (path / entry["file"]).read_bytes()
        except FileNotFoundError as exc:
            raise ContainerError(f"{path}: missing array file {entry['file']}") from exc
        shape = tuple(entry["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(raw) != expected:
            raise ContainerError(f"{path}/{entry['file']}: {len(raw)} bytes, manifest shape {shape} needs {expected}")
        if verify and _digest(raw) != entry["sha256"]:
            raise ContainerError(f"{path}/{entry['file']}: checksum mismatch")
        arrays[key] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, manifest.get("meta", {})
