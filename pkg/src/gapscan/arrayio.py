"""Deterministic on-disk bundles of named arrays.

A bundle is a directory holding ``manifest.json`` plus one raw binary file
per array.  Payloads are little-endian, C-order, with no header; the
manifest records dtype, shape, and a sha256 of the exact bytes, so loading
verifies integrity and a bundle written twice from the same arrays is
byte-identical file for file.  Datasets and training checkpoints share this
one format.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigurationError, DataError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"),
           "<i8": np.dtype("<i8")}


def _dtype_tag(a: np.ndarray) -> str:
    kind = np.dtype(a.dtype)
    if kind == np.float32:
        return "<f4"
    if kind == np.float64:
        return "<f8"
    if kind.kind in "iub":
        return "<i8"
    raise ConfigurationError(f"unsupported array dtype {a.dtype}")


def canonical_json(obj: Any) -> str:
    """Stable JSON text: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_bundle(path: str | Path, arrays: Mapping[str, np.ndarray], *,
                kind: str, meta: Mapping[str, Any] | None = None) -> None:
    """Write arrays and a canonical manifest under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries: dict[str, Any] = {}
    for name in sorted(arrays):
        if not _NAME_RE.match(name):
            raise ConfigurationError(f"array name {name!r} is not file-safe")
        tag = _dtype_tag(np.asarray(arrays[name]))
        # asarray with order="C" (not ascontiguousarray, which turns 0-d
        # scalars into 1-element vectors) so shapes round-trip exactly
        a = np.asarray(arrays[name], dtype=_DTYPES[tag], order="C")
        payload = a.tobytes()
        fname = f"{name}.bin"
        (root / fname).write_bytes(payload)
        entries[name] = {
            "file": fname,
            "dtype": tag,
            "shape": list(a.shape),
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": dict(meta or {}),
        "arrays": entries,
    }
    (root / MANIFEST_NAME).write_text(canonical_json(manifest))


def load_bundle(path: str | Path,
                expect_kind: str | None = None
                ) -> tuple[dict[str, np.ndarray], dict[str, Any], str]:
    """Read a bundle back as (arrays, meta, kind), verifying checksums."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest in {root}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported format_version {manifest.get('format_version')!r}")
    kind = manifest.get("kind", "")
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"bundle kind {kind!r}, expected {expect_kind!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest.get("arrays", {}).items():
        fpath = root / entry["file"]
        if not fpath.is_file():
            raise DataError(f"missing payload {entry['file']} in {root}")
        payload = fpath.read_bytes()
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"array {name}: unknown dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(payload) != expected:
            raise DataError(
                f"array {name}: payload is {len(payload)} bytes, "
                f"expected {expected}")
        if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
            raise DataError(f"array {name}: checksum mismatch")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return arrays, manifest.get("meta", {}), kind
