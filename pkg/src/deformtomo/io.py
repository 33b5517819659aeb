"""Datasets on disk: raw little-endian float32 plus a JSON manifest.

A dataset ``name.json`` describes one array stored next to it in
``name.f32``. The manifest records the array kind, its dimensions (slowest
axis first), an optional scan geometry, free-form provenance and a hash of
the dimensions that flags hand-edited or swapped dims.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ScanGeometry

__all__ = [
    "FORMAT_VERSION",
    "DatasetError",
    "SizeMismatchError",
    "UnknownVersionError",
    "UnreadablePathError",
    "DimsHashWarning",
    "DatasetManifest",
    "save_dataset",
    "load_dataset",
    "atomic_write_bytes",
    "atomic_write_text",
    "array_checksum",
]

FORMAT_VERSION = "1.0"
DTYPE_TAG = "f32-le"
_LE_F32 = np.dtype("<f4")


class DatasetError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "dataset-error"


class SizeMismatchError(DatasetError):
    code = "size-mismatch"

    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")
        self.expected, self.actual = expected, actual


class UnknownVersionError(DatasetError):
    code = "unknown-version"


class UnreadablePathError(DatasetError):
    code = "unreadable-path"


class DimsHashWarning(UserWarning):
    pass


def _dims_hash(dims) -> str:
    text = "x".join(str(int(v)) for v in dims)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def array_checksum(a: np.ndarray) -> str:
    """SHA-256 of the array as stored on disk (little-endian float32, C order)."""
    return hashlib.sha256(np.ascontiguousarray(a, dtype=_LE_F32).tobytes()).hexdigest()


@dataclass
class DatasetManifest:
    kind: str  # "volume" | "stack" | "flow" | other
    dims: list
    file: str
    geometry: ScanGeometry | None = None
    provenance: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION
    dtype: str = DTYPE_TAG
    dims_hash: str = ""
    checksum: str = ""
    dims_valid: bool = True

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "dtype": self.dtype,
            "kind": self.kind,
            "dims": [int(v) for v in self.dims],
            "dims_hash": self.dims_hash or _dims_hash(self.dims),
            "file": self.file,
            "checksum": self.checksum,
            "geometry": None if self.geometry is None else self.geometry.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise UnknownVersionError(f"unsupported format_version {version!r}")
        if d.get("dtype") != DTYPE_TAG:
            raise UnknownVersionError(f"unsupported dtype {d.get('dtype')!r}")
        geometry = d.get("geometry")
        return cls(
            kind=d["kind"],
            dims=[int(v) for v in d["dims"]],
            file=d["file"],
            geometry=None if geometry is None else ScanGeometry.from_dict(geometry),
            provenance=d.get("provenance", {}),
            format_version=version,
            dtype=d["dtype"],
            dims_hash=d.get("dims_hash", ""),
            checksum=d.get("checksum", ""),
        )


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary sibling and rename, so readers never see partial files."""
    _atomic_write(Path(path), data)


def atomic_write_text(path, text: str):
    _atomic_write(Path(path), text.encode("utf-8"))


def _manifest_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def save_dataset(
    path,
    array: np.ndarray,
    kind: str,
    geometry: ScanGeometry | None = None,
    provenance: dict | None = None,
) -> DatasetManifest:
    """Write ``array`` as ``<path>.f32`` with manifest ``<path>.json``."""
    mpath = _manifest_path(path)
    bpath = mpath.with_suffix(".f32")
    data = np.ascontiguousarray(array, dtype=_LE_F32)
    manifest = DatasetManifest(
        kind=kind,
        dims=list(data.shape),
        file=bpath.name,
        geometry=geometry,
        provenance=dict(provenance or {}),
        checksum=array_checksum(data),
    )
    manifest.dims_hash = _dims_hash(manifest.dims)
    try:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(bpath, data.tobytes())
        _atomic_write(mpath, (json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    except OSError as exc:
        raise UnreadablePathError(f"cannot write {mpath}: {exc}") from exc
    return manifest


def load_dataset(path, strict: bool = False) -> tuple[np.ndarray, DatasetManifest]:
    """Read a dataset; returns ``(array, manifest)``.

    A dims-hash mismatch warns and sets ``manifest.dims_valid = False``
    (``strict=True`` raises :class:`SizeMismatchError` instead).
    """
    mpath = _manifest_path(path)
    try:
        text = mpath.read_text()
    except OSError as exc:
        raise UnreadablePathError(f"cannot read {mpath}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UnreadablePathError(f"{mpath} is not valid JSON: {exc}") from exc
    manifest = DatasetManifest.from_dict(raw)
    bpath = mpath.parent / manifest.file
    try:
        blob = bpath.read_bytes()
    except OSError as exc:
        raise UnreadablePathError(f"cannot read {bpath}: {exc}") from exc
    expected = int(np.prod(manifest.dims, dtype=np.int64)) * 4
    if len(blob) != expected:
        raise SizeMismatchError(bpath, expected, len(blob))
    if manifest.dims_hash and manifest.dims_hash != _dims_hash(manifest.dims):
        manifest.dims_valid = False
        message = f"{mpath}: dims {manifest.dims} do not match the stored dims hash"
        if strict:
            raise SizeMismatchError(bpath, expected, len(blob)) from ValueError(message)
        warnings.warn(message, DimsHashWarning, stacklevel=2)
    array = np.frombuffer(blob, dtype=_LE_F32).reshape(manifest.dims).astype(np.float32)
    return array, manifest
