"""ADUV volume files and JSON case manifests.

ADUV layout, all little-endian::

    magic "ADUV" | version u32 = 1 | dims 3*u32 (depth, height, width)
    spacing 3*f32 | origin 3*f32 | direction 9*f32 row-major
    dtype u8 = 1 (f32) | 3 reserved zero bytes | payload f32[depth*height*width], (z, y, x) order
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import FormatError, MissingArtifactError, StorageError
from .phantom import MODALITIES, Case
from .volume import Volume, is_orthonormal

MAGIC = b"ADUV"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sI3I3f3f9fB3s")
HEADER_SIZE = _HEADER.size  # 84 bytes


def encode_volume(volume: Volume) -> bytes:
    data = volume.data
    if not np.all(np.isfinite(data)):
        raise StorageError("refusing to write non-finite voxel values")
    header = _HEADER.pack(
        MAGIC, VERSION, *volume.dims,
        *volume.spacing.astype(np.float32),
        *volume.origin.astype(np.float32),
        *volume.direction.astype(np.float32).reshape(-1),
        DTYPE_F32, b"\x00\x00\x00",
    )
    return header + data.astype("<f4", copy=False).tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"header truncated: {len(buf)} < {HEADER_SIZE} bytes")
    fields = _HEADER.unpack_from(buf)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    dims = fields[2:5]
    spacing = np.array(fields[5:8], dtype=np.float32)
    origin = np.array(fields[8:11], dtype=np.float32)
    direction = np.array(fields[11:20], dtype=np.float32).reshape(3, 3)
    dtype, reserved = fields[20], fields[21]
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if reserved != b"\x00\x00\x00":
        raise FormatError("reserved bytes must be zero")
    if min(dims) < 1:
        raise FormatError(f"dims must be >= 1, got {dims}")
    if np.any(spacing <= 0):
        raise FormatError(f"spacing must be positive, got {spacing}")
    if not is_orthonormal(direction.astype(np.float64)):
        raise FormatError("direction matrix is not orthonormal")
    n = int(np.prod(dims))
    payload = len(buf) - HEADER_SIZE
    if payload != 4 * n:
        raise FormatError(f"payload length {payload} != expected {4 * n} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE).reshape(dims)
    return Volume(data.astype(np.float32), spacing, origin, direction)


def _atomic_write(path: Path, blob: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_volume(volume: Volume, path) -> None:
    _atomic_write(Path(path), encode_volume(volume))


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"volume file not found: {path}")
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode_volume(buf)


@dataclass
class CaseManifest:
    case_id: str
    modalities: Dict[str, str]
    zone_mask: str
    lesion_mask: str
    healthy: bool
    seed: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


MANIFEST_NAME = "case.json"


def write_case(case: Case, directory) -> CaseManifest:
    directory = Path(directory)
    files = {m: f"{m}.aduv" for m in MODALITIES}
    for m in MODALITIES:
        write_volume(case.modalities[m], directory / files[m])
    write_volume(case.zone_mask, directory / "zone_mask.aduv")
    write_volume(case.lesion_mask, directory / "lesion_mask.aduv")
    manifest = CaseManifest(
        case_id=case.case_id, modalities=files, zone_mask="zone_mask.aduv",
        lesion_mask="lesion_mask.aduv", healthy=case.healthy, seed=case.seed,
    )
    _atomic_write(directory / MANIFEST_NAME, manifest.to_json().encode("utf-8"))
    return manifest


def read_manifest(manifest_path) -> CaseManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingArtifactError(f"case manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = CaseManifest(**raw)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed case manifest {manifest_path}: {exc}") from exc
    if set(manifest.modalities) != set(MODALITIES):
        missing = sorted(set(MODALITIES) - set(manifest.modalities))
        raise StorageError(f"manifest {manifest_path} missing modality path(s): {', '.join(missing)}")
    return manifest


def read_case(manifest_path) -> Case:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent

    def load(key: str, rel: str) -> Volume:
        p = root / rel
        if not p.exists():
            raise MissingArtifactError(f"case {manifest.case_id}: {key} file missing ({p})")
        return read_volume(p)

    return Case(
        case_id=manifest.case_id,
        modalities={m: load(m, manifest.modalities[m]) for m in MODALITIES},
        zone_mask=load("zone_mask", manifest.zone_mask),
        lesion_mask=load("lesion_mask", manifest.lesion_mask),
        healthy=manifest.healthy,
        seed=manifest.seed,
    )
