"""Crop/mask preprocessing and geometric restoration onto the original grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError, GeometryError
from .volume import Volume, require_same_geometry

DEFAULT_MARGIN = (1, 2, 2)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box ``min_corner..max_corner``."""

    min_corner: Tuple[int, int, int]
    max_corner: Tuple[int, int, int]

    def __post_init__(self):
        if any(a > b for a, b in zip(self.min_corner, self.max_corner)):
            raise ConfigError(f"box min {self.min_corner} exceeds max {self.max_corner}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_corner, self.max_corner))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(0 <= a and b < n for a, b, n in zip(self.min_corner, self.max_corner, dims))

    def to_dict(self) -> dict:
        return {"min_corner": list(self.min_corner), "max_corner": list(self.max_corner)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(tuple(int(v) for v in d["min_corner"]), tuple(int(v) for v in d["max_corner"]))

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(n) - 1 for n in dims))


def bounding_box(zone_mask: Volume, margin_voxels: Sequence[int] = DEFAULT_MARGIN) -> BoundingBox:
    nz = np.argwhere(zone_mask.data > 0)
    if nz.size == 0:
        raise ConfigError("empty mask: no voxel with label > 0")
    margin = np.asarray(margin_voxels, dtype=np.int64)
    if margin.shape != (3,) or np.any(margin < 0):
        raise ConfigError(f"margin must be 3 non-negative integers, got {margin_voxels}")
    dims = np.asarray(zone_mask.dims)
    lo = np.maximum(nz.min(axis=0) - margin, 0)
    hi = np.minimum(nz.max(axis=0) + margin, dims - 1)
    return BoundingBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi))


def crop(volume: Volume, box: BoundingBox) -> Volume:
    if not box.fits(volume.dims):
        raise ConfigError(f"box {box} outside volume dims {volume.dims}")
    origin = volume.index_to_world(np.asarray(box.min_corner, dtype=np.float64))
    return Volume(volume.data[box.slices].copy(), volume.spacing.copy(), origin, volume.direction.copy())


def apply_mask(volume: Volume, mask: Volume) -> Volume:
    require_same_geometry(volume, mask, what="volume and mask")
    return volume.like(np.where(mask.data > 0, volume.data, np.float32(0.0)))


def _trilinear(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    dims = np.asarray(data.shape)
    eps = 1e-4
    inside = np.all((idx >= -eps) & (idx <= dims - 1 + eps), axis=-1)
    c = np.clip(idx, 0, dims - 1)
    base = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
    frac = c - base
    out = np.zeros(idx.shape[:-1], dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        # size-1 axes have no upper neighbour; their weight collapses onto index 0
        pos = np.minimum(base + offs, dims - 1)
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=-1)
        out += w * data[pos[..., 0], pos[..., 1], pos[..., 2]]
    return np.where(inside, out, 0.0)


def _nearest(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    dims = np.asarray(data.shape)
    r = np.floor(idx + 0.5).astype(np.int64)
    inside = np.all((r >= 0) & (r < dims), axis=-1)
    r = np.clip(r, 0, dims - 1)
    return np.where(inside, data[r[..., 0], r[..., 1], r[..., 2]], 0.0)


def resample_to_reference(volume: Volume, reference: Volume, interpolation: str = "trilinear") -> Volume:
    """Sample ``volume`` at every voxel centre of ``reference``; zero outside support."""
    if interpolation not in ("nearest", "trilinear"):
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    if volume.same_geometry(reference):
        return reference.like(volume.data.copy())
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in reference.dims], indexing="ij"), -1
    )
    idx = volume.world_to_index(reference.index_to_world(grid))
    data = volume.data.astype(np.float64)
    values = _nearest(data, idx) if interpolation == "nearest" else _trilinear(data, idx)
    return reference.like(values.astype(np.float32))


def reinsert_slices(cropped_map: Volume, original: Volume, box: BoundingBox) -> Volume:
    if cropped_map.dims != box.shape:
        raise GeometryError(f"cropped map dims {cropped_map.dims} != box extents {box.shape}")
    if not box.fits(original.dims):
        raise GeometryError(f"box {box} outside original dims {original.dims}")
    out = np.zeros(original.dims, dtype=np.float32)
    out[box.slices] = cropped_map.data
    return original.like(out)


def normalize_intensity(volume: Volume, mask: Volume) -> Volume:
    """Z-score the foreground (``mask > 0``); background is set to zero."""
    require_same_geometry(volume, mask, what="volume and mask")
    fg = mask.data > 0
    if fg.sum() < 2:
        raise ConfigError("normalization needs at least 2 foreground voxels")
    vals = volume.data[fg].astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if std <= 0:
        raise ConfigError("zero variance in foreground")
    out = np.zeros(volume.dims, dtype=np.float32)
    out[fg] = ((vals - mean) / std).astype(np.float32)
    return volume.like(out)


@dataclass
class PreparedVolume:
    """A modality cropped to the prostate box, masked and z-scored."""

    image: Volume
    mask: Volume
    box: BoundingBox


def prepare(volume: Volume, zone_mask: Volume, box: BoundingBox | None = None,
            margin: Sequence[int] = DEFAULT_MARGIN) -> PreparedVolume:
    """Crop -> mask -> normalise, the preprocessing chain applied before every model."""
    if box is None:
        box = bounding_box(zone_mask, margin)
    prostate = zone_mask.like((zone_mask.data > 0).astype(np.float32))
    m = crop(prostate, box)
    img = apply_mask(crop(volume, box), m)
    return PreparedVolume(normalize_intensity(img, m), m, box)


def to_canvas(slices: np.ndarray, canvas: Tuple[int, int]) -> np.ndarray:
    """Centre ``(n, h, w)`` slices on a zero canvas of shape ``(n, *canvas)``."""
    n, h, w = slices.shape
    ch, cw = canvas
    if h > ch or w > cw:
        raise GeometryError(f"crop {h}x{w} larger than canvas {ch}x{cw}")
    out = np.zeros((n, ch, cw), dtype=slices.dtype)
    y0, x0 = (ch - h) // 2, (cw - w) // 2
    out[:, y0:y0 + h, x0:x0 + w] = slices
    return out


def from_canvas(canvas_slices: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    n, ch, cw = canvas_slices.shape
    h, w = shape
    y0, x0 = (ch - h) // 2, (cw - w) // 2
    return canvas_slices[:, y0:y0 + h, x0:x0 + w].copy()
