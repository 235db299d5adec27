"""Anomaly maps: blurred absolute residual between an image and its reconstruction.

    map = box_blur(|x - G(x)|) * prostate_mask

The blur is a normalised ``k x k`` box filter with zero padding.  For even
``k`` the window covering output pixel ``i`` spans ``i - (k-1)//2 .. i + k//2``
(offset 3 for the default ``k = 8``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping

import numpy as np

from .errors import ConfigError, GeometryError, MissingArtifactError
from .phantom import MODALITIES, Case
from .preprocess import (BoundingBox, apply_mask, from_canvas, prepare, reinsert_slices,
                         resample_to_reference, to_canvas)
from .volume import Volume, require_same_geometry

DEFAULT_KERNEL = 8


@dataclass(eq=False)
class AnomalyMap:
    modality: str
    volume: Volume

    def __eq__(self, other):
        if not isinstance(other, AnomalyMap):
            return NotImplemented
        return self.modality == other.modality and self.volume == other.volume


def blur(slice_2d: np.ndarray, kernel_size: int = DEFAULT_KERNEL) -> np.ndarray:
    a = np.asarray(slice_2d, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError("blur expects a 2-D slice")
    k = int(kernel_size)
    if k < 1:
        raise ConfigError("kernel_size must be >= 1")
    if k > min(a.shape):
        raise ConfigError(f"kernel {k} larger than slice {a.shape}")
    if k == 1:
        return a.copy()
    before, after = (k - 1) // 2, k // 2
    p = np.pad(a, ((before, after), (before, after)))
    # summed-area table with a leading zero row/column
    sat = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    sat[1:, 1:] = p.cumsum(0).cumsum(1)
    h, w = a.shape
    total = sat[k:k + h, k:k + w] - sat[:h, k:k + w] - sat[k:k + h, :w] + sat[:h, :w]
    return total / (k * k)


def blur_volume(data: np.ndarray, kernel_size: int = DEFAULT_KERNEL) -> np.ndarray:
    return np.stack([blur(s, kernel_size) for s in data])


def anomaly_map(x: Volume, g_of_x: Volume, prostate_mask: Volume, kernel_size: int = DEFAULT_KERNEL,
                modality: str = "") -> AnomalyMap:
    require_same_geometry(x, g_of_x, prostate_mask, what="image, reconstruction and mask")
    residual = np.abs(x.data.astype(np.float64) - g_of_x.data.astype(np.float64))
    smoothed = blur_volume(residual, kernel_size)
    out = np.where(prostate_mask.data > 0, smoothed, 0.0)
    # box-filter sums of non-negative values can round to tiny negatives
    out = np.maximum(out, 0.0)
    return AnomalyMap(modality, x.like(out.astype(np.float32)))


def restore_to_case(map_on_crop: AnomalyMap, case: Case, box: BoundingBox) -> AnomalyMap:
    ref = case.zone_mask
    if map_on_crop.volume.dims != box.shape or not box.fits(ref.dims):
        raise GeometryError(f"map dims {map_on_crop.volume.dims} do not match crop box {box}")
    expected_origin = ref.index_to_world(np.asarray(box.min_corner, dtype=np.float64))
    if not np.allclose(map_on_crop.volume.origin, expected_origin, atol=1e-3):
        raise GeometryError("map origin does not match the crop provenance")
    full = reinsert_slices(map_on_crop.volume, ref, box)
    restored = resample_to_reference(full, ref, "trilinear")
    restored = apply_mask(restored, case.prostate_mask)
    return AnomalyMap(map_on_crop.modality, restored)


def minmax_scale(volume: Volume, mask: Volume) -> Volume:
    """Scale foreground values to [0, 1]; constant foreground maps to zeros."""
    fg = mask.data > 0
    out = np.zeros(volume.dims, dtype=np.float32)
    if fg.any():
        v = volume.data[fg].astype(np.float64)
        lo, hi = v.min(), v.max()
        if hi > lo:
            out[fg] = ((v - lo) / (hi - lo)).astype(np.float32)
    return volume.like(out)


def reconstruct_prepared(reconstructor, prepared, canvas) -> Volume:
    """Slice-wise G(x) on a prepared (cropped, masked, z-scored) volume."""
    img = prepared.image.data
    slices = to_canvas(img, canvas)
    recon = reconstructor(slices)
    recon = from_canvas(np.asarray(recon, dtype=np.float32), img.shape[1:])
    recon = np.where(prepared.mask.data > 0, recon, np.float32(0.0))
    return prepared.image.like(recon)


def generate_case_anomalies(case: Case, reconstructors: Mapping[str, object],
                            modalities: Iterable[str] | None = None,
                            kernel_size: int = DEFAULT_KERNEL, canvas=(48, 48),
                            return_recon: bool = False):
    """Anomaly maps on the full case grid for each requested modality.

    ``reconstructors`` maps modality -> callable taking ``(n, h, w)`` canvas
    slices and returning reconstructions of the same shape.
    """
    modalities = list(modalities) if modalities is not None else list(reconstructors)
    maps: Dict[str, AnomalyMap] = {}
    recons: Dict[str, Volume] = {}
    for m in modalities:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}")
        if m not in reconstructors or reconstructors[m] is None:
            raise MissingArtifactError(f"no reconstruction checkpoint for modality {m}")
        prepared = prepare(case.modalities[m], case.zone_mask)
        g = reconstruct_prepared(reconstructors[m], prepared, canvas)
        amap = anomaly_map(prepared.image, g, prepared.mask, kernel_size, modality=m)
        maps[m] = restore_to_case(amap, case, prepared.box)
        recons[m] = g
    return (maps, recons) if return_recon else maps


def healthy_reference_threshold(maps: Iterable[AnomalyMap], masks: Iterable[Volume], q: float = 95.0) -> float:
    """``q``-th percentile of per-case mean map value inside the prostate."""
    means = [float(a.volume.data[m.data > 0].mean()) for a, m in zip(maps, masks)]
    if not means:
        raise ConfigError("no healthy maps to derive a threshold from")
    return float(np.percentile(means, q))
