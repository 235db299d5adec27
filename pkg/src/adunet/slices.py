"""2-D slice batches cut from prepared (cropped, masked, z-scored) case volumes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .phantom import Case
from .preprocess import crop, prepare, to_canvas


@dataclass
class SliceBatch:
    images: np.ndarray  # (n, h, w) float32
    labels: np.ndarray  # (n,) 1 = slice contains lesion voxels
    masks: np.ndarray  # (n, h, w) prostate mask
    provenance: List[Tuple[str, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ConfigError("slice batch images must be (n, h, w)")
        if not np.all(np.isfinite(self.images)):
            raise ConfigError("slice batch contains non-finite values")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.ascontiguousarray(self.masks, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "SliceBatch":
        idx = np.asarray(idx)
        return SliceBatch(self.images[idx], self.labels[idx], self.masks[idx],
                          [self.provenance[i] for i in idx])


def collect_slices(cases: Sequence[Case], modality: str, canvas: Tuple[int, int],
                   healthy_only: bool = False, min_foreground: int = 20) -> SliceBatch:
    """Canvas-centred prostate slices of ``modality`` from every case.

    Slices with fewer than ``min_foreground`` prostate pixels are skipped.
    """
    images, labels, masks, prov = [], [], [], []
    for case in cases:
        if healthy_only and not case.healthy:
            continue
        prep = prepare(case.modalities[modality], case.zone_mask)
        lesion = crop(case.lesion_mask, prep.box).data
        img = to_canvas(prep.image.data, canvas)
        msk = to_canvas(prep.mask.data, canvas)
        for k in range(img.shape[0]):
            if msk[k].sum() < min_foreground:
                continue
            images.append(img[k])
            masks.append(msk[k])
            labels.append(int(lesion[k].any()))
            prov.append((case.case_id, prep.box.min_corner[0] + k, modality))
    if not images:
        raise ConfigError("no slices collected")
    return SliceBatch(np.stack(images), np.array(labels), np.stack(masks), prov)
