"""Per-case figure panels: rows are modalities, columns are

    original | (reconstruction, anomaly map) per backend | lesion mask

Each tile is min-max scaled independently to 0..255 (constant tiles become 0).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import io as store
from .errors import MissingArtifactError
from .layout import anomaly_path, recon_volume_path
from .phantom import MODALITIES
from .preprocess import crop, prepare


def scale_tile(tile: np.ndarray) -> np.ndarray:
    t = np.asarray(tile, dtype=np.float64)
    lo, hi = t.min(), t.max()
    if hi <= lo:
        return np.zeros(t.shape, dtype=np.uint8)
    return np.round(255.0 * (t - lo) / (hi - lo)).astype(np.uint8)


def panel_columns(n_backends: int) -> int:
    return 1 + 2 * n_backends + 1


def pick_slice(lesion_crop: np.ndarray, mask_crop: np.ndarray) -> int:
    per_slice = lesion_crop.reshape(len(lesion_crop), -1).sum(1)
    if per_slice.max() > 0:
        return int(per_slice.argmax())
    return int(mask_crop.reshape(len(mask_crop), -1).sum(1).argmax())


def compose_panel(rows) -> np.ndarray:
    """Stack a list of rows (each a list of equal-shaped 2-D tiles) into one image."""
    return np.concatenate([np.concatenate([scale_tile(t) for t in row], axis=1) for row in rows], axis=0)


def render_case_panel(config, case, out_path) -> np.ndarray:
    root = Path(config.output_dir)
    rows = []
    k = None
    for m in MODALITIES:
        prep = prepare(case.modalities[m], case.zone_mask)
        lesion = crop(case.lesion_mask, prep.box).data
        if k is None:
            k = pick_slice(lesion, prep.mask.data)
        row = [prep.image.data[k]]
        for b in config.backends:
            rp = recon_volume_path(root, b, case.case_id, m)
            ap = anomaly_path(root, b, case.case_id, m, config.seg_backend)
            if not rp.exists() or not ap.exists():
                raise MissingArtifactError(f"missing {b} outputs for case {case.case_id}, modality {m}")
            row.append(store.read_volume(rp).data[k])
            row.append(crop(store.read_volume(ap), prep.box).data[k])
        row.append(lesion[k])
        rows.append(row)
    img = compose_panel(rows)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path, format="PNG", optimize=False)
    return img
