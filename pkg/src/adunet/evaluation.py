"""Reconstruction metrics (SSIM, PSNR) and detection metrics (AUROC, lesion AP).

Lesion candidates are 26-connected components of a thresholded probability
map; a candidate hits a ground-truth lesion when their IoU reaches
``iou_threshold``.  Patient-level score is the map maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, GeometryError
from .volume import Volume

PSNR_INF = math.inf

STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class ReconMetrics:
    ssim: float
    psnr: float


@dataclass
class SegMetrics:
    auroc: float
    ap: float
    average: float = field(init=False)

    def __post_init__(self):
        self.average = average_score(self.auroc, self.ap)


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)


def psnr(x, y, data_range: float) -> float:
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range**2 / mse)


def ssim(x, y, window: int = 7, K1: float = 0.01, K2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained ``window x window`` patches (uniform weights)."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape or a.ndim != 2:
        raise GeometryError(f"ssim needs equal 2-D shapes, got {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd, got {window}")
    if window > min(a.shape):
        raise ConfigError(f"window {window} larger than slice {a.shape}")
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    if np.array_equal(a, b):
        return 1.0
    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a = pa.mean(axis=(-1, -2))
    mu_b = pb.mean(axis=(-1, -2))
    da = pa - mu_a[..., None, None]
    db = pb - mu_b[..., None, None]
    var_a = (da**2).mean(axis=(-1, -2))
    var_b = (db**2).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def foreground_range(reference, mask=None) -> float:
    ref = _arr(reference)
    vals = ref[_arr(mask) > 0] if mask is not None else ref.reshape(-1)
    if vals.size == 0:
        return 1.0
    r = float(vals.max() - vals.min())
    return r if r > 0 else 1.0


def volume_ssim(x, y, mask=None, window: int = 7, K1: float = 0.01, K2: float = 0.03,
                data_range: float | None = None) -> float:
    """Mean per-slice SSIM over slices that contain foreground (all slices without a mask)."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape or a.ndim != 3:
        raise GeometryError(f"volume_ssim needs equal 3-D shapes, got {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = foreground_range(a, mask)
    if mask is None:
        keep = range(a.shape[0])
    else:
        m = _arr(mask)
        keep = [k for k in range(a.shape[0]) if np.any(m[k] > 0)]
    values = [ssim(a[k], b[k], window, K1, K2, data_range) for k in keep]
    if not values:
        raise ConfigError("no foreground slice to evaluate")
    return float(np.mean(values))


@dataclass
class LesionCandidate:
    confidence: float
    voxels: np.ndarray  # (n, 3) int indices

    @property
    def size(self) -> int:
        return len(self.voxels)


def connected_components(binary: np.ndarray) -> List[np.ndarray]:
    """26-connected components of a 3-D boolean array as index arrays."""
    labels, n = ndimage.label(binary, structure=STRUCT_26)
    if n == 0:
        return []
    order = np.argsort(labels, axis=None, kind="stable")
    flat = labels.reshape(-1)[order]
    starts = np.searchsorted(flat, np.arange(1, n + 2))
    coords = np.stack(np.unravel_index(order, labels.shape), -1)
    return [coords[starts[i]:starts[i + 1]] for i in range(n)]


def extract_lesion_candidates(prob, threshold: float = 0.1, min_voxels: int = 5) -> List[LesionCandidate]:
    p = _arr(prob)
    out = []
    for comp in connected_components(p >= threshold):
        if len(comp) < min_voxels:
            continue
        conf = float(p[comp[:, 0], comp[:, 1], comp[:, 2]].max())
        out.append(LesionCandidate(conf, comp))
    out.sort(key=lambda c: -c.confidence)
    return out


def ground_truth_lesions(lesion_mask) -> List[np.ndarray]:
    return connected_components(_arr(lesion_mask) > 0)


def patient_level_score(prob) -> float:
    return float(_arr(prob).max())


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ConfigError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError("labels must be 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("undefined AUROC: need both classes")
    # rank with ties averaged; rank sums are exact multiples of 0.5
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _voxel_keys(voxels: np.ndarray) -> set:
    return set(map(tuple, np.asarray(voxels).tolist()))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = _voxel_keys(a), _voxel_keys(b)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def match_candidates(candidates_per_case: Sequence[Sequence[LesionCandidate]],
                     gt_per_case: Sequence[Sequence[np.ndarray]],
                     iou_threshold: float = 0.1):
    """Greedy one-to-one matching over the globally confidence-ranked list.

    Returns ``(confidences, is_tp, n_gt)`` in ranked order.
    """
    if len(candidates_per_case) != len(gt_per_case):
        raise ConfigError("candidate and ground-truth lists differ in case count")
    ranked = [
        (c.confidence, ci, k)
        for ci, cands in enumerate(candidates_per_case)
        for k, c in enumerate(cands)
    ]
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    gt_sets = [[_voxel_keys(g) for g in gts] for gts in gt_per_case]
    used = [[False] * len(g) for g in gt_sets]
    confs, tps = [], []
    for conf, ci, k in ranked:
        cand = _voxel_keys(candidates_per_case[ci][k].voxels)
        best, best_iou = -1, 0.0
        for gi, g in enumerate(gt_sets[ci]):
            if used[ci][gi]:
                continue
            v = len(cand & g) / len(cand | g)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            used[ci][best] = True
        confs.append(conf)
        tps.append(best >= 0)
    n_gt = sum(len(g) for g in gt_sets)
    return np.asarray(confs), np.asarray(tps, dtype=bool), n_gt


def average_precision(candidates_per_case, gt_per_case, iou_threshold: float = 0.1) -> float:
    """Sum over the ranked list of (recall increment x precision at that rank)."""
    _, tps, n_gt = match_candidates(candidates_per_case, gt_per_case, iou_threshold)
    if n_gt == 0:
        raise ConfigError("undefined AP: no ground-truth lesions")
    if len(tps) == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    precision = tp_cum / np.arange(1, len(tps) + 1)
    recall = tp_cum / n_gt
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


def average_score(auroc_value: float, ap_value: float) -> float:
    return (auroc_value + ap_value) / 2


def evaluate_detections(probs: Dict[str, np.ndarray], cases, threshold: float = 0.1,
                        min_voxels: int = 5, iou_threshold: float = 0.1) -> SegMetrics:
    """Patient AUROC + lesion AP over a set of cases given their probability maps."""
    scores, labels, cands, gts = [], [], [], []
    for case in cases:
        p = probs[case.case_id]
        scores.append(patient_level_score(p))
        labels.append(0 if case.healthy else 1)
        cands.append(extract_lesion_candidates(p, threshold, min_voxels))
        gts.append(ground_truth_lesions(case.lesion_mask))
    return SegMetrics(auroc(scores, labels), average_precision(cands, gts, iou_threshold))
