"""Slice-wise U-Net segmenter fed with bpMRI channels plus anomaly-map channels.

Channel order is fixed: ``[T2W, ADC, DWI]`` followed by the selected anomaly
maps in ``(T2W, ADC, DWI)`` order.  Modality channels are z-scored inside the
prostate; anomaly maps are min-max scaled to [0, 1] inside the prostate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, asdict, field, fields
from typing import List, Mapping, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .anomaly import AnomalyMap, minmax_scale
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, MissingArtifactError
from .evaluation import extract_lesion_candidates, patient_level_score
from .phantom import MODALITIES, Case
from .preprocess import (DEFAULT_MARGIN, bounding_box, crop, from_canvas, normalize_intensity,
                         reinsert_slices, resample_to_reference, to_canvas)
from .volume import Volume, require_same_geometry

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


@dataclass
class SegConfig:
    anomaly_channels: Tuple[str, ...] = ()
    base_filters: int = 16
    depth: int = 4
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    lesion_fraction: float = 0.5
    canvas: Tuple[int, int] = (48, 48)
    seed: int = 0

    def __post_init__(self):
        self.anomaly_channels = tuple(m for m in MODALITIES if m in set(self.anomaly_channels))

    @property
    def in_channels(self) -> int:
        return len(MODALITIES) + len(self.anomaly_channels)

    def validate(self) -> "SegConfig":
        if self.depth < 2:
            raise ConfigError("U-Net depth must be >= 2")
        if self.base_filters < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("filters, batch size and epochs must be positive")
        if not 0 <= self.lesion_fraction <= 1:
            raise ConfigError("lesion_fraction must lie in [0, 1]")
        f = 2 ** (self.depth - 1)
        if self.canvas[0] % f or self.canvas[1] % f:
            raise ConfigError(f"canvas {self.canvas} not divisible by {f}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_channels"] = list(self.anomaly_channels)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown seg config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("anomaly_channels", "canvas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def assemble_input(case: Case, anomalies: Mapping[str, AnomalyMap] | None,
                   selection: Sequence[str] = ()) -> np.ndarray:
    """``(C, D, H, W)`` channel stack on the case grid."""
    anomalies = anomalies or {}
    prostate = case.prostate_mask
    chans = [normalize_intensity(case.modalities[m], prostate).data for m in MODALITIES]
    for m in MODALITIES:
        if m not in set(selection):
            continue
        if m not in anomalies:
            raise MissingArtifactError(f"case {case.case_id}: missing {m} anomaly map")
        vol = anomalies[m].volume if isinstance(anomalies[m], AnomalyMap) else anomalies[m]
        require_same_geometry(vol, prostate, what=f"{m} anomaly map and case")
        chans.append(minmax_scale(vol, prostate).data)
    return np.stack(chans).astype(np.float32)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(min(4, c_out), c_out),
        nn.LeakyReLU(0.01),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(min(4, c_out), c_out),
        nn.LeakyReLU(0.01),
    )


class UNet(nn.Module):
    def __init__(self, in_channels: int, base_filters: int = 16, depth: int = 4):
        super().__init__()
        self.in_channels = in_channels
        widths = [base_filters * 2**d for d in range(depth)]
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(_block(c, w))
            c = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.merge.append(_block(2 * w, w))
            c = w
        self.head = nn.Conv2d(c, 1, 1)

    def logits(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        skips = []
        for i, blk in enumerate(self.down):
            x = blk(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips[:-1])):
            x = merge(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_unet(cfg: SegConfig) -> UNet:
    cfg.validate()
    return UNet(cfg.in_channels, cfg.base_filters, cfg.depth)


def soft_dice_loss(prob: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    inter = (prob * target).sum()
    return 1 - (2 * inter + smooth) / (prob.sum() + target.sum() + smooth)


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, ce_weight: float = 1.0,
                      dice_weight: float = 1.0) -> torch.Tensor:
    ce = F.binary_cross_entropy_with_logits(logits, target)
    return ce_weight * ce + dice_weight * soft_dice_loss(torch.sigmoid(logits), target)


@dataclass
class SegSlices:
    inputs: np.ndarray  # (n, C, h, w)
    targets: np.ndarray  # (n, h, w)
    case_ids: List[str] = field(default_factory=list)


def case_slices(case: Case, anomalies, cfg: SegConfig, box=None):
    """Canvas slices for one case: inputs ``(D', C, h, w)``, targets, and the crop box."""
    stack = assemble_input(case, anomalies, cfg.anomaly_channels)
    if box is None:
        box = bounding_box(case.zone_mask, DEFAULT_MARGIN)
    sub = stack[(slice(None),) + box.slices]
    inputs = np.stack([to_canvas(ch, cfg.canvas) for ch in sub], axis=1)
    target = to_canvas(crop(case.lesion_mask, box).data, cfg.canvas)
    return inputs, target, box


def collect_seg_slices(cases: Sequence[Case], anomalies: Mapping[str, Mapping[str, AnomalyMap]],
                       cfg: SegConfig) -> SegSlices:
    xs, ys, ids = [], [], []
    for case in cases:
        x, y, _ = case_slices(case, anomalies.get(case.case_id, {}), cfg)
        xs.append(x)
        ys.append(y)
        ids += [case.case_id] * len(x)
    return SegSlices(np.concatenate(xs), np.concatenate(ys), ids)


def train_segmenter(model: UNet, data: SegSlices, cfg: SegConfig) -> ModelCheckpoint:
    if len(data.inputs) == 0:
        raise ConfigError("no training slices")
    if data.inputs.shape[1] != cfg.in_channels:
        raise ConfigError(f"data has {data.inputs.shape[1]} channels, config expects {cfg.in_channels}")
    x_all = torch.from_numpy(data.inputs)
    y_all = torch.from_numpy(data.targets).unsqueeze(1)
    has_lesion = data.targets.reshape(len(data.targets), -1).any(axis=1)
    pos = torch.from_numpy(np.flatnonzero(has_lesion))
    neg = torch.from_numpy(np.flatnonzero(~has_lesion))
    if len(pos) == 0:
        warnings.warn("no foreground in segmentation training data; training on background only")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps = max(1, len(x_all) // cfg.batch_size)
    n_pos = int(round(cfg.batch_size * cfg.lesion_fraction)) if len(pos) else 0
    if len(neg) == 0:
        n_pos = cfg.batch_size
    history = {"epoch_loss": []}
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            # lesion-containing slices oversampled to a fixed share of each batch
            parts = []
            if n_pos:
                parts.append(pos[torch.randint(len(pos), (n_pos,), generator=gen)])
            if cfg.batch_size - n_pos:
                parts.append(neg[torch.randint(len(neg), (cfg.batch_size - n_pos,), generator=gen)])
            idx = torch.cat(parts)
            loss = segmentation_loss(model.logits(x_all[idx]), y_all[idx], cfg.ce_weight, cfg.dice_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        history["epoch_loss"].append(total / steps)
        log.debug("seg epoch %d loss %.4f", epoch + 1, total / steps)
    model.eval()
    final = history["epoch_loss"][-1] if history["epoch_loss"] else float("nan")
    return ModelCheckpoint.from_module("unet", cfg.to_dict(), model, iteration=cfg.epochs,
                                       final_loss=final, seed=cfg.seed, history=history)


def load_segmenter(ckpt: ModelCheckpoint) -> Tuple[UNet, SegConfig]:
    cfg = SegConfig.from_dict(ckpt.config)
    return ckpt.load_into(build_unet(cfg)).eval(), cfg


@dataclass
class DetectionResult:
    case_id: str
    probability: Volume
    candidates: list
    patient_level_score: float


def predict(checkpoint: ModelCheckpoint, case: Case, anomalies, selection: Sequence[str] | None = None,
            threshold: float = 0.1, min_voxels: int = 5) -> DetectionResult:
    model, cfg = load_segmenter(checkpoint)
    if selection is not None and tuple(m for m in MODALITIES if m in set(selection)) != cfg.anomaly_channels:
        raise ConfigError(f"selection {tuple(selection)} does not match checkpoint {cfg.anomaly_channels}")
    inputs, _, box = case_slices(case, anomalies, cfg)
    with torch.no_grad():
        prob = model(torch.from_numpy(inputs)).squeeze(1).numpy()
    prob = from_canvas(prob, box.shape[1:])
    ref = case.zone_mask
    cropped = Volume(prob, ref.spacing, ref.index_to_world(np.asarray(box.min_corner, float)), ref.direction)
    full = reinsert_slices(cropped, ref, box)
    full = resample_to_reference(full, ref, "trilinear")
    p = np.clip(full.data, 0.0, 1.0)
    vol = ref.like(p)
    return DetectionResult(case.case_id, vol, extract_lesion_candidates(p, threshold, min_voxels),
                           patient_level_score(p))
