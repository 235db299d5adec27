"""Run configuration: one JSON document drives every CLI stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Dict, List, Tuple

from .errors import ConfigError
from .phantom import MODALITIES, PhantomConfig
from .recon.config import ARCHITECTURES, PROFILES, ReconConfig
from .segmentation import SegConfig

SCHEMA_VERSION = 1

VARIANTS: Dict[str, Tuple[str, ...]] = {
    "baseline": (),
    "adunet_T2W": ("T2W",),
    "adunet_ADC": ("ADC",),
    "adunet_DWI": ("DWI",),
    "adunet_all": MODALITIES,
}

SEG_PROFILES = {
    "smoke": {"epochs": 5},
    "desk": {"epochs": 20},
    "full": {"epochs": 100, "base_filters": 32},
}

CANVAS = {"smoke": (48, 48), "desk": (48, 48), "full": (128, 128)}


@dataclass
class DatasetConfig:
    n_healthy: int = 60
    n_diseased: int = 20
    split: Tuple[float, float, float] = (0.75, 0.125, 0.125)
    external_healthy: int = 5
    external_diseased: int = 5
    external_noise_factor: float = 1.5
    external_bias_factor: float = 2.0


@dataclass
class MetricConfig:
    threshold: float = 0.1
    min_voxels: int = 5
    iou: float = 0.1
    kernel_size: int = 8
    ssim_window: int = 7


@dataclass
class RunConfig:
    output_dir: str
    seed: int = 42
    profile: str = "smoke"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backends: List[str] = field(default_factory=lambda: ["fpgan"])
    modalities: List[str] = field(default_factory=lambda: list(MODALITIES))
    recon_overrides: Dict[str, dict] = field(default_factory=dict)
    seg_backend: str = "fpgan"
    seg: dict = field(default_factory=dict)
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    seg_repeats: int = 3
    metrics: MetricConfig = field(default_factory=MetricConfig)
    panel_cases: List[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not self.variants:
            raise ConfigError("variant list must not be empty")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")
        bad = [b for b in self.backends if b not in ARCHITECTURES]
        if bad or not self.backends:
            raise ConfigError(f"unknown backend(s) {bad}")
        if self.seg_backend not in self.backends:
            raise ConfigError(f"segmentation backend {self.seg_backend!r} is not in the trained backends")
        if any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be drawn from {MODALITIES}")
        needed = {m for v in self.variants for m in VARIANTS[v]}
        if not needed <= set(self.modalities):
            raise ConfigError(f"variants need anomaly maps for {sorted(needed)}")
        if self.seg_repeats < 1:
            raise ConfigError("seg_repeats must be >= 1")
        self.phantom.validate()
        for b in self.backends:
            for m in self.modalities:
                self.recon_config(b, m).validate()
        self.seg_config("baseline", 0).validate()
        return self

    @property
    def canvas(self) -> Tuple[int, int]:
        return CANVAS[self.profile]

    @property
    def seg_seeds(self) -> List[int]:
        return [self.seed + r for r in range(self.seg_repeats)]

    def recon_config(self, backend: str, modality: str) -> ReconConfig:
        cfg = PROFILES[self.profile](backend, modality)
        over = dict(self.recon_overrides.get(backend, {}))
        try:
            cfg = replace(cfg, **over)
        except TypeError as exc:
            raise ConfigError(f"bad recon override for {backend}: {exc}") from exc
        cfg = replace(cfg, slice_shape=tuple(self.canvas), seed=self.seed, modality=modality)
        return cfg

    def seg_config(self, variant: str, seed: int) -> SegConfig:
        d = dict(SEG_PROFILES[self.profile])
        d.update(self.seg)
        d.update(anomaly_channels=VARIANTS[variant], canvas=tuple(self.canvas), seed=seed)
        try:
            return SegConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad seg config: {exc}") from exc

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "output_dir" not in d:
            raise ConfigError("config needs output_dir")
        try:
            if "phantom" in d:
                d["phantom"] = PhantomConfig.from_dict(d["phantom"])
            if "dataset" in d:
                ds = dict(d["dataset"])
                if "split" in ds:
                    ds["split"] = tuple(ds["split"])
                d["dataset"] = DatasetConfig(**ds)
            if "metrics" in d:
                d["metrics"] = MetricConfig(**d["metrics"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed run config: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    out = Path(raw.get("output_dir", ""))
    if raw.get("output_dir") and not out.is_absolute():
        raw["output_dir"] = str((path.parent / out).resolve())
    return RunConfig.from_dict(raw).validate()
