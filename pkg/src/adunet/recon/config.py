from __future__ import annotations

from dataclasses import dataclass, asdict, fields, replace
from typing import Tuple

from ..errors import ConfigError
from ..phantom import MODALITIES

ARCHITECTURES = ("dense_ae", "spatial_ae", "ddpm", "fpgan")


@dataclass
class ReconConfig:
    arch: str = "fpgan"
    modality: str = "T2W"
    slice_shape: Tuple[int, int] = (48, 48)

    # autoencoders
    ae_filters: int = 16
    ae_depth: int = 3
    latent_size: int = 128
    latent_channels: int = 8
    ae_optimizer: str = "sgd"
    ae_momentum: float = 0.9
    epochs: int = 100

    # diffusion
    timesteps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    encode_level: int = 50
    guidance_scale: float = 1.0
    unet_channels: int = 32
    classifier_channels: int = 32
    classifier_lr: float = 1e-4
    classifier_batch_size: int = 10
    classifier_iterations: int = 2000
    classifier_attention_resolution: int = 16

    # fixed-point GAN
    g_filters: int = 16
    d_filters: int = 16
    res_blocks: int = 3
    d_layers: int = 3
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_id: float = 10.0
    lambda_gp: float = 10.0
    adv_loss: str = "wgan_gp"
    n_critic: int = 5
    residual_output: bool = True
    decay_start: int = 10_000

    # shared optimisation settings
    lr: float = 1e-4
    lr_step: int = 30
    lr_decay: float = 0.1
    batch_size: int = 16
    iterations: int = 20_000
    seed: int = 0

    def validate(self) -> "ReconConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture tag {self.arch!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        sizes = (self.ae_filters, self.ae_depth, self.latent_size, self.latent_channels,
                 self.unet_channels, self.classifier_channels, self.g_filters, self.d_filters,
                 self.d_layers, self.batch_size, self.classifier_batch_size)
        if any(int(s) < 1 for s in sizes) or self.res_blocks < 0 or self.epochs < 0 or self.iterations < 0:
            raise ConfigError("layer sizes, batch sizes and counts must be positive")
        if self.timesteps < 2:
            raise ConfigError("diffusion needs T >= 2")
        if not 0 < self.beta_min < self.beta_max < 1:
            raise ConfigError("need 0 < beta_min < beta_max < 1")
        if not 0 < self.encode_level < self.timesteps:
            raise ConfigError("encode level must satisfy 0 < L < T")
        if self.adv_loss not in ("wgan_gp", "lsgan"):
            raise ConfigError(f"unknown adversarial loss {self.adv_loss!r}")
        if self.ae_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.ae_optimizer!r}")
        if self.lr <= 0 or self.lr_step < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("invalid learning-rate schedule")
        h, w = self.slice_shape
        if self.arch in ("dense_ae", "spatial_ae") and (h % 2**self.ae_depth or w % 2**self.ae_depth):
            raise ConfigError("slice shape must be divisible by 2**ae_depth")
        if self.arch == "fpgan" and (h % 2**self.d_layers or w % 2**self.d_layers):
            raise ConfigError("slice shape must be divisible by 2**d_layers")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slice_shape"] = list(self.slice_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown recon config keys: {sorted(unknown)}")
        d = dict(d)
        if "slice_shape" in d:
            d["slice_shape"] = tuple(d["slice_shape"])
        return cls(**d)


def full_profile(arch: str, modality: str = "T2W") -> ReconConfig:
    """Full-scale hyperparameters as reported for each backend."""
    base = ReconConfig(arch=arch, modality=modality, slice_shape=(128, 128))
    if arch in ("dense_ae", "spatial_ae"):
        return replace(base, lr=0.1, lr_step=30, lr_decay=0.1, epochs=100, ae_filters=32, ae_depth=4)
    if arch == "ddpm":
        return replace(base, timesteps=1000, encode_level=500, iterations=400_000,
                       classifier_lr=1e-4, classifier_batch_size=10, classifier_channels=128,
                       classifier_iterations=150_000, classifier_attention_resolution=16,
                       unet_channels=128)
    return replace(base, g_filters=64, d_filters=64, res_blocks=6, d_layers=6, batch_size=16,
                   iterations=200_000, lr=1e-4, decay_start=100_000, n_critic=5)


def desk_profile(arch: str, modality: str = "T2W") -> ReconConfig:
    base = ReconConfig(arch=arch, modality=modality)
    if arch in ("dense_ae", "spatial_ae"):
        return replace(base, lr=0.1, lr_step=30, lr_decay=0.1, epochs=100)
    if arch == "ddpm":
        return replace(base, timesteps=100, encode_level=50, iterations=5000)
    return replace(base, iterations=20_000, decay_start=10_000)


def smoke_profile(arch: str, modality: str = "T2W") -> ReconConfig:
    base = ReconConfig(arch=arch, modality=modality)
    if arch in ("dense_ae", "spatial_ae"):
        return replace(base, lr=0.1, lr_step=30, lr_decay=0.1, epochs=40, batch_size=32)
    if arch == "ddpm":
        return replace(base, timesteps=100, encode_level=20, iterations=1500, batch_size=16,
                       unet_channels=16, classifier_channels=16, classifier_iterations=600,
                       classifier_lr=1e-3, lr=1e-3)
    return replace(base, iterations=1200, decay_start=600, batch_size=8, n_critic=1,
                   adv_loss="lsgan", lr=2e-4)


PROFILES = {"full": full_profile, "desk": desk_profile, "smoke": smoke_profile}
