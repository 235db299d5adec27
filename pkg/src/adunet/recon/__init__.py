"""Pseudo-healthy reconstruction backends and the unified ``reconstruct`` dispatch."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from ..errors import ConfigError, MissingArtifactError
from ..slices import SliceBatch
from . import autoencoders, diffusion, fpgan
from .config import ARCHITECTURES, PROFILES, ReconConfig

__all__ = [
    "ARCHITECTURES", "PROFILES", "ReconConfig", "Reconstructor", "build_reconstructor",
    "train_reconstructor", "reconstruct", "save_reconstructor", "load_reconstructor",
]


def build_reconstructor(cfg: ReconConfig) -> torch.nn.Module:
    cfg.validate()
    if cfg.arch == "dense_ae":
        return autoencoders.DenseAutoencoder(cfg)
    if cfg.arch == "spatial_ae":
        return autoencoders.SpatialAutoencoder(cfg)
    if cfg.arch == "ddpm":
        return diffusion.build_denoiser(cfg)
    if cfg.arch == "fpgan":
        return fpgan.build_generator(cfg)
    raise ConfigError(f"unknown architecture tag {cfg.arch!r}")


class Reconstructor:
    """A loaded checkpoint (plus classifier for diffusion) callable on slice stacks."""

    def __init__(self, checkpoint: ModelCheckpoint, classifier: ModelCheckpoint | None = None):
        self.checkpoint = checkpoint
        self.cfg = ReconConfig.from_dict(checkpoint.config)
        self.model = checkpoint.load_into(build_reconstructor(self.cfg)).eval()
        self.classifier_ckpt = classifier
        self.classifier = None
        if self.cfg.arch == "ddpm":
            if classifier is None:
                raise ConfigError("diffusion reconstruction needs its classifier checkpoint")
            self.classifier = classifier.load_into(diffusion.build_classifier(self.cfg)).eval()
            self.schedule = diffusion.make_schedule(self.cfg.timesteps, self.cfg.beta_min, self.cfg.beta_max)

    @property
    def arch(self) -> str:
        return self.cfg.arch

    def __call__(self, slices: np.ndarray) -> np.ndarray:
        return reconstruct(self, slices)


def reconstruct(rec: Reconstructor, x: np.ndarray, batch: int = 64) -> np.ndarray:
    """G(x) for a single ``(h, w)`` slice or a ``(n, h, w)`` stack."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(rec.cfg.slice_shape):
        raise ConfigError(f"slice shape {x.shape[1:]} does not match trained shape {rec.cfg.slice_shape}")
    outs = []
    for start in range(0, len(x), batch):
        xb = x[start:start + batch]
        if rec.arch == "ddpm":
            out = diffusion.ddpm_reconstruct(xb, rec.model, rec.classifier, rec.schedule,
                                             rec.cfg.encode_level, rec.cfg.guidance_scale, seed=rec.cfg.seed)
        else:
            with torch.no_grad():
                xt = torch.from_numpy(xb).unsqueeze(1)
                if rec.arch == "fpgan":
                    out = rec.model(xt, fpgan.domain_code("healthy", len(xb))).squeeze(1).numpy()
                else:
                    out = rec.model(xt).squeeze(1).numpy()
        outs.append(np.asarray(out, dtype=np.float32))
    out = np.concatenate(outs)
    return out[0] if single else out


def train_reconstructor(cfg: ReconConfig, slices: SliceBatch):
    """Train ``cfg.arch`` on ``slices``; returns ``(checkpoint, classifier_or_None)``.

    Autoencoders only see slices labelled healthy.
    """
    cfg.validate()
    if cfg.arch in ("dense_ae", "spatial_ae"):
        healthy = slices.subset(np.flatnonzero(slices.labels == 0))
        torch.manual_seed(cfg.seed)
        model = build_reconstructor(cfg)
        return autoencoders.train_autoencoder(model, healthy, cfg), None
    if cfg.arch == "ddpm":
        return diffusion.train_ddpm(slices, cfg)
    return fpgan.train_fpgan(slices, cfg), None


def classifier_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".classifier" + path.suffix)


def save_reconstructor(path, checkpoint: ModelCheckpoint, classifier: ModelCheckpoint | None = None) -> None:
    save_checkpoint(checkpoint, path)
    if classifier is not None:
        save_checkpoint(classifier, classifier_path(path))


def load_reconstructor(path) -> Reconstructor:
    path = Path(path)
    ckpt = load_checkpoint(path)
    classifier = None
    if ckpt.arch == "ddpm":
        cpath = classifier_path(path)
        if not cpath.exists():
            raise MissingArtifactError(f"missing classifier checkpoint {cpath}")
        classifier = load_checkpoint(cpath)
    return Reconstructor(ckpt, classifier)
