"""Dense and spatial convolutional autoencoders trained on healthy slices."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import ModelCheckpoint
from ..errors import ConfigError
from ..slices import SliceBatch
from .config import ReconConfig

log = logging.getLogger(__name__)


def _encoder(cfg: ReconConfig) -> tuple[nn.Sequential, int]:
    layers, c_in = [], 1
    for d in range(cfg.ae_depth):
        c_out = cfg.ae_filters * 2 ** min(d, 3)
        layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c_in = c_out
    return nn.Sequential(*layers), c_in


def _decoder(cfg: ReconConfig, c_top: int) -> nn.Sequential:
    layers, c_in = [], c_top
    for d in reversed(range(cfg.ae_depth)):
        last = d == 0
        c_out = 1 if last else cfg.ae_filters * 2 ** min(d - 1, 3)
        layers.append(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1))
        if not last:
            layers.append(nn.LeakyReLU(0.2))
        c_in = c_out
    return nn.Sequential(*layers)


class DenseAutoencoder(nn.Module):
    """Global compression: the bottleneck is a flat ``latent_size`` vector."""

    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        self.enc, c = _encoder(cfg)
        h, w = cfg.slice_shape
        self.grid = (c, h // 2**cfg.ae_depth, w // 2**cfg.ae_depth)
        n = int(np.prod(self.grid))
        self.to_latent = nn.Linear(n, cfg.latent_size)
        self.from_latent = nn.Linear(cfg.latent_size, n)
        self.dec = _decoder(cfg, c)

    def encode(self, x):
        return self.to_latent(self.enc(x).flatten(1))

    def decode(self, z):
        return self.dec(F.leaky_relu(self.from_latent(z), 0.2).view(-1, *self.grid))

    def forward(self, x):
        return self.decode(self.encode(x))


class SpatialAutoencoder(nn.Module):
    """Bottleneck keeps a ``latent_channels x H/2^depth x W/2^depth`` grid."""

    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        self.enc, c = _encoder(cfg)
        self.to_latent = nn.Conv2d(c, cfg.latent_channels, 1)
        self.from_latent = nn.Conv2d(cfg.latent_channels, c, 1)
        self.dec = _decoder(cfg, c)

    def encode(self, x):
        return self.to_latent(self.enc(x))

    def decode(self, z):
        return self.dec(F.leaky_relu(self.from_latent(z), 0.2))

    def forward(self, x):
        return self.decode(self.encode(x))


def output_layer(model: nn.Module) -> nn.Module:
    return [m for m in model.dec if isinstance(m, nn.ConvTranspose2d)][-1]


def zero_init_output(model: nn.Module) -> nn.Module:
    layer = output_layer(model)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return model


def reconstruction_loss(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(model(x), x)


def lr_at_epoch(epoch: int, cfg: ReconConfig) -> float:
    """Step schedule, 1-indexed epochs: epochs 1..step use ``lr``."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_step)


def train_autoencoder(model: nn.Module, slices: SliceBatch, cfg: ReconConfig,
                      epochs: int | None = None) -> ModelCheckpoint:
    if len(slices) == 0:
        raise ConfigError("empty training stream")
    if tuple(slices.shape) != tuple(cfg.slice_shape):
        raise ConfigError(f"slice shape {slices.shape} != configured {cfg.slice_shape}")
    epochs = cfg.epochs if epochs is None else epochs
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = torch.from_numpy(slices.images).unsqueeze(1)
    if cfg.ae_optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.ae_momentum)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = {"epoch_loss": [], "lr": []}
    model.train()
    for epoch in range(1, epochs + 1):
        lr = lr_at_epoch(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(len(x_all), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            xb = x_all[perm[start:start + cfg.batch_size]]
            loss = reconstruction_loss(model, xb)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            opt.step()
            total += loss.item() * len(xb)
            count += len(xb)
        history["epoch_loss"].append(total / count)
        history["lr"].append(lr)
        log.debug("%s epoch %d loss %.5f", cfg.arch, epoch, total / count)
    model.eval()
    final = history["epoch_loss"][-1] if history["epoch_loss"] else float("nan")
    return ModelCheckpoint.from_module(cfg.arch, cfg.to_dict(), model, iteration=epochs,
                                       final_loss=final, seed=cfg.seed, history=history)
