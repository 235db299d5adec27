"""Denoising diffusion with a noise-aware healthy/diseased classifier for guidance.

Reconstruction noises a slice to level ``L`` with fixed-seed noise and then runs
ancestral denoising back to ``t = 0``; every step's mean is shifted by
``s * variance_t * grad_x log p(healthy | x_t, t)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import ModelCheckpoint
from ..errors import ConfigError
from ..slices import SliceBatch
from .config import ReconConfig

log = logging.getLogger(__name__)

HEALTHY = 0


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def posterior_variance(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        return self.betas * (1.0 - prev) / (1.0 - self.alpha_bars)


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("schedule needs T >= 2")
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def ddpm_forward(x, t: int, schedule: NoiseSchedule, noise):
    """``sqrt(abar_t) * x + sqrt(1 - abar_t) * noise`` (works on numpy or torch)."""
    if not 0 <= t < schedule.T:
        raise ConfigError(f"timestep {t} outside [0, {schedule.T})")
    ab = float(schedule.alpha_bars[t])
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * noise


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        # scale-shift after the norm; an additive bias before GroupNorm is partly cancelled
        self.temb = nn.Linear(t_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class DiffusionUNet(nn.Module):
    """Noise-predicting two-level U-Net conditioned on the timestep."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.t_dim = 4 * c
        self.time = nn.Sequential(nn.Linear(c, self.t_dim), nn.SiLU(), nn.Linear(self.t_dim, self.t_dim))
        self.inp = nn.Conv2d(1, c, 3, padding=1)
        self.down1 = ResBlock(c, c, self.t_dim)
        self.pool1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2 = ResBlock(c, 2 * c, self.t_dim)
        self.pool2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, self.t_dim)
        self.up2 = ResBlock(4 * c, 2 * c, self.t_dim)
        self.up1 = ResBlock(3 * c, c, self.t_dim)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, 1, 3, padding=1)
        self.channels = c

    def forward(self, x, t):
        emb = self.time(timestep_embedding(t, self.channels).to(x.dtype))
        h0 = self.inp(x)
        h1 = self.down1(h0, emb)
        h2 = self.down2(self.pool1(h1), emb)
        h = self.mid(self.pool2(h2), emb)
        h = F.interpolate(h, size=h2.shape[-2:], mode="nearest")
        h = self.up2(torch.cat([h, h2], 1), emb)
        h = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), emb)
        return self.out(F.silu(self.out_norm(h)))


class NoisyClassifier(nn.Module):
    """Healthy/diseased classifier on noised slices (encoder half + pooling)."""

    def __init__(self, channels: int = 32, n_classes: int = 2):
        super().__init__()
        c = channels
        self.t_dim = 4 * c
        self.time = nn.Sequential(nn.Linear(c, self.t_dim), nn.SiLU(), nn.Linear(self.t_dim, self.t_dim))
        self.inp = nn.Conv2d(1, c, 3, padding=1)
        self.b1 = ResBlock(c, c, self.t_dim)
        self.p1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.b2 = ResBlock(c, 2 * c, self.t_dim)
        self.p2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.b3 = ResBlock(2 * c, 2 * c, self.t_dim)
        self.norm = nn.GroupNorm(_groups(2 * c), 2 * c)
        self.head = nn.Linear(2 * c, n_classes)
        self.channels = c

    def forward(self, x, t):
        emb = self.time(timestep_embedding(t, self.channels).to(x.dtype))
        h = self.b1(self.inp(x), emb)
        h = self.b2(self.p1(h), emb)
        h = self.b3(self.p2(h), emb)
        h = F.silu(self.norm(h)).mean(dim=(-1, -2))
        return self.head(h)


def noise_prediction_loss(model: nn.Module, x0: torch.Tensor, t: torch.Tensor,
                          noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t][:, None, None, None]
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    return F.mse_loss(model(xt, t), noise)


def _balanced_indices(labels: np.ndarray, n: int, gen: torch.Generator) -> torch.Tensor:
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    half = n // 2
    a = torch.from_numpy(pos)[torch.randint(len(pos), (half,), generator=gen)]
    b = torch.from_numpy(neg)[torch.randint(len(neg), (n - half,), generator=gen)]
    return torch.cat([a, b])


def train_classifier(model: NoisyClassifier, slices: SliceBatch, cfg: ReconConfig,
                     schedule: NoiseSchedule, iterations: int | None = None, noised: bool = True):
    labels = slices.labels
    if len(np.unique(labels)) < 2:
        raise ConfigError("classifier needs both healthy and diseased slices")
    iterations = cfg.classifier_iterations if iterations is None else iterations
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    x_all = torch.from_numpy(slices.images).unsqueeze(1)
    y_all = torch.from_numpy(labels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.classifier_lr)
    losses = []
    model.train()
    for _ in range(iterations):
        idx = _balanced_indices(labels, cfg.classifier_batch_size, gen)
        x0, y = x_all[idx], y_all[idx]
        t = torch.randint(0, schedule.T, (len(idx),), generator=gen) if noised else torch.zeros(len(idx), dtype=torch.long)
        noise = torch.randn(x0.shape, generator=gen)
        ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t][:, None, None, None]
        xt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
        loss = F.cross_entropy(model(xt, t), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return losses


def train_ddpm(slices: SliceBatch, cfg: ReconConfig, iterations: int | None = None,
               classifier_iterations: int | None = None):
    """Train the denoiser (healthy slices) and the noisy classifier (both classes)."""
    if len(np.unique(slices.labels)) < 2:
        raise ConfigError("classifier data must hold both healthy and diseased slices")
    if tuple(slices.shape) != tuple(cfg.slice_shape):
        raise ConfigError(f"slice shape {slices.shape} != configured {cfg.slice_shape}")
    iterations = cfg.iterations if iterations is None else iterations
    schedule = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max)
    torch.manual_seed(cfg.seed)
    denoiser = DiffusionUNet(cfg.unet_channels)
    classifier = NoisyClassifier(cfg.classifier_channels)

    healthy = torch.from_numpy(slices.images[slices.labels == 0]).unsqueeze(1)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.lr)
    losses = []
    denoiser.train()
    for it in range(iterations):
        idx = torch.randint(len(healthy), (cfg.batch_size,), generator=gen)
        x0 = healthy[idx]
        t = torch.randint(0, schedule.T, (len(idx),), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        loss = noise_prediction_loss(denoiser, x0, t, noise, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    denoiser.eval()
    cls_losses = train_classifier(classifier, slices, cfg, schedule, classifier_iterations)

    den_ckpt = ModelCheckpoint.from_module(
        "ddpm", cfg.to_dict(), denoiser, iteration=iterations,
        final_loss=float(np.mean(losses[-50:])) if losses else float("nan"),
        seed=cfg.seed, history={"loss": losses},
    )
    cls_ckpt = ModelCheckpoint.from_module(
        "ddpm_classifier", cfg.to_dict(), classifier, iteration=len(cls_losses),
        final_loss=float(np.mean(cls_losses[-50:])) if cls_losses else float("nan"),
        seed=cfg.seed, history={"loss": cls_losses},
    )
    return den_ckpt, cls_ckpt


def build_denoiser(cfg: ReconConfig) -> DiffusionUNet:
    return DiffusionUNet(cfg.unet_channels)


def build_classifier(cfg: ReconConfig) -> NoisyClassifier:
    return NoisyClassifier(cfg.classifier_channels)


def _healthy_grad(classifier, x, t):
    with torch.enable_grad():
        xg = x.detach().requires_grad_(True)
        logp = F.log_softmax(classifier(xg, t), dim=1)[:, HEALTHY].sum()
        return torch.autograd.grad(logp, xg)[0]


@torch.no_grad()
def ddpm_reconstruct(x: np.ndarray, denoiser, classifier, schedule: NoiseSchedule,
                     encode_level: int, guidance_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Pseudo-healthy reconstruction of ``(n, h, w)`` slices."""
    if classifier is None and guidance_scale != 0:
        raise ConfigError("guided reconstruction needs a classifier")
    if not 0 < encode_level < schedule.T:
        raise ConfigError(f"encode level {encode_level} outside (0, {schedule.T})")
    x = torch.as_tensor(np.asarray(x, dtype=np.float32)).unsqueeze(1)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(x.shape, generator=gen)
    xt = ddpm_forward(x, encode_level, schedule, noise)
    var = schedule.posterior_variance
    for t in range(encode_level, -1, -1):
        tt = torch.full((len(x),), t, dtype=torch.long)
        eps = denoiser(xt, tt)
        a, ab, b = schedule.alphas[t], schedule.alpha_bars[t], schedule.betas[t]
        mean = (xt - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        if guidance_scale != 0:
            # the bare beta keeps guidance active at t = 0 where the posterior variance vanishes
            step_var = var[t] if t > 0 else b
            mean = mean + guidance_scale * step_var * _healthy_grad(classifier, xt, tt)
        if t > 0:
            xt = mean + math.sqrt(var[t]) * torch.randn(x.shape, generator=gen)
        else:
            xt = mean
    return xt.squeeze(1).numpy()
