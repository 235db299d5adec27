"""Fixed-Point GAN: conditional translator between the healthy and diseased domains.

Generator loss (cross-domain c_trg and same-domain c_org translations)::

    adv(G(x, c_trg)) + adv(G(x, c_org))
    + lambda_cls * [CE(D_cls(G(x, c_trg)), c_trg) + CE(D_cls(G(x, c_org)), c_org)]
    + lambda_cyc * |x - G(G(x, c_trg), c_org)|_1
    + lambda_id  * |x - G(x, c_org)|_1

The discriminator gets the adversarial term (plus gradient penalty for WGAN-GP)
and domain classification on real slices.
"""

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

N_DOMAINS = 2
DOMAINS = {"healthy": 0, "diseased": 1}


def domain_code(domain, n: int, dtype=torch.float32) -> torch.Tensor:
    if isinstance(domain, str):
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}")
        domain = torch.full((n,), DOMAINS[domain], dtype=torch.long)
    return F.one_hot(domain.long(), N_DOMAINS).to(dtype)


class ResidualBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1, bias=False),
            nn.InstanceNorm2d(c, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Two stride-2 downsamplings, ``res_blocks`` residual blocks, two upsamplings.

    The target-domain one-hot code is broadcast to spatial maps and
    concatenated to the input.  With ``residual_output`` the network predicts
    an additive correction to its input.
    """

    def __init__(self, filters: int = 64, res_blocks: int = 6, residual_output: bool = True):
        super().__init__()
        f = filters
        layers = [
            nn.Conv2d(1 + N_DOMAINS, f, 7, padding=3, bias=False),
            nn.InstanceNorm2d(f, affine=True), nn.ReLU(),
            nn.Conv2d(f, 2 * f, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(2 * f, affine=True), nn.ReLU(),
            nn.Conv2d(2 * f, 4 * f, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(4 * f, affine=True), nn.ReLU(),
        ]
        layers += [ResidualBlock(4 * f) for _ in range(res_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * f, 2 * f, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(2 * f, affine=True), nn.ReLU(),
            nn.ConvTranspose2d(2 * f, f, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(f, affine=True), nn.ReLU(),
            nn.Conv2d(f, 1, 7, padding=3),
        ]
        self.net = nn.Sequential(*layers)
        self.residual_output = residual_output
        if residual_output:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x, code):
        if code.dim() == 1:
            code = domain_code(code, len(x), x.dtype)
        c = code.to(x.dtype)[:, :, None, None].expand(-1, -1, *x.shape[-2:])
        out = self.net(torch.cat([x, c], dim=1))
        return x + out if self.residual_output else out


class Discriminator(nn.Module):
    """Strided PatchGAN critic with an auxiliary domain classifier head."""

    def __init__(self, image_size, filters: int = 64, layers: int = 6):
        super().__init__()
        body, c_in, c = [], 1, filters
        for _ in range(layers):
            body += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.01)]
            c_in, c = c, min(2 * c, filters * 16)
        self.body = nn.Sequential(*body)
        h, w = image_size
        kh, kw = h // 2**layers, w // 2**layers
        if kh < 1 or kw < 1:
            raise ConfigError("image too small for the discriminator depth")
        self.src = nn.Conv2d(c_in, 1, 3, padding=1, bias=False)
        self.cls = nn.Conv2d(c_in, N_DOMAINS, (kh, kw), bias=False)

    def forward(self, x):
        h = self.body(x)
        return self.src(h), self.cls(h).flatten(1)


def _adv_g(src_fake, kind: str):
    if kind == "wgan_gp":
        return -src_fake.mean()
    return ((src_fake - 1) ** 2).mean()


def identity_loss(G, x, c_org) -> torch.Tensor:
    return (x - G(x, c_org)).abs().mean()


def cycle_loss(G, x, c_org, c_trg) -> torch.Tensor:
    return (x - G(G(x, c_trg), c_org)).abs().mean()


def generator_loss(G, D, x, c_org, c_trg, cfg: ReconConfig):
    """Composite generator objective; returns ``(total, terms)``."""
    fake_cross = G(x, c_trg)
    fake_same = G(x, c_org)
    src_c, cls_c = D(fake_cross)
    src_s, cls_s = D(fake_same)
    adv = _adv_g(src_c, cfg.adv_loss) + _adv_g(src_s, cfg.adv_loss)
    cls = F.cross_entropy(cls_c, c_trg) + F.cross_entropy(cls_s, c_org)
    cyc = (x - G(fake_cross, c_org)).abs().mean()
    idt = (x - fake_same).abs().mean()
    total = adv + cfg.lambda_cls * cls + cfg.lambda_cyc * cyc + cfg.lambda_id * idt
    return total, {"g_adv": adv.item(), "g_cls": cls.item(), "cyc": cyc.item(), "id": idt.item()}


def _gradient_penalty(D, real, fake, gen):
    alpha = torch.rand(len(real), 1, 1, 1, generator=gen, dtype=real.dtype)
    xhat = (alpha * real + (1 - alpha) * fake).requires_grad_(True)
    src, _ = D(xhat)
    grad = torch.autograd.grad(src.sum(), xhat, create_graph=True)[0]
    return ((grad.flatten(1).norm(2, dim=1) - 1) ** 2).mean()


def discriminator_loss(G, D, x, c_org, c_trg, cfg: ReconConfig, gen=None):
    src_r, cls_r = D(x)
    with torch.no_grad():
        fake = G(x, c_trg)
    src_f, _ = D(fake)
    if cfg.adv_loss == "wgan_gp":
        adv = src_f.mean() - src_r.mean()
        adv = adv + cfg.lambda_gp * _gradient_penalty(D, x, fake, gen)
    else:
        adv = ((src_r - 1) ** 2).mean() + (src_f**2).mean()
    cls = F.cross_entropy(cls_r, c_org)
    total = adv + cfg.lambda_cls * cls
    return total, {"d_adv": adv.item(), "d_cls": cls.item()}


def build_generator(cfg: ReconConfig) -> Generator:
    return Generator(cfg.g_filters, cfg.res_blocks, cfg.residual_output)


def build_discriminator(cfg: ReconConfig) -> Discriminator:
    return Discriminator(cfg.slice_shape, cfg.d_filters, cfg.d_layers)


def _lr_at(it: int, cfg: ReconConfig, base: float) -> float:
    """Constant until ``decay_start``, then linear decay to zero at ``iterations``."""
    if it < cfg.decay_start or cfg.iterations <= cfg.decay_start:
        return base
    return base * max(0.0, 1.0 - (it - cfg.decay_start) / (cfg.iterations - cfg.decay_start))


def train_fpgan(slices: SliceBatch, cfg: ReconConfig, iterations: int | None = None,
                log_every: int = 100) -> ModelCheckpoint:
    labels = slices.labels
    if len(np.unique(labels)) < 2:
        raise ConfigError("fixed-point GAN needs slices from both domains")
    if tuple(slices.shape) != tuple(cfg.slice_shape):
        raise ConfigError(f"slice shape {slices.shape} != configured {cfg.slice_shape}")
    iterations = cfg.iterations if iterations is None else iterations
    torch.manual_seed(cfg.seed)
    G, D = build_generator(cfg), build_discriminator(cfg)
    g_opt = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = torch.from_numpy(slices.images).unsqueeze(1)
    y_all = torch.from_numpy(labels)
    pos = torch.from_numpy(np.flatnonzero(labels == 1))
    neg = torch.from_numpy(np.flatnonzero(labels == 0))
    half = cfg.batch_size // 2
    history = {"iteration": [], "g_loss": [], "d_loss": [], "id": [], "cyc": []}
    g_total = float("nan")
    for it in range(iterations):
        lr = _lr_at(it, cfg, cfg.lr)
        for opt in (g_opt, d_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        # domain-balanced batch
        idx = torch.cat([
            pos[torch.randint(len(pos), (half,), generator=gen)],
            neg[torch.randint(len(neg), (cfg.batch_size - half,), generator=gen)],
        ])
        x, c_org = x_all[idx], y_all[idx]
        c_trg = 1 - c_org

        d_total, d_terms = discriminator_loss(G, D, x, c_org, c_trg, cfg, gen)
        d_opt.zero_grad()
        d_total.backward()
        d_opt.step()

        if (it + 1) % cfg.n_critic == 0:
            g_loss, g_terms = generator_loss(G, D, x, c_org, c_trg, cfg)
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()
            g_total = g_loss.item()
            if it % log_every == 0 or it == iterations - 1:
                history["iteration"].append(it)
                history["g_loss"].append(g_total)
                history["d_loss"].append(d_total.item())
                history["id"].append(g_terms["id"])
                history["cyc"].append(g_terms["cyc"])
                log.debug("fpgan it %d g %.4f d %.4f id %.4f", it, g_total, d_total.item(), g_terms["id"])
    G.eval()
    return ModelCheckpoint.from_module("fpgan", cfg.to_dict(), G, iteration=iterations,
                                       final_loss=g_total, seed=cfg.seed, history=history)
