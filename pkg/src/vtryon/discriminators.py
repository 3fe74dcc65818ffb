"""Patch, multi-scale and matching discriminators with their BCE GAN losses."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchConfig
from .core import ShapeError
from .losses import EPS


class PatchDiscriminator(nn.Module):
    """Three strided convs to a per-patch probability map."""

    def __init__(self, width=16, cin=3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class MatchingDiscriminator(nn.Module):
    """Shared bias-free conv features, max-correlation map and an affine+sigmoid head.

    Bias-free convs with LeakyReLU map an all-zero (fully masked) input to
    all-zero features.
    """

    def __init__(self, width=16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1, bias=False),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, bias=False),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1, bias=False),
        )
        self.scale = nn.Parameter(torch.tensor(1.0))
        self.bias = nn.Parameter(torch.tensor(0.0))

    def head(self, raw):
        # raw dot products grow with channel count; divide so the head sees O(1) inputs
        c = self.features[-1].out_channels
        return torch.sigmoid(self.scale * raw / c + self.bias)


class DiscriminatorNets(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.vanilla_d = PatchDiscriminator(arch.disc_width)
        self.multiscale_d = nn.ModuleList(PatchDiscriminator(arch.disc_width) for _ in range(arch.n_scales))
        self.matching_d = MatchingDiscriminator(arch.match_width)


def max_correlation(fa, fb):
    """For every location i of ``fa``: max_j fa(i) . fb(j). Shapes (B,C,H,W) -> (B,1,H,W)."""
    if fa.shape[:2] != fb.shape[:2]:
        raise ShapeError(f"feature maps differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    B, C, H, W = fa.shape
    scores = torch.bmm(fa.reshape(B, C, -1).transpose(1, 2), fb.reshape(B, C, -1))
    return scores.max(dim=2).values.reshape(B, 1, H, W)


def _masked(img, mask):
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != img.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match image {tuple(img.shape)}")
    return img * mask


def correlation_map(d: DiscriminatorNets, img_a, mask_a, img_b, mask_b, squash=True):
    """Max over ``b``'s locations of the feature dot product, per location of ``a``.

    With ``squash`` the raw map goes through the matching head into (0, 1).
    """
    md = d.matching_d if isinstance(d, DiscriminatorNets) else d
    if img_a.shape != img_b.shape:
        raise ShapeError(f"images differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    fa = md.features(_masked(img_a, mask_a))
    fb = md.features(_masked(img_b, mask_b))
    raw = max_correlation(fa, fb)
    return md.head(raw) if squash else raw


def _log(x):
    return torch.log(x.clamp(EPS, 1 - EPS))


def matching_disc_loss(u_real, u_fake):
    """d_loss = -E log U_real - E log(1 - U_fake); g_loss = -E log U_fake."""
    d_loss = -_log(u_real).mean() - _log(1 - u_fake).mean()
    g_loss = -_log(u_fake).mean()
    return d_loss, g_loss


def gan_losses(disc, real, fake):
    """Vanilla BCE GAN losses for one patch discriminator.

    The discriminator loss sees ``fake`` detached; the generator loss keeps
    the graph so its gradient reaches the generator.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    p_real = disc(real)
    p_fake_d = disc(fake.detach())
    d_loss = -_log(p_real).mean() - _log(1 - p_fake_d).mean()
    g_loss = -_log(disc(fake)).mean()
    return d_loss, g_loss


def vanilla_adv_loss(d, real, fake):
    disc = d.vanilla_d if isinstance(d, DiscriminatorNets) else d
    return gan_losses(disc, real, fake)


def multiscale_adv_loss(d, real, fake, n_scales=None):
    """Average of patch GAN losses over a factor-2 image pyramid."""
    discs = d.multiscale_d if isinstance(d, DiscriminatorNets) else d
    n_scales = len(discs) if n_scales is None else n_scales
    if n_scales < 1 or n_scales > len(discs):
        raise ValueError(f"n_scales must be in [1, {len(discs)}]")
    min_side = min(real.shape[-2:])
    if min_side // 2 ** (n_scales - 1) < 4:
        raise ValueError(f"image of size {tuple(real.shape[-2:])} too small for {n_scales} scales")
    d_total = g_total = 0.0
    for s in range(n_scales):
        if s:
            real = F.avg_pool2d(real, 2)
            fake = F.avg_pool2d(fake, 2)
        dl, gl = gan_losses(discs[s], real, fake)
        d_total = d_total + dl
        g_total = g_total + gl
    return d_total / n_scales, g_total / n_scales
