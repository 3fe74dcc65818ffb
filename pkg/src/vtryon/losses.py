"""Training objectives for both stages."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights
from .core import ShapeError

EPS = 1e-7


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a, b):
    _same_shape(a, b)
    return (a - b).abs().mean()


def l2_loss(a, b):
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def bce_loss(pred, target, eps=EPS):
    """Mean binary cross-entropy over every pixel and channel."""
    _same_shape(pred, target)
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return [x]


class RandomFeatureExtractor(nn.Module):
    """Frozen conv stack with fixed seeded weights.

    Stands in for a pretrained classifier when no weights can be downloaded;
    returns the activations after each stage.
    """

    def __init__(self, widths=(16, 32, 64), seed=1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = 3
        for k, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * prev)) ** 0.5)
                conv.bias.zero_()
            self.stages.append(nn.Sequential(conv, nn.ReLU()))
            prev = w
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGGFeatureExtractor(nn.Module):
    """relu1_2, relu2_2, relu3_3 of an ImageNet VGG19 (weights must be available locally)."""

    LAYERS = (3, 8, 17)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.DEFAULT).features[: self.LAYERS[-1] + 1]
        self.features = features
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = (x - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.LAYERS:
                out.append(x)
        return out


def build_extractor(kind: str = "random") -> nn.Module:
    if kind == "random":
        return RandomFeatureExtractor()
    if kind == "vgg19":
        return VGGFeatureExtractor()
    if kind == "identity":
        return IdentityExtractor()
    raise ValueError(f"unknown perceptual extractor {kind!r}")


def perceptual_loss(extractor, a, b):
    """Sum over extractor layers of the L1 distance between features."""
    _same_shape(a, b)
    fa, fb = extractor(a), extractor(b)
    return sum(l1_loss(x, y) for x, y in zip(fa, fb))


def flow_consistency_loss(flow_s, flow_t, mask):
    """(1/N) sum_p ||(F_s(p) + F_t(p)) * M(p)||^2 over N foreground pixels; 0 if N = 0.

    Flows are (B, 2, H, W), ``mask`` is (B, 1, H, W) or (B, H, W).
    """
    _same_shape(flow_s, flow_t)
    if mask.dim() == flow_s.dim() - 1:
        mask = mask.unsqueeze(1)
    if mask.shape[-2:] != flow_s.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match flow {tuple(flow_s.shape)}")
    n = mask.sum()
    if n.item() == 0:
        return flow_s.new_zeros(())
    return (((flow_s + flow_t) * mask) ** 2).sum() / n


@dataclass
class FlowPair:
    flow_s: torch.Tensor
    flow_t: torch.Tensor
    mask: torch.Tensor

    def loss(self):
        return flow_consistency_loss(self.flow_s, self.flow_t, self.mask)


class SoftCorrelationFlow(nn.Module):
    """Parameter-free differentiable flow between two images.

    flow(a, b)(p) is the softmax-weighted mean displacement d over a
    (2r+1)^2 window, weighted by exp(-||a(p) - b(p+d)||^2 / temperature).
    Differentiable w.r.t. both images, so a consistency penalty on its
    output reaches the generator. With ``units="grid"`` displacements are
    expressed in sampling-grid units (the image spans [-1, 1]); with
    ``"pixels"`` they are raw pixel offsets.
    """

    def __init__(self, radius=3, temperature=0.01, units="grid"):
        super().__init__()
        if units not in ("grid", "pixels"):
            raise ValueError(f"units must be 'grid' or 'pixels', got {units!r}")
        self.radius = radius
        self.temperature = temperature
        self.units = units

    def forward(self, a, b):
        r = self.radius
        H, W = a.shape[-2:]
        padded = F.pad(b, (r, r, r, r), mode="replicate")
        costs, disps = [], []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                shifted = padded[..., r + dy:r + dy + H, r + dx:r + dx + W]
                costs.append(-((a - shifted) ** 2).sum(1) / self.temperature)
                disps.append((dx, dy))
        w = torch.softmax(torch.stack(costs, 1), dim=1)
        d = torch.tensor(disps, dtype=a.dtype, device=a.device)
        fx = (w * d[:, 0].view(1, -1, 1, 1)).sum(1)
        fy = (w * d[:, 1].view(1, -1, 1, 1)).sum(1)
        if self.units == "grid":
            fx, fy = fx * (2.0 / W), fy * (2.0 / H)
        return torch.stack([fx, fy], 1)


def clip_flow_loss(flow_net, frames, masks):
    """Average pairwise consistency loss between consecutive frames."""
    if len(frames) < 2:
        return frames[0].new_zeros(())
    total = 0.0
    for prev, cur, m in zip(frames[:-1], frames[1:], masks[1:]):
        total = total + flow_consistency_loss(flow_net(prev, cur), flow_net(cur, prev), m)
    return total / (len(frames) - 1)


def tryon_objective(adv, perceptual, l1, bce, w: LossWeights = LossWeights()):
    return w.lambda1 * adv + w.lambda2 * perceptual + w.lambda3 * l1 + w.lambda4 * bce


def refine_paired_objective(l1, l2, perceptual, flow, mgan, w: LossWeights = LossWeights()):
    return w.gamma1 * l1 + w.gamma2 * l2 + w.gamma3 * perceptual + w.gamma4 * flow + w.gamma5 * mgan


def refine_unpaired_objective(flow_l, match_l, w: LossWeights = LossWeights()):
    return w.beta1 * flow_l + w.beta2 * match_l
