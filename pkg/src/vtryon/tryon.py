"""Stage I: pose-guided warping of the model image and region replacement.

All tensors are NCHW float. Images live in [0, 1], pose maps are the 18
Gaussian joint channels from :func:`vtryon.core.pose_to_heatmaps`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchConfig
from .core import N_JOINTS, N_LABELS, ShapeError


def conv_block(cin, cout, stride=1, norm=False):
    layers = []
    for conv in (nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.Conv2d(cout, cout, 3, padding=1)):
        layers.append(conv)
        if norm:
            layers.append(nn.GroupNorm(min(4, cout), cout))
        layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class PyramidEncoder(nn.Module):
    """Level k has stride 2**k and ``widths[k]`` channels."""

    def __init__(self, cin, widths, size=None, norm=False):
        super().__init__()
        self.size = size
        self.blocks = nn.ModuleList()
        prev = cin
        for k, w in enumerate(widths):
            self.blocks.append(conv_block(prev, w, stride=1 if k == 0 else 2, norm=norm))
            prev = w

    def forward(self, x):
        if self.size is not None and tuple(x.shape[-2:]) != tuple(self.size):
            raise ShapeError(f"expected input of size {tuple(self.size)}, got {tuple(x.shape[-2:])}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class UNet(nn.Module):
    def __init__(self, cin, cout, widths, norm=False):
        super().__init__()
        self.encoder = PyramidEncoder(cin, widths, norm=norm)
        self.up = nn.ModuleList(
            conv_block(widths[k + 1] + widths[k], widths[k], norm=norm) for k in range(len(widths) - 1))
        self.head = nn.Conv2d(widths[0], cout, 3, padding=1)

    def forward(self, x):
        feats = self.encoder(x)
        y = feats[-1]
        for k in range(len(feats) - 2, -1, -1):
            y = F.interpolate(y, size=feats[k].shape[-2:], mode="nearest")
            y = self.up[k](torch.cat([y, feats[k]], 1))
        return self.head(y)


# body segments used to densify the keypoint displacement prior
LIMBS = ((0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
         (1, 11), (11, 12), (12, 13), (2, 8), (5, 11), (8, 11))


def heatmap_keypoints(hm, threshold=0.1):
    """Soft-argmax joint coordinates (B, J, 2) and presence (B, J) from heatmaps."""
    B, J, H, W = hm.shape
    ys = torch.arange(H, dtype=hm.dtype, device=hm.device).view(1, 1, H, 1)
    xs = torch.arange(W, dtype=hm.dtype, device=hm.device).view(1, 1, 1, W)
    mass = hm.sum((2, 3)).clamp_min(1e-12)
    x = (hm * xs).sum((2, 3)) / mass
    y = (hm * ys).sum((2, 3)) / mass
    present = hm.amax((2, 3)) > threshold
    return torch.stack([x, y], -1), present


def _densify(points, present, fractions=(0.25, 0.5, 0.75)):
    pts, ok = [points], [present]
    for a, b in LIMBS:
        for f in fractions:
            pts.append(((1 - f) * points[:, a] + f * points[:, b])[:, None])
            ok.append((present[:, a] & present[:, b])[:, None])
    return torch.cat(pts, 1), torch.cat(ok, 1)


def keypoint_prior_flow(pose_src, pose_dst, sigma=3.0):
    """Dense flow on the target grid interpolated from keypoint displacements.

    Each target pixel takes a softmax(-d^2 / 2 sigma^2)-weighted average of
    (source - target) displacements over joints and limb midpoints present
    in both poses. Zero when the poses coincide; zero everywhere if no joint
    is shared.
    """
    B, _, H, W = pose_dst.shape
    src, src_ok = heatmap_keypoints(pose_src)
    dst, dst_ok = heatmap_keypoints(pose_dst)
    src, ok_s = _densify(src, src_ok)
    dst, ok_d = _densify(dst, dst_ok)
    ok = ok_s & ok_d
    disp = (src - dst).detach()
    dst = dst.detach()
    ys, xs = torch.meshgrid(torch.arange(H, dtype=pose_dst.dtype, device=pose_dst.device),
                            torch.arange(W, dtype=pose_dst.dtype, device=pose_dst.device), indexing="ij")
    d2 = (xs[None, None] - dst[..., 0, None, None]) ** 2 + (ys[None, None] - dst[..., 1, None, None]) ** 2
    logits = -d2 / (2 * sigma ** 2)
    logits = logits.masked_fill(~ok[..., None, None], float("-inf"))
    any_ok = ok.any(1)
    logits = torch.where(any_ok[:, None, None, None], logits, torch.zeros_like(logits))
    wts = torch.softmax(logits, dim=1) * any_ok[:, None, None, None]
    return torch.einsum("bkhw,bkc->bchw", wts, disp)


class FlowEstimator(nn.Module):
    """Coarse-to-fine 2-D flow + visibility from a (source, target) pose pair.

    Flows are in pixels of their own level and are defined on the target
    grid: output(p) samples the source at p + flow(p). The flow is the
    keypoint displacement prior plus a learned residual whose heads start
    at zero.
    """

    def __init__(self, widths, prior_sigma=3.0):
        super().__init__()
        self.prior_sigma = prior_sigma
        self.encoder = PyramidEncoder(2 * N_JOINTS + 2, widths)
        self.fuse = nn.ModuleList()
        self.heads = nn.ModuleList()
        n = len(widths)
        for k in range(n):
            cin = widths[k] + (0 if k == n - 1 else widths[k + 1] + 3)
            self.fuse.append(conv_block(cin, widths[k]))
            head = nn.Conv2d(widths[k], 3, 3, padding=1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads.append(head)

    def forward(self, pose_src, pose_dst):
        prior = keypoint_prior_flow(pose_src, pose_dst, self.prior_sigma) if self.prior_sigma > 0 \
            else pose_dst.new_zeros(pose_dst.shape[0], 2, *pose_dst.shape[-2:])
        scale = float(max(pose_dst.shape[-2:]))
        feats = self.encoder(torch.cat([pose_src, pose_dst, prior / scale], 1))
        n = len(feats)
        flows, vis = [None] * n, [None] * n
        y = prev = None
        for k in range(n - 1, -1, -1):
            h, w = feats[k].shape[-2:]
            prior_k = F.adaptive_avg_pool2d(prior, (h, w)) / 2 ** k
            if y is None:
                y = self.fuse[k](feats[k])
                base = torch.zeros_like(prior_k)
            else:
                y = F.interpolate(y, size=(h, w), mode="nearest")
                up = F.interpolate(prev, size=(h, w), mode="bilinear", align_corners=False)
                base = 2.0 * up[:, :2]
                y = self.fuse[k](torch.cat([feats[k], y, up], 1))
            out = self.heads[k](y)
            residual = base + out[:, :2]
            limit = float(max(h, w))
            flows[k] = (prior_k + residual).clamp(-limit, limit)
            vis[k] = torch.sigmoid(out[:, 2:3])
            prev = torch.cat([residual, vis[k]], 1)
        return flows, vis


class WarpedDecoder(nn.Module):
    """Decode warped appearance features, guided by target-pose features, to RGB.

    The last layer predicts a colour and a blend weight; the output mixes the
    predicted colour with the warped model pixels. The blend starts biased
    towards the warped pixels.
    """

    def __init__(self, widths):
        super().__init__()
        n = len(widths)
        self.blocks = nn.ModuleList()
        for k in range(n):
            cin = 2 * widths[k] + (0 if k == n - 1 else widths[k + 1]) + (3 if k == 0 else 0)
            self.blocks.append(conv_block(cin, widths[k]))
        self.head = nn.Conv2d(widths[0], 4, 3, padding=1)
        with torch.no_grad():
            self.head.bias[3] = 2.0

    def forward(self, warped, pose_feats, warped_rgb):
        y = None
        for k in range(len(warped) - 1, -1, -1):
            x = torch.cat([warped[k], pose_feats[k]], 1)
            if k == 0:
                x = torch.cat([x, warped_rgb], 1)
            if y is not None:
                y = F.interpolate(y, size=x.shape[-2:], mode="nearest")
                x = torch.cat([x, y], 1)
            y = self.blocks[k](x)
        out = self.head(y)
        alpha = torch.sigmoid(out[:, 3:4])
        return alpha * warped_rgb + (1 - alpha) * torch.sigmoid(out[:, :3])


class FittingNetwork(nn.Module):
    """Encoder-decoder over the 6-channel composite.

    Predicts a correction to the merged composite (sum of its two halves);
    the correction head starts at zero.
    """

    def __init__(self, widths):
        super().__init__()
        self.unet = UNet(6, 3, widths)
        nn.init.zeros_(self.unet.head.weight)
        nn.init.zeros_(self.unet.head.bias)

    def forward(self, composite):
        merged = composite[:, :3] + composite[:, 3:]
        return (merged + self.unet(composite)).clamp(0, 1)


class TryOnNetworks(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        widths = tuple(arch.enc_widths[:arch.n_levels])
        if len(widths) < 2 or len(widths) != arch.n_levels:
            raise ValueError("need at least 2 levels and one width per level")
        size = (arch.height, arch.width)
        self.arch = arch
        self.appearance_encoder = PyramidEncoder(3, widths, size)
        self.pose_encoder = PyramidEncoder(N_JOINTS, widths, size)
        self.flow_estimator = FlowEstimator(widths, arch.flow_prior_sigma)
        self.warped_decoder = WarpedDecoder(widths)
        self.roi_network = UNet(3, N_LABELS, tuple(arch.roi_widths), norm=True)
        self.fitting_network = FittingNetwork(tuple(arch.fit_widths))

    def forward(self, model_img, model_pose, frame_img, frame_pose, face_mask, clothes_mask=None):
        return run_tryon(self, model_img, model_pose, frame_img, frame_pose, face_mask, clothes_mask)


# ---------------------------------------------------------------------------
# operations


def encode_appearance(net: TryOnNetworks, img):
    return net.appearance_encoder(img)


def encode_pose(net: TryOnNetworks, pose_hm):
    return net.pose_encoder(pose_hm)


def estimate_flow(net: TryOnNetworks, pose_src, pose_dst):
    if pose_src.shape != pose_dst.shape:
        raise ShapeError(f"pose maps differ in shape: {tuple(pose_src.shape)} vs {tuple(pose_dst.shape)}")
    return net.flow_estimator(pose_src, pose_dst)


def bilinear_sample(feat, x, y):
    """Sample ``feat`` (B,C,H,W) at pixel coordinates ``x``, ``y`` (B,H',W').

    Coordinates are clamped to the border, so out-of-range samples repeat
    the edge value. Exact at integer coordinates.
    """
    B, C, H, W = feat.shape
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = feat.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape(B, C, *xi.shape[1:])

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def backward_warp(feat, flow):
    """out(p) = feat(p + flow(p)) with bilinear sampling and edge clamping."""
    B, _, H, W = feat.shape
    if flow.shape != (B, 2, H, W):
        raise ShapeError(f"flow {tuple(flow.shape)} does not match features {tuple(feat.shape)}")
    ys, xs = torch.meshgrid(torch.arange(H, dtype=flow.dtype, device=flow.device),
                            torch.arange(W, dtype=flow.dtype, device=flow.device), indexing="ij")
    return bilinear_sample(feat, xs + flow[:, 0], ys + flow[:, 1])


def warp(features, flows, vis):
    """Warp each level by its flow, then blend ``vis * warped + (1 - vis) * features``."""
    if not len(features) == len(flows) == len(vis):
        raise ShapeError("features, flows and visibility maps need the same number of levels")
    out = []
    for f, fl, v in zip(features, flows, vis):
        if v.shape[-2:] != f.shape[-2:] or v.shape[1] != 1:
            raise ShapeError(f"visibility {tuple(v.shape)} does not match features {tuple(f.shape)}")
        out.append(v * backward_warp(f, fl) + (1 - v) * f)
    return out


def decode_warped(net: TryOnNetworks, warped, pose_feats, warped_rgb):
    return net.warped_decoder(warped, pose_feats, warped_rgb)


def predict_roi(net: TryOnNetworks, img):
    """Per-pixel softmax over the 20 parsing classes."""
    return torch.softmax(net.roi_network(img), dim=1)


def region_compose(content, base, mask):
    """Concatenate ``mask * content`` and ``(1 - mask) * base`` along channels."""
    if content.shape != base.shape:
        raise ShapeError(f"content {tuple(content.shape)} and base {tuple(base.shape)} differ")
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != content.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match image {tuple(content.shape)}")
    return torch.cat([mask * content, (1 - mask) * base], 1)


def fit_regions(net: TryOnNetworks, composite):
    if composite.shape[1] != 6:
        raise ShapeError(f"composite needs 6 channels, got {composite.shape[1]}")
    return net.fitting_network(composite)


def roi_region_mask(probs, labels):
    """Binary mask of pixels whose argmax class is in ``labels`` (B,1,H,W)."""
    arg = probs.argmax(1, keepdim=True)
    mask = torch.zeros_like(arg, dtype=probs.dtype)
    for lab in labels:
        mask = mask + (arg == lab).to(probs.dtype)
    return mask


@dataclass
class TryOnOutput:
    warped: torch.Tensor        # I_W
    flows: list
    vis: list
    roi: torch.Tensor           # RoI probabilities of I_W
    clothes_mask: torch.Tensor  # M_C
    composite: torch.Tensor     # fitting input for the clothes replacement
    replaced: torch.Tensor      # clothes/arms replaced image
    face_composite: torch.Tensor
    output: torch.Tensor        # final stage-I frame


def run_tryon(net: TryOnNetworks, model_img, model_pose, frame_img, frame_pose, face_mask,
              clothes_mask=None, clothes_labels=(5, 14, 15)) -> TryOnOutput:
    """Full stage-I chain for a batch.

    ``clothes_mask`` overrides the mask derived from the RoI prediction of
    the warped image (used with ground-truth parsing during training).
    """
    app = encode_appearance(net, model_img)
    pose_feats = encode_pose(net, frame_pose)
    flows, vis = estimate_flow(net, model_pose, frame_pose)
    warped_feats = warp(app, flows, vis)
    warped_rgb = warp([model_img], flows[:1], vis[:1])[0]
    warped = decode_warped(net, warped_feats, pose_feats, warped_rgb)
    roi = predict_roi(net, warped)
    if clothes_mask is None:
        clothes_mask = roi_region_mask(roi.detach(), clothes_labels)
    composite = region_compose(warped, frame_img, clothes_mask)
    replaced = fit_regions(net, composite)
    face_composite = region_compose(frame_img, replaced, face_mask)
    output = fit_regions(net, face_composite)
    return TryOnOutput(warped, flows, vis, roi, clothes_mask, composite, replaced, face_composite, output)


def _img_tensor(pixels):
    return torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)[None]


def tryon_frame(net: TryOnNetworks, model, model_pose, frame, frame_pose, masks, sigma=2.0,
                label_sets=None):
    """Single-frame convenience wrapper over core types; returns a ``Frame``.

    ``masks`` maps region kinds to :class:`RegionMask`; ``face_neck_hair`` is
    required, ``clothes_arms`` is optional (defaults to the RoI prediction).
    """
    from .core import DEFAULT_LABEL_SETS, Frame, pose_to_heatmaps

    H, W = frame.shape
    if model.shape != (H, W):
        raise ShapeError(f"model image {model.shape} and frame {(H, W)} differ in size")
    sets = dict(DEFAULT_LABEL_SETS)
    sets.update(label_sets or {})
    mp = torch.from_numpy(pose_to_heatmaps(model_pose, H, W, sigma))[None]
    fp = torch.from_numpy(pose_to_heatmaps(frame_pose, H, W, sigma))[None]
    face = torch.from_numpy(np.array(masks["face_neck_hair"].mask))[None, None]
    clothes = masks.get("clothes_arms")
    if clothes is not None:
        clothes = torch.from_numpy(np.array(clothes.mask))[None, None]
    with torch.no_grad():
        out = run_tryon(net, _img_tensor(model.pixels), mp, _img_tensor(frame.pixels), fp, face,
                        clothes, sets["clothes_arms"])
    pixels = out.output[0].permute(1, 2, 0).numpy().clip(0, 1)
    return Frame(pixels, getattr(frame, "index", 0))
