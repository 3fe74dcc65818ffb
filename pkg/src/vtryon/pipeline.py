"""Tensorized clips and two-stage inference shared by training, CLI and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import DataConfig
from .core import N_LABELS, VideoClip, pose_to_heatmaps
from .memory import RefineNetworks, refine_clip
from .tryon import TryOnNetworks, predict_roi, roi_region_mask, run_tryon


def image_tensor(pixels) -> torch.Tensor:
    return torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)


def tensor_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()


def _label_mask(labels: np.ndarray, selected) -> torch.Tensor:
    return torch.from_numpy(np.isin(labels, list(selected)).astype(np.float32))[None]


def _onehot(labels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy((labels[None] == np.arange(N_LABELS)[:, None, None]).astype(np.float32))


@dataclass
class Subject:
    """One person image with everything stage I needs: (3|18|20|1|1|1, H, W)."""

    image: torch.Tensor
    pose: torch.Tensor
    parsing: torch.Tensor | None = None
    clothes: torch.Tensor | None = None
    face: torch.Tensor | None = None
    foreground: torch.Tensor | None = None


def make_subject(pixels, pose, parsing, data: DataConfig) -> Subject:
    H, W = pixels.shape[:2]
    hm = torch.from_numpy(pose_to_heatmaps(pose, H, W, data.pose_sigma))
    if parsing is None:
        return Subject(image_tensor(pixels), hm)
    labels = parsing.labels
    return Subject(image_tensor(pixels), hm, _onehot(labels), _label_mask(labels, data.clothes_arms),
                   _label_mask(labels, data.face_neck_hair), _label_mask(labels, range(1, N_LABELS)))


@dataclass
class ClipTensors:
    clip_id: str
    frames: list[Subject]
    model: Subject | None

    def __len__(self):
        return len(self.frames)


def prepare_clip(clip: VideoClip, data: DataConfig) -> ClipTensors:
    frames = [make_subject(f.pixels, p, s, data) for f, p, s in zip(clip.frames, clip.poses, clip.parsing)]
    model = None
    if clip.model is not None and clip.model_pose is not None:
        model = make_subject(clip.model.pixels, clip.model_pose, clip.model_parsing, data)
    return ClipTensors(clip.clip_id, frames, model)


def stack(subjects, field):
    return torch.stack([getattr(s, field) for s in subjects])


def fill_masks(tryon: TryOnNetworks, subjects, data: DataConfig):
    """Fill missing clothes/face masks of ``subjects`` from the RoI network."""
    missing = [s for s in subjects if s.face is None or s.clothes is None]
    if not missing:
        return
    with torch.no_grad():
        probs = predict_roi(tryon, stack(missing, "image"))
    for s, p in zip(missing, probs):
        if s.clothes is None:
            s.clothes = roi_region_mask(p[None], data.clothes_arms)[0]
        if s.face is None:
            s.face = roi_region_mask(p[None], data.face_neck_hair)[0]
        if s.foreground is None:
            s.foreground = roi_region_mask(p[None], range(1, N_LABELS))[0]


def stage1_batch(tryon: TryOnNetworks, models, targets, data: DataConfig):
    """Stage-I outputs for aligned lists of model and target subjects."""
    fill_masks(tryon, list(models) + list(targets), data)
    return run_tryon(tryon, stack(models, "image"), stack(models, "pose"), stack(targets, "image"),
                     stack(targets, "pose"), stack(targets, "face"), None, data.clothes_arms)


class Pipeline:
    """Frozen two-stage inference: stage I per frame, then memory refinement."""

    def __init__(self, tryon: TryOnNetworks, refine: RefineNetworks | None, data: DataConfig,
                 memory_cap: int = 0, chunk: int = 16):
        self.tryon = tryon.eval()
        self.refine = refine.eval() if refine is not None else None
        self.data = data
        self.memory_cap = memory_cap
        self.chunk = chunk

    @torch.no_grad()
    def stage1(self, model: Subject, targets) -> torch.Tensor:
        outs = []
        for i in range(0, len(targets), self.chunk):
            part = targets[i:i + self.chunk]
            outs.append(stage1_batch(self.tryon, [model] * len(part), part, self.data).output)
        return torch.cat(outs)

    @torch.no_grad()
    def run(self, model: Subject, targets, refine: bool = True) -> torch.Tensor:
        """Return the generated clip as a (T, 3, H, W) tensor."""
        first = self.stage1(model, targets)
        if not refine or self.refine is None:
            return first
        refined = refine_clip(self.refine, [f[None] for f in first], cap=self.memory_cap)
        return torch.cat(refined)

    @torch.no_grad()
    def subject_from_output(self, image: torch.Tensor, pose: torch.Tensor) -> Subject:
        """Wrap a generated frame as a subject; masks come from the RoI network."""
        s = Subject(image, pose)
        fill_masks(self.tryon, [s], self.data)
        return s
