"""FID and the cycle transfer score (CTS).

CTS transfers the clothes of a model image M onto a target video, then
transfers them back from the generated frames onto M, and measures the FID
between the original model images and the recovered ones.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, restore
from .config import Config
from .core import load_split
from .memory import RefineNetworks
from .pipeline import Pipeline, Subject, prepare_clip
from .tryon import TryOnNetworks

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
EIG_CLIP = 1e-10
PSD_TOL = 1e-6


class InsufficientSamplesError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise InsufficientSamplesError(f"need at least 2 samples, got {self.n}")
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"sigma has shape {self.sigma.shape}, expected {(d, d)}")


class RandomProjectionEmbedder:
    """Deterministic stand-in for a pretrained classifier.

    Images are average pooled to a small grid, then passed through a fixed
    random projection followed by tanh.
    """

    name = "random-projection"

    def __init__(self, grid=(4, 4), dim=32, seed=0):
        self.grid = tuple(grid)
        rng = np.random.default_rng(seed)
        fan_in = 3 * self.grid[0] * self.grid[1]
        self.weight = rng.standard_normal((fan_in, dim)) / np.sqrt(fan_in)
        self.bias = rng.standard_normal(dim) * 0.1

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        pooled = F.adaptive_avg_pool2d(images.detach().double().cpu(), self.grid)
        x = pooled.flatten(1).numpy()
        return np.tanh(2.0 * (x - 0.5) @ self.weight + self.bias)


class InceptionEmbedder:
    """Pooled 2048-d features of torchvision's ImageNet Inception-v3 (downloads weights)."""

    name = "inception-v3"

    def __init__(self, device="cpu"):
        from torchvision.models import Inception_V3_Weights, inception_v3

        net = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        net.fc = torch.nn.Identity()
        self.net = net.eval().to(device)
        self.device = device

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = F.interpolate(images.float().to(self.device), size=(299, 299), mode="bilinear", align_corners=False)
        mean = x.new_tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = x.new_tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.net((x - mean) / std).double().cpu().numpy()


def build_embedder(kind: str, seed: int = 0):
    if kind in ("random", "random-projection"):
        return RandomProjectionEmbedder(seed=seed)
    if kind in ("inception", "inception-v3"):
        return InceptionEmbedder()
    raise ValueError(f"unknown embedder {kind!r}")


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images[None]
    return torch.stack([_image_of(x) for x in images])


def _image_of(x) -> torch.Tensor:
    if isinstance(x, Subject):
        return x.image
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.array(x, dtype=np.float32)).permute(2, 0, 1)
    return x


def feature_stats(embedder, images) -> FeatureStats:
    """Sample mean and unbiased covariance of the embeddings of ``images``."""
    batch = _as_batch(images)
    if batch.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 images, got {batch.shape[0]}")
    feats = np.asarray(embedder(batch), dtype=np.float64)
    mu = feats.mean(0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2, feats.shape[0])


def _psd_sqrt(sigma: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericalError(f"{label} is not positive semi-definite: min eigenvalue {vals.min():.3e}")
    return (vecs * np.sqrt(np.where(vals > EIG_CLIP, vals, 0.0))) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 sqrt(S_a S_b)).

    sqrt(S_a S_b) has the same trace as sqrt(sqrt(S_a) S_b sqrt(S_a)), which
    is symmetric PSD and therefore safe to take through eigh.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    root_a = _psd_sqrt(a.sigma, "sigma_a")
    _psd_sqrt(b.sigma, "sigma_b")
    inner = root_a @ b.sigma @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericalError(f"sqrt(S_a) S_b sqrt(S_a) has eigenvalue {vals.min():.3e}")
    # the product's eigenvalues are squares of covariance scale, so only negative noise is dropped
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_sqrt)


@dataclass(frozen=True)
class TryOnMethod:
    """``transfer(source, target)`` dresses ``target`` in the clothes of ``source``."""

    name: str
    transfer: Callable[[Any, Any], Any]

    def __call__(self, source, target):
        return self.transfer(source, target)


@dataclass
class CTSResult:
    cts: float
    cts_l1: float
    n_pairs: int
    skipped: list


def cts_details(method: TryOnMethod, embedder, pairs) -> CTSResult:
    if len(pairs) < 2:
        raise InsufficientSamplesError(f"cts needs at least 2 pairs, got {len(pairs)}")
    originals, recovered, skipped = [], [], []
    for k, (model, target) in enumerate(pairs):
        try:
            forward = method(model, target)
            back = method(forward, model)
        except Exception as exc:  # a failing pair is skipped and reported
            log.warning("cts pair %d failed: %s", k, exc)
            skipped.append({"pair": k, "error": f"{type(exc).__name__}: {exc}"})
            continue
        originals.append(_image_of(model))
        recovered.append(_image_of(back))
    if len(originals) < 2:
        raise InsufficientSamplesError(f"only {len(originals)} cts pairs succeeded")
    a, b = torch.stack(originals), torch.stack(recovered)
    score = fid(feature_stats(embedder, a), feature_stats(embedder, b))
    l1 = float((a.double() - b.double()).abs().mean())
    return CTSResult(score, l1, len(originals), skipped)


def cts(method: TryOnMethod, embedder, pairs) -> float:
    return cts_details(method, embedder, pairs).cts


def identity_method() -> TryOnMethod:
    return TryOnMethod("identity", lambda source, target: target)


def pipeline_method(pipeline: Pipeline, refine: bool, name: str) -> TryOnMethod:
    """Wrap the two-stage pipeline; a video source contributes its middle frame."""

    def transfer(source, target):
        if isinstance(source, (list, tuple)):
            source = source[len(source) // 2]
        targets = list(target) if isinstance(target, (list, tuple)) else [target]
        frames = pipeline.run(source, targets, refine=refine)
        out = [pipeline.subject_from_output(f, t.pose) for f, t in zip(frames, targets)]
        return out if isinstance(target, (list, tuple)) else out[0]

    return TryOnMethod(name, transfer)


def load_networks(ckpt, cfg: Config):
    archive = load_checkpoint(ckpt, cfg.arch)
    tryon = restore(archive, "tryon", TryOnNetworks(cfg.arch)).eval()
    refine = None
    if any(k.startswith("refine.") for k in archive["params"]):
        refine = restore(archive, "refine", RefineNetworks(cfg.arch)).eval()
    return tryon, refine, archive


def evaluate_checkpoint(ckpt, dataset, embedder, cfg: Config, split="test", out_dir=None) -> dict:
    """FID (generated vs real test frames) and CTS for stage I alone and the full pipeline.

    CTS pairs every model image in the dataset with every clip of ``split``.
    """
    torch.manual_seed(cfg.train.seed)
    tryon, refine, archive = load_networks(ckpt, cfg)
    test = [prepare_clip(c, cfg.data) for c in load_split(dataset, split)]
    if not test:
        raise InsufficientSamplesError(f"split {split!r} of {dataset} is empty")
    models = [c.model for c in (prepare_clip(c, cfg.data) for c in load_split(dataset, None))
              if c.model is not None]
    pipe = Pipeline(tryon, refine, cfg.data, cfg.train.memory_cap)
    methods = [("stage1", False)] + ([("full", True)] if refine is not None else [])
    real = torch.cat([torch.stack([f.image for f in c.frames]) for c in test])
    real_stats = feature_stats(embedder, real)
    rows = []
    for name, use_refine in methods:
        method = pipeline_method(pipe, use_refine, name)
        generated = torch.cat([pipe.run(c.model, c.frames, refine=use_refine) for c in test if c.model is not None])
        score = fid(feature_stats(embedder, generated), real_stats)
        pairs = [(m, c.frames) for c in test for m in models]
        cycle = cts_details(method, embedder, pairs)
        rows.append({"method": name, "embedder": getattr(embedder, "name", type(embedder).__name__),
                     "fid": score, "cts": cycle.cts, "cts_l1": cycle.cts_l1, "n_pairs": cycle.n_pairs,
                     "skipped": cycle.skipped, "reverse_source": "middle_frame"})
    report = {"schema": REPORT_SCHEMA, "checkpoint_digest": archive["arch_digest"], "split": split,
              "n_test_clips": len(test), "device": "cpu", "methods": rows}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: dict, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "metric", "value"])
        for row in report["methods"]:
            for metric in ("fid", "cts", "cts_l1"):
                writer.writerow([row["method"], metric, f"{row[metric]:.6f}"])
    return out_dir


def validate_report(report: dict):
    """Raise ValueError unless ``report`` has the evaluation report schema."""
    if report.get("schema") != REPORT_SCHEMA:
        raise ValueError("unexpected report schema")
    if not report.get("methods"):
        raise ValueError("report has no methods")
    for row in report["methods"]:
        for key, tp in (("method", str), ("embedder", str), ("fid", float), ("cts", float),
                        ("cts_l1", float), ("n_pairs", int), ("skipped", list), ("reverse_source", str)):
            if not isinstance(row.get(key), tp):
                raise ValueError(f"report field {key!r} missing or not {tp.__name__}")
            if tp is float and not np.isfinite(row[key]):
                raise ValueError(f"report field {key!r} is not finite")


def format_table(report: dict) -> str:
    lines = [f"{'method':<10}{'FID':>12}{'CTS':>12}{'CTS-L1':>10}{'pairs':>7}"]
    for r in report["methods"]:
        lines.append(f"{r['method']:<10}{r['fid']:>12.4f}{r['cts']:>12.4f}{r['cts_l1']:>10.4f}{r['n_pairs']:>7d}")
    return "\n".join(lines)


def directory_images(path) -> torch.Tensor:
    from .core import read_image

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png images in {path}")
    return torch.stack([torch.from_numpy(np.array(read_image(f), dtype=np.float32)).permute(2, 0, 1)
                        for f in files])


__all__ = ["FeatureStats", "TryOnMethod", "CTSResult", "RandomProjectionEmbedder", "InceptionEmbedder",
           "InsufficientSamplesError", "NumericalError", "CheckpointError", "feature_stats", "fid", "cts",
           "cts_details", "identity_method", "pipeline_method", "evaluate_checkpoint", "build_embedder",
           "validate_report", "format_table", "directory_images", "write_report", "load_networks"]
