"""Stage-I and stage-II training loops, frame sampling and logging."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import Config, TrainConfig
from .discriminators import (DiscriminatorNets, correlation_map, matching_disc_loss,
                             multiscale_adv_loss, vanilla_adv_loss)
from .losses import (SoftCorrelationFlow, bce_loss, build_extractor, clip_flow_loss, l1_loss,
                     l2_loss, perceptual_loss, refine_paired_objective, refine_unpaired_objective,
                     tryon_objective)
from .memory import RefineNetworks, refine_clip
from .pipeline import ClipTensors, stack, stage1_batch
from .tryon import TryOnNetworks, predict_roi, roi_region_mask, run_tryon

log = logging.getLogger(__name__)


class ClipTooShort(ValueError):
    """Clip has fewer frames than one training sample needs; pick another."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    clip_id: str
    frame_indices: tuple
    paired: bool = True


def current_max_skip(epoch: int, cfg: TrainConfig) -> int:
    """Largest allowed gap between sampled frames; grows by ``skip_increment`` per period."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.skip_increment + cfg.skip_increment * (epoch // cfg.skip_epoch_period)


def sample_frames(clip, epoch: int, cfg: TrainConfig, rng: np.random.Generator, paired=True) -> SampleSpec:
    """Pick ``frames_per_sample`` increasing indices with gaps in [1, max_skip].

    Gaps are drawn uniformly, then the largest ones are shortened until the
    window fits the clip; the window start is uniform over what is left.
    """
    n = len(clip)
    k = cfg.frames_per_sample
    if n < k:
        raise ClipTooShort(f"clip {getattr(clip, 'clip_id', '?')!r} has {n} frames, need {k}")
    max_skip = max(1, min(current_max_skip(epoch, cfg), n - 1))
    gaps = rng.integers(1, max_skip + 1, size=k - 1)
    while gaps.sum() > n - 1:
        gaps[int(np.argmax(gaps))] -= 1
    start = int(rng.integers(0, n - int(gaps.sum())))
    idx = start + np.concatenate([[0], np.cumsum(gaps)])
    return SampleSpec(getattr(clip, "clip_id", ""), tuple(int(i) for i in idx), paired)


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


class MetricsLog:
    """Rows of floats keyed by column; written as CSV with the union of columns."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, row: dict):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def columns(self):
        cols = []
        for row in self.rows:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols

    def write_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k, "") for k in cols})


def _check_finite(row, path, stage, modules):
    bad = [k for k, v in row.items() if isinstance(v, float) and not math.isfinite(v)]
    if not bad:
        return
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    snap = path / f"{stage}_diverged.json"
    stats = {}
    for name, m in modules.items():
        for pname, p in m.named_parameters():
            stats[f"{name}.{pname}"] = {"finite": bool(torch.isfinite(p).all()),
                                         "absmax": float(p.detach().abs().max())}
    snap.write_text(json.dumps({"row": {k: str(v) for k, v in row.items()}, "params": stats}, indent=1))
    raise TrainingDiverged(f"{stage}: non-finite loss terms {bad} at iteration {row.get('iteration')}; "
                           f"snapshot at {snap}")


def _stage1_batch(clips, batch, rng):
    models, targets = [], []
    for _ in range(batch):
        clip = clips[int(rng.integers(len(clips)))]
        a, b = rng.integers(len(clip), size=2)
        models.append(clip.frames[int(a)])
        targets.append(clip.frames[int(b)])
    return models, targets


def train_stage1(tryon: TryOnNetworks, disc: DiscriminatorNets, clips: list[ClipTensors], cfg: Config,
                 out_dir, resume=None, iterations=None):
    """Paired stage-I training: model = one frame of a clip, target = another frame.

    Returns ``(checkpoint_path, MetricsLog)``. Discriminator and generator
    are stepped by separate optimizers, discriminator first.
    """
    tc, w = cfg.train, cfg.weights
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iterations = tc.stage1_iterations if iterations is None else iterations
    extractor = build_extractor(cfg.arch.perceptual)
    g_opt = make_optimizer(tryon.parameters(), tc)
    d_opt = make_optimizer(disc.vanilla_d.parameters(), tc)
    start = 0
    if resume is not None:
        archive = load_checkpoint(resume, cfg.arch)
        restore(archive, "tryon", tryon)
        restore(archive, "disc", disc)
        g_opt.load_state_dict(archive["optim"]["g"])
        d_opt.load_state_dict(archive["optim"]["d"])
        start = int(archive["meta"]["iteration"])
    metrics = MetricsLog()
    tryon.train()
    disc.train()
    ckpt = out_dir / "stage1.pt"

    def save(path, it):
        return save_checkpoint(path, cfg.arch, {"tryon": tryon, "disc": disc}, {"g": g_opt, "d": d_opt},
                               {"stage": 1, "iteration": it, "seed": tc.seed})

    for it in range(start, iterations):
        rng = np.random.default_rng([tc.seed, 1, it])
        models, targets = _stage1_batch(clips, tc.batch_stage1, rng)
        real = stack(targets, "image")
        out = run_tryon(tryon, stack(models, "image"), stack(models, "pose"), real, stack(targets, "pose"),
                        stack(targets, "face"), stack(targets, "clothes"))

        d_opt.zero_grad()
        d_loss, _ = vanilla_adv_loss(disc, real, out.output.detach())
        d_loss.backward()
        d_opt.step()

        g_opt.zero_grad()
        _, g_adv = vanilla_adv_loss(disc, real, out.output)
        l1 = l1_loss(out.warped, real) + l1_loss(out.replaced, real) + l1_loss(out.output, real)
        perc = perceptual_loss(extractor, out.warped, real) + perceptual_loss(extractor, out.output, real)
        onehot = stack(targets, "parsing")
        # channel permutation keeps the RoI net from keying on the few clothes colours seen
        perm = torch.from_numpy(np.stack([rng.permutation(3) for _ in targets]))
        shuffled = torch.gather(real, 1, perm[:, :, None, None].expand_as(real))
        bce = 0.5 * (bce_loss(out.roi, onehot) + bce_loss(predict_roi(tryon, shuffled), onehot))
        total = tryon_objective(g_adv, perc, l1, bce, w)
        total.backward()
        g_opt.step()

        row = {"iteration": it + 1, "l1": l1.item(), "perceptual": perc.item(), "adv_g": g_adv.item(),
               "bce": bce.item(), "adv_d": d_loss.item(), "total": total.item()}
        _check_finite(row, out_dir, "stage1", {"tryon": tryon, "disc": disc})
        metrics.append(row)
        if tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
            save(out_dir / f"stage1_{it + 1:06d}.pt", it + 1)
        if (it + 1) % 50 == 0:
            log.info("stage1 it %d l1 %.4f total %.4f", it + 1, row["l1"], row["total"])
    save(ckpt, iterations)
    metrics.write_csv(out_dir / "stage1_metrics.csv")
    return ckpt, metrics


def is_paired_step(it: int, tc: TrainConfig) -> bool:
    if not tc.unpaired:
        return True
    return it % (tc.paired_per_unpaired + 1) < tc.paired_per_unpaired


def _window(clips, tc, it, rng, paired):
    epoch = it // tc.iters_per_epoch
    order = rng.permutation(len(clips))
    for c in order:
        clip = clips[int(c)]
        try:
            spec = sample_frames(clip, epoch, tc, rng, paired)
        except ClipTooShort:
            continue
        if paired or clip.model is None:
            model = clip.frames[int(rng.integers(len(clip)))]
        else:
            model = clip.model
        return clip, spec, model
    raise ClipTooShort(f"no training clip has {tc.frames_per_sample} frames")


def _at(windows, t, field):
    """Field of the t-th sampled frame of every window, stacked over the batch."""
    return stack([clip.frames[spec.frame_indices[t]] for clip, spec, _ in windows], field)


def load_tryon(ckpt, cfg: Config) -> TryOnNetworks:
    archive = load_checkpoint(ckpt, cfg.arch)
    net = restore(archive, "tryon", TryOnNetworks(cfg.arch))
    net.eval().requires_grad_(False)
    return net


def train_stage2(refine: RefineNetworks, disc: DiscriminatorNets, tryon: TryOnNetworks,
                 clips: list[ClipTensors], cfg: Config, out_dir, iterations=None):
    """Hybrid stage-II training with stage I frozen.

    Paired steps reconstruct ground-truth frames (L1, L2, perceptual, flow,
    multi-scale GAN); unpaired steps use the clip's model image and the
    flow + matching-discriminator objective.
    """
    tc, w = cfg.train, cfg.weights
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iterations = tc.stage2_iterations if iterations is None else iterations
    tryon.eval().requires_grad_(False)
    extractor = build_extractor(cfg.arch.perceptual)
    flow_net = SoftCorrelationFlow(tc.flow_radius)
    g_opt = make_optimizer(refine.parameters(), tc)
    ms_opt = make_optimizer(disc.multiscale_d.parameters(), tc)
    md_opt = make_optimizer(disc.matching_d.parameters(), tc)
    metrics = MetricsLog()
    refine.train()
    disc.train()
    labels = cfg.data.clothes_arms

    for it in range(iterations):
        rng = np.random.default_rng([tc.seed, 2, it])
        paired = is_paired_step(it, tc)
        windows = [_window(clips, tc, it, rng, paired) for _ in range(tc.batch_stage2)]
        T = tc.frames_per_sample
        gt = [_at(windows, t, "image") for t in range(T)]
        with torch.no_grad():
            first = []
            for t in range(T):
                targets = [win[0].frames[win[1].frame_indices[t]] for win in windows]
                first.append(stage1_batch(tryon, [win[2] for win in windows], targets, cfg.data).output)
        fg = [_at(windows, t, "foreground") for t in range(T)]
        refined = refine_clip(refine, first, cap=tc.memory_cap)
        flow_l = clip_flow_loss(flow_net, refined, fg)
        row = {"iteration": it + 1, "kind": "paired" if paired else "unpaired"}

        if paired:
            real_all, fake_all = torch.cat(gt), torch.cat(refined)
            ms_opt.zero_grad()
            d_ms, _ = multiscale_adv_loss(disc, real_all, fake_all.detach())
            d_ms.backward()
            ms_opt.step()

            g_opt.zero_grad()
            _, g_ms = multiscale_adv_loss(disc, real_all, fake_all)
            l1 = l1_loss(fake_all, real_all)
            l2 = l2_loss(fake_all, real_all)
            perc = perceptual_loss(extractor, fake_all, real_all)
            total = refine_paired_objective(l1, l2, perc, flow_l, g_ms, w)
            total.backward()
            g_opt.step()
            row.update(l1=l1.item(), l2=l2.item(), perceptual=perc.item(), flow=flow_l.item(),
                       mgan_g=g_ms.item(), mgan_d=d_ms.item())
        else:
            # real pair: two different frames of the original video
            i, j = rng.choice(T, size=2, replace=False)
            real_a = gt[i]
            real_b = gt[j]
            mask_a = _at(windows, i, "clothes")
            mask_b = _at(windows, j, "clothes")
            model_img = stack([win[2] for win in windows], "image").repeat(T, 1, 1, 1)
            model_mask = stack([win[2] for win in windows], "clothes").repeat(T, 1, 1, 1)
            fake_all = torch.cat(refined)
            with torch.no_grad():
                fake_mask = roi_region_mask(predict_roi(tryon, fake_all), labels)

            md_opt.zero_grad()
            u_real = correlation_map(disc, real_a, mask_a, real_b, mask_b)
            u_fake_d = correlation_map(disc, fake_all.detach(), fake_mask, model_img, model_mask)
            d_match, _ = matching_disc_loss(u_real, u_fake_d)
            d_match.backward()
            md_opt.step()

            g_opt.zero_grad()
            u_fake = correlation_map(disc, fake_all, fake_mask, model_img, model_mask)
            _, g_match = matching_disc_loss(u_real.detach(), u_fake)
            total = refine_unpaired_objective(flow_l, g_match, w)
            total.backward()
            g_opt.step()
            row.update(flow=flow_l.item(), match_g=g_match.item(), match_d=d_match.item())
        row["total"] = total.item()
        _check_finite(row, out_dir, "stage2", {"refine": refine, "disc": disc})
        metrics.append(row)
        if (it + 1) % 50 == 0:
            log.info("stage2 it %d %s total %.4f", it + 1, row["kind"], row["total"])

    ckpt = save_checkpoint(out_dir / "stage2.pt", cfg.arch,
                           {"tryon": tryon, "refine": refine, "disc": disc},
                           {"g": g_opt, "ms": ms_opt, "md": md_opt},
                           {"stage": 2, "iteration": iterations, "seed": tc.seed})
    metrics.write_csv(out_dir / "stage2_metrics.csv")
    return ckpt, metrics
