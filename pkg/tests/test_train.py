import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import vtryon.train as train_mod
from vtryon.config import TrainConfig
from vtryon.discriminators import DiscriminatorNets
from vtryon.memory import RefineNetworks
from vtryon.train import (ClipTooShort, TrainingDiverged, current_max_skip, is_paired_step, load_tryon,
                          make_optimizer, sample_frames, train_stage1, train_stage2)
from vtryon.tryon import TryOnNetworks


class FakeClip:
    def __init__(self, n, clip_id="fake"):
        self.n = n
        self.clip_id = clip_id

    def __len__(self):
        return self.n


@pytest.fixture(scope="module")
def small(cfg):
    return cfg.replace(batch_stage1=2, batch_stage2=1, checkpoint_every=2)


def _stage1(cfg, clips, out, iterations, resume=None):
    torch.manual_seed(cfg.train.seed)
    tryon, disc = TryOnNetworks(cfg.arch), DiscriminatorNets(cfg.arch)
    return train_stage1(tryon, disc, clips, cfg, out, resume=resume, iterations=iterations)


def _stage2(cfg, ckpt, clips, out, iterations):
    tryon = load_tryon(ckpt, cfg)
    torch.manual_seed(cfg.train.seed)
    return train_stage2(RefineNetworks(cfg.arch), DiscriminatorNets(cfg.arch), tryon, clips, cfg, out,
                        iterations=iterations)


# --- schedule ---------------------------------------------------------------------

def test_max_skip_values():
    tc = TrainConfig()
    assert [current_max_skip(e, tc) for e in (0, 19, 20, 39, 40)] == [5, 5, 10, 10, 15]
    with pytest.raises(ValueError):
        current_max_skip(-1, tc)


@given(st.integers(0, 500))
def test_max_skip_monotone_and_periodic(epoch):
    tc = TrainConfig()
    assert current_max_skip(epoch + 1, tc) >= current_max_skip(epoch, tc)
    base = epoch - epoch % tc.skip_epoch_period
    assert current_max_skip(epoch, tc) == current_max_skip(base, tc)


@settings(max_examples=1000, deadline=None)
@given(st.integers(5, 60), st.integers(0, 100), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_sample_frames_invariants(n, epoch, k, seed):
    tc = TrainConfig(frames_per_sample=k)
    if n < k:
        return
    spec = sample_frames(FakeClip(n), epoch, tc, np.random.default_rng(seed))
    idx = np.array(spec.frame_indices)
    assert len(idx) == k
    assert idx.min() >= 0 and idx.max() < n
    gaps = np.diff(idx)
    assert np.all(gaps >= 1)
    assert np.all(gaps <= min(current_max_skip(epoch, tc), n - 1))
    again = sample_frames(FakeClip(n), epoch, tc, np.random.default_rng(seed))
    assert again == spec


def test_sample_frames_forced_window():
    spec = sample_frames(FakeClip(5), 0, TrainConfig(), np.random.default_rng(0))
    assert spec.frame_indices == (0, 1, 2, 3, 4)
    with pytest.raises(ClipTooShort):
        sample_frames(FakeClip(4), 0, TrainConfig(), np.random.default_rng(0))


def test_paired_alternation():
    tc = TrainConfig()
    for start in (0, 7, 100):
        steps = [is_paired_step(it, tc) for it in range(start, start + 20)]
        assert sum(steps) == 10
    assert all(is_paired_step(it, TrainConfig(unpaired=False)) for it in range(10))


def test_optimizer_settings():
    opt = make_optimizer([torch.nn.Parameter(torch.zeros(1))], TrainConfig())
    group = opt.param_groups[0]
    assert isinstance(opt, torch.optim.Adam)
    assert group["lr"] == 2e-4 and group["betas"] == (0.5, 0.999)


# --- stage I loop -----------------------------------------------------------------

def test_stage1_log_and_determinism(small, train_clips, tmp_path):
    ckpt, a = _stage1(small, train_clips, tmp_path / "a", 3)
    _, b = _stage1(small, train_clips, tmp_path / "b", 3)
    assert len(a) == 3
    assert [r["iteration"] for r in a.rows] == [1, 2, 3]
    assert a.rows == b.rows
    with open(tmp_path / "a" / "stage1_metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert ckpt.exists() and (tmp_path / "a" / "stage1_000002.pt").exists()


def test_stage1_resume_reproduces_metrics(small, train_clips, tmp_path):
    _, full = _stage1(small, train_clips, tmp_path / "full", 4)
    _, resumed = _stage1(small, train_clips, tmp_path / "resumed", 4,
                         resume=tmp_path / "full" / "stage1_000002.pt")
    assert resumed.rows == full.rows[2:]


def test_stage1_nan_aborts_with_snapshot(small, train_clips, tmp_path, monkeypatch):
    real_l1 = train_mod.l1_loss
    monkeypatch.setattr(train_mod, "l1_loss", lambda a, b: real_l1(a, b) * float("nan"))
    with pytest.raises(TrainingDiverged):
        _stage1(small, train_clips, tmp_path, 2)
    assert (tmp_path / "stage1_diverged.json").exists()


# --- stage II loop ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_stage1(small, train_clips, tmp_path_factory):
    ckpt, _ = _stage1(small, train_clips, tmp_path_factory.mktemp("tiny1"), 2)
    return ckpt


def test_stage2_alternates_and_is_deterministic(small, tiny_stage1, train_clips, tmp_path):
    _, a = _stage2(small, tiny_stage1, train_clips, tmp_path / "a", 4)
    _, b = _stage2(small, tiny_stage1, train_clips, tmp_path / "b", 4)
    assert a.rows == b.rows
    assert [r["kind"] for r in a.rows] == ["paired", "unpaired"] * 2
    assert "match_d" in a.columns() and "mgan_d" in a.columns()
    assert (tmp_path / "a" / "stage2.pt").exists()


def test_stage2_freezes_stage1(small, tiny_stage1, train_clips, tmp_path):
    before = load_tryon(tiny_stage1, small).state_dict()
    tryon = load_tryon(tiny_stage1, small)
    torch.manual_seed(0)
    train_stage2(RefineNetworks(small.arch), DiscriminatorNets(small.arch), tryon, train_clips, small, tmp_path,
                 iterations=2)
    after = tryon.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_stage2_without_unpaired_stream(small, tiny_stage1, train_clips, tmp_path):
    cfg = small.replace(unpaired=False)
    _, log = _stage2(cfg, tiny_stage1, train_clips, tmp_path, 2)
    assert {r["kind"] for r in log.rows} == {"paired"}
    assert not {"match_g", "match_d"} & set(log.columns())
