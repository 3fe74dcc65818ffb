import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from vtryon.config import Config
from vtryon.core import load_split, make_toy_dataset
from vtryon.discriminators import DiscriminatorNets
from vtryon.memory import RefineNetworks
from vtryon.pipeline import prepare_clip
from vtryon.train import load_tryon, train_stage1, train_stage2
from vtryon.tryon import TryOnNetworks

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """5 clips x 12 frames at 64x48: 4 training clips and 1 held-out clip."""
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, n_clips=5, frames_per_clip=12, height=64, width=48, seed=0)
    return root


@pytest.fixture(scope="session")
def train_clips(toy_root, cfg):
    return [prepare_clip(c, cfg.data) for c in load_split(toy_root, "train")]


@pytest.fixture(scope="session")
def test_clips(toy_root, cfg):
    return [prepare_clip(c, cfg.data) for c in load_split(toy_root, "test")]


@dataclass
class TrainedRun:
    ckpt: Path
    metrics: object
    seconds: float


@pytest.fixture(scope="session")
def stage1_run(tmp_path_factory, train_clips, cfg):
    out = tmp_path_factory.mktemp("stage1")
    torch.manual_seed(cfg.train.seed)
    tryon, disc = TryOnNetworks(cfg.arch), DiscriminatorNets(cfg.arch)
    start = time.perf_counter()
    ckpt, metrics = train_stage1(tryon, disc, train_clips, cfg, out, iterations=200)
    return TrainedRun(ckpt, metrics, time.perf_counter() - start)


@pytest.fixture(scope="session")
def stage2_run(tmp_path_factory, stage1_run, train_clips, cfg):
    out = tmp_path_factory.mktemp("stage2")
    tryon = load_tryon(stage1_run.ckpt, cfg)
    torch.manual_seed(cfg.train.seed)
    refine, disc = RefineNetworks(cfg.arch), DiscriminatorNets(cfg.arch)
    start = time.perf_counter()
    ckpt, metrics = train_stage2(refine, disc, tryon, train_clips, cfg, out, iterations=200)
    return TrainedRun(ckpt, metrics, time.perf_counter() - start)
