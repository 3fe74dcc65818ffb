import pytest
import torch

from vtryon.checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from vtryon.config import ArchConfig
from vtryon.discriminators import DiscriminatorNets
from vtryon.tryon import TryOnNetworks


@pytest.fixture
def saved(tmp_path):
    torch.manual_seed(0)
    net, disc = TryOnNetworks(ArchConfig()), DiscriminatorNets(ArchConfig())
    path = save_checkpoint(tmp_path / "ck.pt", ArchConfig(), {"tryon": net, "disc": disc}, meta={"stage": 1})
    return path, net, disc


def test_round_trip(saved):
    path, net, disc = saved
    archive = load_checkpoint(path, ArchConfig())
    assert archive["meta"]["stage"] == 1
    torch.manual_seed(1)
    other = restore(archive, "tryon", TryOnNetworks(ArchConfig()))
    for (k, a), (_, b) in zip(net.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), k
    d2 = restore(archive, "disc", DiscriminatorNets(ArchConfig()))
    assert torch.equal(d2.matching_d.scale, disc.matching_d.scale)


def test_parameter_count_fixed_by_arch():
    count = lambda arch: sum(p.numel() for p in TryOnNetworks(arch).parameters())
    assert count(ArchConfig()) == count(ArchConfig())
    assert count(ArchConfig(fit_widths=(8, 16, 32))) != count(ArchConfig())


def test_tampered_arch_is_detected(saved, tmp_path):
    path, *_ = saved
    archive = torch.load(path, weights_only=True)
    archive["arch"]["kv_width"] = 128
    torch.save(archive, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "bad.pt")


def test_architecture_mismatch(saved):
    path, *_ = saved
    with pytest.raises(CheckpointError, match="differs"):
        load_checkpoint(path, ArchConfig(kv_width=32))


def test_foreign_files(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_missing_subnet(saved):
    path, *_ = saved
    with pytest.raises(CheckpointError):
        restore(load_checkpoint(path), "refine", torch.nn.Module())
