import pytest

from vtryon.config import Config, ConfigError, LossWeights, TrainConfig, arch_digest, load_config


def test_defaults_mirror_published_settings():
    cfg = Config()
    assert (cfg.train.learning_rate, cfg.train.adam_beta1, cfg.train.adam_beta2) == (2e-4, 0.5, 0.999)
    assert (cfg.train.batch_stage1, cfg.train.batch_stage2, cfg.train.frames_per_sample) == (8, 2, 5)
    w = cfg.weights
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (0.01, 1, 1, 0.01)
    assert (w.gamma1, w.gamma2, w.gamma3, w.gamma4, w.gamma5) == (1, 1, 0.1, 0.1, 1)
    assert (w.beta1, w.beta2) == (0.1, 1)


def test_file_parse_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nlearning_rate = 1e-3\nunpaired = false\nenc_widths = 8, 16, 32\n"
                    "perceptual = identity  # trailing\n")
    cfg = load_config(path, ["seed=4", "height=32"])
    assert cfg.train.learning_rate == 1e-3 and cfg.train.unpaired is False
    assert cfg.arch.enc_widths == (8, 16, 32) and cfg.arch.perceptual == "identity"
    assert cfg.train.seed == 4
    assert cfg.data.height == 32 and cfg.arch.height == 32


def test_text_round_trip(tmp_path):
    cfg = Config().replace(seed=9, gamma3=0.5, clothes_arms=(5,))
    (tmp_path / "c.txt").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.txt") == cfg


@pytest.mark.parametrize("bad", [["nope=1"], ["seed"], ["seed=abc"], ["unpaired=maybe"],
                                 ["learning_rate=2"], ["batch_stage1=0"], ["gamma1=-1"]])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_bad_line(tmp_path):
    (tmp_path / "c.txt").write_text("just words\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.txt")


def test_validation():
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        LossWeights(beta2=float("inf"))


def test_arch_digest_tracks_arch_only():
    a = Config()
    assert arch_digest(a.arch) == arch_digest(a.replace(seed=3).arch)
    assert arch_digest(a.arch) != arch_digest(a.replace(kv_width=32).arch)
