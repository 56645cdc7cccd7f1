import math

import pytest

from qpskdnn.config import ConfigError, ExperimentConfig, SweepConfig, config_hash, dump_config, load_config


def test_defaults():
    cfg = load_config()
    assert cfg.frame.frame_len_symbols == 4
    assert cfg.channel.snr_db == 19.0
    assert cfg.frames_per_point == 16667


def test_yaml_round_trip(tmp_path):
    cfg = load_config()
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert config_hash(load_config(p)) == config_hash(cfg)


def test_inf_snr_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("channel:\n  snr_db: inf\n")
    cfg = load_config(p)
    assert math.isinf(cfg.channel.snr_db)
    assert cfg.channel.cfo_hz == 1000.0  # other channel keys keep their defaults
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_partial_section(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  max_epochs: 3\nseed: 9\n")
    cfg = load_config(p)
    assert cfg.train.max_epochs == 3 and cfg.train.batch_size == 64 and cfg.seed == 9


def test_overrides():
    assert load_config(None, {"seed": 5}).seed == 5


@pytest.mark.parametrize(
    "text,match",
    [
        ("bogus: 1\n", "unknown key"),
        ("train:\n  lr_typo: 1\n", "unknown key"),
        ("channel:\n  snr: 3\n", "unknown key"),
        ("mlp:\n  layer_sizes: [8, 10, 5]\n", "do not fit"),
        ("bits_per_point: 100\n", "bits_per_point"),
        ("sweep:\n  axis: power\n", "axis"),
        ("- 1\n- 2\n", "mapping"),
        ("a: [\n", "cannot parse"),
        ("channel:\n  timing_offset_samples: 2\n", "timing_offset"),
    ],
)
def test_invalid(tmp_path, text, match):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_hash_sensitive():
    a = ExperimentConfig()
    assert config_hash(a) != config_hash(a.replace(seed=1))
    assert len(config_hash(a)) == 64


def test_sweep_points_gain_axis():
    pts = SweepConfig(axis="gain", points=(6, 11, 15)).snr_points()
    assert [s for s, _ in pts] == pytest.approx([10, 15, 19])


def test_sweep_points_snr_axis():
    pts = SweepConfig(points=(19,)).snr_points()
    assert pts[0] == pytest.approx((19.0, 15.0))
