import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qpskdnn.cli import EXIT_ALIGN, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from qpskdnn.fileio import read_dataset, read_iq

SMALL_YAML = """
seed: 7
pipeline_frames: 1200
bits_per_point: 10000
retransmit_limit: 1
channel:
  delay_samples: 4000
  lockin_prefix_samples: 2000
dataset:
  train_frames: 1500
  test_frames: 400
train:
  max_epochs: 3
sweep:
  points: [8, 19]
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL_YAML)
    return p


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_dry_run_prints_config(cfg_file, capsys):
    assert run("pipeline", "--config", cfg_file, "--dry-run") == EXIT_OK
    out = capsys.readouterr().out
    assert "pipeline_frames: 1200" in out and "# config hash" in out


def test_seed_override(cfg_file, capsys):
    run("pipeline", "--config", cfg_file, "--seed", 99, "--dry-run")
    assert "seed: 99" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("nonsense_key: 1\n")
    assert run("pipeline", "--config", p) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("pipeline", "--config", tmp_path / "nope.yaml") == EXIT_CONFIG


def test_pipeline_outputs(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert run("pipeline", "--config", cfg_file, "--out", out, "--save-iq") == EXIT_OK
    rep = json.loads((out / "alignment.json").read_text())
    assert rep["conventional_ber"] == 0.0 and rep["frames_aligned"] > 900
    assert len(read_dataset(out / "pipeline.qpds")) == rep["frames_aligned"]
    assert len(read_iq(out / "rx.cf32")) > 4000


def test_alignment_failure_exit_code(cfg_file, tmp_path, capsys):
    assert run("pipeline", "--config", cfg_file, "--out", tmp_path, "--snr", -15, "--frames", 400) == EXIT_ALIGN
    assert "alignment failed" in capsys.readouterr().err


def test_dataset_train_sweep_chain(cfg_file, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("dataset", "--config", cfg_file, "--out", out) == EXIT_OK
    assert len(read_dataset(out / "train.qpds")) == 1500
    assert len(read_dataset(out / "test.qpds")) == 400
    assert run("train", "--config", cfg_file, "--out", out) == EXIT_OK
    hist = read_csv(out / "history.csv")
    assert 1 <= len(hist) <= 3 and "val_loss" in hist[0]
    assert run("ber-sweep", "--config", cfg_file, "--out", out) == EXIT_OK
    rows = read_csv(out / "ber.csv")
    assert [float(r["snr_db"]) for r in rows] == [8.0, 19.0]
    report = json.loads((out / "ber.json").read_text())
    assert report["model_sha256"] and report["config"]["seed"] == 7
    assert "test BER" in capsys.readouterr().out


def test_ber_sweep_point_override(cfg_file, tmp_path):
    out = tmp_path / "o"
    run("dataset", "--config", cfg_file, "--out", out, "--train-frames", 1200, "--test-frames", 0)
    run("train", "--config", cfg_file, "--out", out)
    assert run("ber-sweep", "--config", cfg_file, "--out", out, "--points", 12, "--bits", 12000) == EXIT_OK
    rows = read_csv(out / "ber.csv")
    assert len(rows) == 1 and int(rows[0]["bits_evaluated"]) == 12000


def test_missing_model_is_io_error(cfg_file, tmp_path):
    assert run("ber-sweep", "--config", cfg_file, "--out", tmp_path) == EXIT_IO


def test_spectrum_live_with_lpf(cfg_file, tmp_path):
    assert run("spectrum", "--config", cfg_file, "--out", tmp_path, "--lpf", "--segment", 1024) == EXIT_OK
    rows = read_csv(tmp_path / "spectrum.csv")
    assert len(rows) == 1024 and set(rows[0]) == {"freq_hz", "power_db", "power_db_lpf"}


def test_spectrum_from_file_too_short(tmp_path):
    p = tmp_path / "s.cf32"
    np.zeros(200, dtype="<f4").tofile(p)
    assert run("spectrum", "--input", p, "--sample-rate", 2e6, "--out", tmp_path) == EXIT_IO


def test_constellation(cfg_file, tmp_path):
    assert run("constellation", "--config", cfg_file, "--out", tmp_path, "--frames", 800) == EXIT_OK
    rows = read_csv(tmp_path / "constellation.csv")
    assert list(rows[0]) == ["i", "q", "slot_type"]
    assert sum(r["slot_type"] == "pilot" for r in rows) * 4 == len(rows)


def test_constellation_from_dataset(cfg_file, tmp_path):
    run("pipeline", "--config", cfg_file, "--out", tmp_path)
    assert run("constellation", "--dataset", tmp_path / "pipeline.qpds", "--out", tmp_path) == EXIT_OK
    assert len(read_csv(tmp_path / "constellation.csv")) == 4 * len(read_dataset(tmp_path / "pipeline.qpds"))


def test_iq_inspect_and_convert(tmp_path, capsys):
    p = tmp_path / "x.cf32"
    np.array([0.5, -0.5, 0.25, 0.0], dtype="<f4").tofile(p)
    assert run("iq", "inspect", p, "--sample-rate", 1e6) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["samples"] == 2 and info["sample_rate_hz"] == 1e6
    q = tmp_path / "y.ci8"
    assert run("iq", "convert", p, q, "--to", "ci8", "--sample-rate", 1e6) == EXIT_OK
    np.testing.assert_array_equal(np.fromfile(q, np.int8), [64, -64, 32, 0])


def test_iq_truncated(tmp_path):
    p = tmp_path / "x.cf32"
    p.write_bytes(b"\0" * 6)
    assert run("iq", "inspect", p, "--sample-rate", 1e6) == EXIT_IO


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "qpskdnn", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "0.1.0"
