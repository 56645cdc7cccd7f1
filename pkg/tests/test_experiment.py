import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpskdnn.channel import ChannelConfig
from qpskdnn.config import DatasetConfig, ExperimentConfig, SweepConfig
from qpskdnn.dnn import MlpConfig, TrainConfig, init_model
from qpskdnn.experiment import (
    BerReport,
    RetransmitExhausted,
    ber_point,
    ber_sweep,
    build_filters,
    constellation_rows,
    derive_seeds,
    frame_margin,
    frames_to_dataset,
    genie_ber,
    make_datasets,
    run_once,
    run_pipeline,
    spectrum_rows,
    tx_tail_samples,
)

SMALL = ExperimentConfig(
    channel=ChannelConfig(snr_db=19.0, cfo_hz=1000.0, phase_rad=1.0, timing_offset_samples=0.5, delay_samples=3000, lockin_prefix_samples=2000),
    pipeline_frames=1500,
    bits_per_point=10_000,
    dataset=DatasetConfig(train_frames=1500, test_frames=500),
    train=TrainConfig(max_epochs=3),
    sweep=SweepConfig(points=(6.0, 19.0)),
)


def test_seed_derivation():
    a = derive_seeds(1, 0, 2, 0)
    assert a == derive_seeds(1, 0, 2, 0)
    assert len({a, derive_seeds(1, 0, 2, 1), derive_seeds(1, 1, 2, 0), derive_seeds(2, 0, 2, 0), derive_seeds(1, 0, 3, 0)}) == 5


def test_tail_flushes_chain():
    rrc, lpf = build_filters(SMALL)
    assert tx_tail_samples(SMALL, rrc, lpf) == 2 * 89 + lpf.num_taps + 15 * 8
    assert tx_tail_samples(SMALL.replace(modem=dataclasses.replace(SMALL.modem, tx_tail_samples=7)), rrc, lpf) == 7


def test_last_frame_survives():
    run = run_pipeline(SMALL, 800)
    assert run.frames.tx_frame_index[-1] == 799


def test_frame_margin():
    assert frame_margin(0) == 200
    assert frame_margin(10_000) == 400


@settings(max_examples=5)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(300, 900))
def test_loopback_property(seed, n):
    rrc, lpf = build_filters(SMALL)
    run = run_once(SMALL, n, seed, ChannelConfig(), (rrc, lpf))
    f = run.frames
    np.testing.assert_array_equal(f.labels, f.conventional)
    assert np.all(np.diff(f.tx_frame_index) == 1)
    assert f.tx_frame_index[-1] == n - 1
    # frames lost while the loops settle fit inside the transmit margin
    assert n - len(f) <= frame_margin(n)


def test_pipeline_reports_attempts():
    run = run_pipeline(SMALL)
    assert run.attempts == 1 and not run.failures
    assert run.alignment.rotation_k in range(4)


def test_retransmit_exhausted():
    # a delay larger than the stream can hold never aligns
    cfg = SMALL.replace(retransmit_limit=1)
    ch = dataclasses.replace(SMALL.channel, snr_db=-10.0)
    with pytest.raises(RetransmitExhausted) as e:
        run_pipeline(cfg, 400, ch)
    assert len(e.value.failures) == 2


def test_frames_to_dataset_float32():
    run = run_pipeline(SMALL, 600)
    ds = frames_to_dataset(run.frames, 100, "test", offset=1000)
    assert len(ds) == 100
    np.testing.assert_array_equal(ds.inputs, ds.inputs.astype(np.float32))
    assert ds.frame_index[0] == 1000 + run.frames.tx_frame_index[0]


def test_make_datasets_disjoint():
    train, test = make_datasets(SMALL)
    assert len(train) == 1500 and len(test) == 500
    assert not set(train.frame_index) & set(test.frame_index)
    assert [r["snr_db"] for r in train.metadata["runs"]] == [2.0, 4.0, 19.0]


def test_ber_sweep_same_frames_and_deterministic():
    model = init_model(MlpConfig(seed=1))
    a = ber_sweep(SMALL, model)
    b = ber_sweep(SMALL, model)
    assert [p.frames_digest for p in a.points] == [p.frames_digest for p in b.points]
    assert [(p.conventional_ber, p.dnn_ber) for p in a.points] == [(p.conventional_ber, p.dnn_ber) for p in b.points]
    assert all(p.bits_evaluated == SMALL.frames_per_point * 6 for p in a.points)
    d = a.to_dict()
    assert d["root_seed"] == SMALL.seed and len(d["points"]) == 2
    assert set(a.rows()[0]) >= {"snr_db", "g_r_db", "conventional_ber", "dnn_ber", "bits_evaluated", "dropped"}


def test_ber_sweep_worker_count_irrelevant():
    model = init_model(MlpConfig(seed=1))
    a = ber_sweep(SMALL, model)
    b = ber_sweep(SMALL.replace(workers=2), model)
    assert [(p.conventional_ber, p.dnn_ber) for p in a.points] == [(p.conventional_ber, p.dnn_ber) for p in b.points]


def test_ber_point_dropped():
    cfg = SMALL.replace(retransmit_limit=0)
    p = ber_point(cfg, init_model(MlpConfig()), 0, -10.0, 0.0)
    assert p.dropped and np.isnan(p.conventional_ber)
    assert p.row()["dropped"] == 1
    # NaN serialises as null
    assert BerReport([p], {}, "h", 0).to_dict()["points"][0]["dnn_ber"] is None


def test_ber_sweep_layer_mismatch():
    with pytest.raises(ValueError):
        ber_sweep(SMALL, init_model(MlpConfig((8, 5, 6))))


def test_genie_ber_noiseless():
    assert genie_ber(60.0, 20_000, 1) == 0.0


def test_spectrum_and_constellation_rows():
    run = run_pipeline(SMALL, 600)
    rows = constellation_rows(run.frames, 0)
    assert len(rows) == 4 * len(run.frames)
    assert sum(r["slot_type"] == "pilot" for r in rows) == len(run.frames)
    _, lpf = build_filters(SMALL)
    srows = spectrum_rows(run.rx, lpf, 1024)
    assert len(srows) == 1024 and "power_db_lpf" in srows[0]


def test_conventional_ber_trend():
    cfg = SMALL.replace(sweep=SweepConfig(points=(0.0, 1.0, 2.0, 4.0, 8.0)), bits_per_point=30_000, retransmit_limit=5)
    report = ber_sweep(cfg, init_model(MlpConfig()))
    pts = [p for p in report.points if not p.dropped]
    assert len(pts) >= 3
    for a, b in zip(pts[:-1], pts[1:]):
        # non-increasing within 3 binomial sigma
        sigma = np.sqrt(max(a.conventional_ber, 1 / a.bits_evaluated) / a.bits_evaluated + max(b.conventional_ber, 1 / b.bits_evaluated) / b.bits_evaluated)
        assert b.conventional_ber <= a.conventional_ber + 3 * sigma


def test_report_identical_frames_flag():
    report = ber_sweep(SMALL, init_model(MlpConfig()))
    d = report.to_dict()
    assert d["identical_frames"] is True and d["config_hash"]
    assert all(p["frames_digest"] for p in d["points"])
