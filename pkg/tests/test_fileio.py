import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpskdnn.dnn import FrameDataset, MlpConfig, init_model
from qpskdnn.dsp import IqBuffer
from qpskdnn.fileio import (
    FileFormatError,
    dataset_record_dtype,
    load_model,
    model_checksum,
    read_dataset,
    read_iq,
    save_model,
    sidecar_path,
    write_csv,
    write_dataset,
    write_iq,
    write_json,
)

FS = 2e6


def dataset(n=50, seed=0):
    rng = np.random.default_rng(seed)
    return FrameDataset(
        rng.standard_normal((n, 8)).astype(np.float32).astype(np.float64),
        rng.integers(0, 2, (n, 6)),
        rng.integers(0, 2, (n, 6)),
        np.arange(n) * 3,
        "test",
        {"snr_db": 4.0},
    )


class TestIq:
    def test_cf32_round_trip(self, tmp_path, rng):
        x = rng.standard_normal(1000) + 1j * rng.standard_normal(1000)
        p = tmp_path / "a.cf32"
        write_iq(p, IqBuffer(x, FS))
        y = read_iq(p)
        assert y.sample_rate_hz == FS
        np.testing.assert_allclose(y.samples, x.astype(np.complex64), rtol=1e-7)
        assert p.stat().st_size == 8000

    def test_ci8_round_trip(self, tmp_path):
        x = np.array([0.5 - 0.25j, -1 + 0.99j, 2 + 0j])
        p = tmp_path / "a.ci8"
        write_iq(p, IqBuffer(x, FS), "ci8")
        y = read_iq(p).samples
        np.testing.assert_allclose(y, [0.5 - 0.25j, -1 + 0.9921875j, 127 / 128 + 0j])
        assert json.loads(sidecar_path(p).read_text())["format"] == "ci8"

    def test_interleaving_order(self, tmp_path):
        p = tmp_path / "b.cf32"
        write_iq(p, IqBuffer(np.array([1 + 2j, 3 + 4j]), FS))
        np.testing.assert_array_equal(np.fromfile(p, "<f4"), [1, 2, 3, 4])

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.cf32"
        p.write_bytes(b"\0" * 12)
        with pytest.raises(FileFormatError):
            read_iq(p, sample_rate_hz=FS)

    def test_missing_rate(self, tmp_path):
        p = tmp_path / "r.cf32"
        p.write_bytes(b"\0" * 8)
        with pytest.raises(FileFormatError, match="sample rate"):
            read_iq(p)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(FileFormatError):
            write_iq(tmp_path / "x", IqBuffer(np.zeros(2), FS), "cs16")


class TestDataset:
    def test_round_trip(self, tmp_path):
        ds = dataset()
        p = tmp_path / "d.qpds"
        write_dataset(p, ds)
        back = read_dataset(p)
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.conventional, ds.conventional)
        np.testing.assert_array_equal(back.frame_index, ds.frame_index)
        assert back.split == "test" and back.metadata == {"snr_db": 4.0}

    def test_record_width(self):
        assert dataset_record_dtype(8, 6).itemsize == 38

    def test_layout(self, tmp_path):
        ds = dataset(2)
        p = tmp_path / "d.qpds"
        write_dataset(p, ds)
        raw = p.read_bytes()
        assert raw[:4] == b"QPDS"
        hlen = int.from_bytes(raw[6:10], "little")
        assert len(raw) == 10 + hlen + 2 * 38
        rec0 = raw[10 + hlen : 10 + hlen + 38]
        np.testing.assert_array_equal(np.frombuffer(rec0[:32], "<f4"), ds.inputs[0].astype(np.float32))
        assert rec0[32] == int("".join(map(str, ds.labels[0])) + "00", 2)

    def test_truncated(self, tmp_path):
        p = tmp_path / "d.qpds"
        write_dataset(p, dataset())
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FileFormatError, match="record section"):
            read_dataset(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.qpds"
        p.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(FileFormatError, match="magic"):
            read_dataset(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.qpds"
        p.write_bytes(b"")
        with pytest.raises(FileFormatError):
            read_dataset(p)

    @settings(max_examples=15)
    @given(n=st.integers(0, 40), n_bits=st.integers(1, 20), seed=st.integers(0, 1000))
    def test_round_trip_property(self, tmp_path_factory, n, n_bits, seed):
        rng = np.random.default_rng(seed)
        ds = FrameDataset(
            rng.standard_normal((n, 4)).astype(np.float32),
            rng.integers(0, 2, (n, n_bits)),
            rng.integers(0, 2, (n, n_bits)),
            rng.integers(0, 2**32, n, dtype=np.uint64).astype(np.int64),
        )
        p = tmp_path_factory.mktemp("ds") / "x.qpds"
        write_dataset(p, ds)
        back = read_dataset(p)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.conventional, ds.conventional)
        np.testing.assert_array_equal(back.frame_index, ds.frame_index)


class TestModel:
    def test_round_trip(self, tmp_path):
        m = init_model(MlpConfig(seed=7))
        p = tmp_path / "m.qpm"
        digest = save_model(p, m, {"note": 1})
        back = load_model(p)
        assert digest == model_checksum(back)
        assert back.config.layer_sizes == m.config.layer_sizes
        assert all(np.array_equal(a, b) for a, b in zip(m.params(), back.params()))

    def test_checksum_detects_corruption(self, tmp_path):
        p = tmp_path / "m.qpm"
        save_model(p, init_model(MlpConfig()))
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError, match="checksum"):
            load_model(p)

    def test_checksum_changes_with_weights(self):
        m = init_model(MlpConfig())
        c = m.copy()
        c.biases[0][0] += 1e-12
        assert model_checksum(m) != model_checksum(c)


class TestTextOutputs:
    def test_csv(self, tmp_path):
        p = tmp_path / "a.csv"
        write_csv(p, [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.0}])
        assert p.read_text().splitlines() == ["a,b", "1,2.5", "3,4.0"]

    def test_csv_header_only(self, tmp_path):
        p = tmp_path / "a.csv"
        write_csv(p, [], ["i", "q"])
        assert p.read_text().strip() == "i,q"

    def test_json_numpy(self, tmp_path):
        p = tmp_path / "a.json"
        write_json(p, {"x": np.int64(3), "y": np.float32(0.5), "z": np.arange(2)})
        assert json.loads(p.read_text()) == {"x": 3, "y": 0.5, "z": [0, 1]}

    def test_json_rejects_objects(self, tmp_path):
        with pytest.raises(TypeError):
            write_json(tmp_path / "b.json", {"x": object()})
