import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpskdnn.dsp import design_rrc
from qpskdnn.sync import genie_sample
from qpskdnn.transmitter import (
    CONSTELLATION,
    FrameConfig,
    demap_qpsk,
    frame_symbols,
    generate_bits,
    insert_pilots,
    map_qpsk,
    pulse_shape,
    strip_pilots,
    transmit_frames,
)

FS = 2e6
RRC = design_rrc(8)
bit_lists = st.lists(st.integers(0, 1), min_size=0, max_size=120).filter(lambda b: len(b) % 2 == 0)


class TestMapping:
    def test_gray_table(self):
        s = 1 / np.sqrt(2)
        got = map_qpsk([0, 0, 0, 1, 1, 0, 1, 1])
        np.testing.assert_allclose(got, [s + 1j * s, -s + 1j * s, s - 1j * s, -s - 1j * s])

    def test_adjacent_points_differ_in_one_bit(self):
        for a in range(4):
            for b in range(4):
                if a != b and np.isclose(abs(CONSTELLATION[a] - CONSTELLATION[b]), np.sqrt(2)):
                    assert bin(a ^ b).count("1") == 1

    def test_unit_energy(self):
        np.testing.assert_allclose(np.abs(CONSTELLATION), 1.0)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            map_qpsk([0, 1, 1])

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            map_qpsk([0, 2])

    def test_empty(self):
        assert len(map_qpsk([])) == 0

    @given(bits=bit_lists)
    def test_demap_inverts_map(self, bits):
        np.testing.assert_array_equal(demap_qpsk(map_qpsk(bits)), np.array(bits, dtype=np.uint8))

    @given(bits=bit_lists, k=st.integers(0, 3))
    def test_rotation_stays_on_constellation(self, bits, k):
        s = map_qpsk(bits) * 1j**k
        d = np.abs(s[:, None] - CONSTELLATION[None, :]).min(axis=1) if len(s) else np.zeros(0)
        assert np.all(d < 1e-12)


class TestFraming:
    def test_pilot_at_slot_zero(self, frame):
        sym = frame_symbols(generate_bits(60, 0), frame)
        assert np.all(sym[::4] == CONSTELLATION[0])
        assert len(sym) == 40

    def test_bits_per_frame(self, frame):
        assert frame.bits_per_frame == 6
        assert frame.stream_bits_per_frame == 8

    @pytest.mark.parametrize("kw", [{"frame_len_symbols": 1}, {"pilot_symbol_index": 4}, {"pilot_position": 4}, {"samples_per_symbol": 1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            FrameConfig(**kw)

    def test_partial_frame_rejected(self, frame):
        with pytest.raises(ValueError):
            insert_pilots(np.ones(4), frame)

    @given(L=st.integers(2, 8), pos=st.integers(0, 7), pilot=st.integers(0, 3), n=st.integers(0, 20), seed=st.integers(0, 1000))
    def test_strip_inverts_insert(self, L, pos, pilot, n, seed):
        if pos >= L:
            pos = L - 1
        cfg = FrameConfig(L, pilot, pos, 8)
        data = map_qpsk(generate_bits(n * cfg.bits_per_frame, seed))
        framed = insert_pilots(data, cfg)
        assert len(framed) == n * L
        np.testing.assert_array_equal(strip_pilots(framed, cfg), data)
        if n:
            assert np.all(framed.reshape(n, L)[:, pos] == cfg.pilot_symbol)


class TestBits:
    def test_deterministic(self):
        np.testing.assert_array_equal(generate_bits(100, 7), generate_bits(100, 7))
        assert not np.array_equal(generate_bits(100, 7), generate_bits(100, 8))

    def test_balanced(self):
        assert abs(generate_bits(10**5, 1).mean() - 0.5) < 0.01

    def test_negative(self):
        with pytest.raises(ValueError):
            generate_bits(-1, 0)


class TestPulseShape:
    def test_length(self, rrc, frame):
        buf = pulse_shape(np.ones(10, complex), rrc, frame, FS)
        assert len(buf) == 80 + rrc.num_taps - 1

    def test_sps_mismatch(self, frame):
        with pytest.raises(ValueError):
            pulse_shape(np.ones(4, complex), design_rrc(4), frame, FS)

    def test_matched_filter_recovers_symbols(self, rrc, frame):
        bits = generate_bits(600, 3)
        sym = frame_symbols(bits, frame)
        buf = pulse_shape(sym, rrc, frame, FS)
        picks = genie_sample(buf, rrc, 8, rrc.num_taps // 2, len(sym))
        # away from the edges the RRC pair is near-Nyquist
        err = np.abs(picks[20:-20] - sym[20:-20])
        assert err.max() < 0.05

    def test_transmit_returns_data_bits_only(self, rrc, frame):
        bits, buf = transmit_frames(25, 5, frame, rrc, FS)
        assert len(bits) == 150
        assert buf.sample_rate_hz == FS

    def test_transmit_rejects_zero_frames(self, rrc, frame):
        with pytest.raises(ValueError):
            transmit_frames(0, 0, frame, rrc, FS)


class TestInvariants:
    @given(n=st.integers(1, 50), L=st.integers(2, 8))
    def test_frame_arithmetic(self, n, L):
        cfg = FrameConfig(frame_len_symbols=L)
        bits, _ = transmit_frames(n, 0, cfg, RRC, FS)
        assert len(bits) == n * 2 * (L - 1)

    def test_loopback_infinite_snr(self, rrc, frame):
        bits = generate_bits(100_002, 77)
        sym = map_qpsk(bits)
        buf = pulse_shape(sym, rrc, frame, FS)
        picks = genie_sample(buf, rrc, 8, rrc.num_taps // 2, len(sym))
        assert np.count_nonzero(demap_qpsk(picks) != bits) == 0

    def test_average_power_scaling(self, rrc, frame):
        _, buf = transmit_frames(5000, 1, frame, rrc, FS)
        # unit-energy symbols through unit-energy taps at 8 sps: 1/8 per sample
        p = np.mean(np.abs(buf.samples) ** 2) * frame.samples_per_symbol
        assert 0.9 <= p <= 1.1
