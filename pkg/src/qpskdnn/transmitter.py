"""
Transmit side: random bits, per-frame pilots, Gray QPSK mapping and RRC
pulse shaping.

Bit pairs are taken in stream order as (b1, b0). b0 selects the sign of I
and b1 the sign of Q, which gives the Gray labelling

    00 -> (+1+j)/sqrt2   01 -> (-1+j)/sqrt2
    11 -> (-1-j)/sqrt2   10 -> (+1-j)/sqrt2

Bits travel as uint8 arrays of 0/1 and symbols as complex128 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import FirFilter, IqBuffer

INV_SQRT2 = 1 / np.sqrt(2)

# constellation indexed by label value 2*b1 + b0
CONSTELLATION = np.array(
    [1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j],
    dtype=np.complex128,
) * INV_SQRT2

DEFAULT_CARRIER_HZ = 1.033e9


@dataclass(frozen=True)
class FrameConfig:
    frame_len_symbols: int = 4
    pilot_symbol_index: int = 0
    pilot_position: int = 0
    samples_per_symbol: int = 8

    def __post_init__(self):
        if self.frame_len_symbols < 2:
            raise ValueError("frame_len_symbols must be >= 2")
        if not 0 <= self.pilot_symbol_index <= 3:
            raise ValueError("pilot_symbol_index must be in [0, 3]")
        if not 0 <= self.pilot_position < self.frame_len_symbols:
            raise ValueError("pilot_position must lie inside the frame")
        if self.samples_per_symbol < 2:
            raise ValueError("samples_per_symbol must be >= 2")

    @property
    def data_symbols_per_frame(self) -> int:
        return self.frame_len_symbols - 1

    @property
    def bits_per_frame(self) -> int:
        """Data bits carried by one frame (pilot excluded)."""
        return 2 * (self.frame_len_symbols - 1)

    @property
    def stream_bits_per_frame(self) -> int:
        """Decoded bits per frame including the pilot's pair."""
        return 2 * self.frame_len_symbols

    @property
    def pilot_symbol(self) -> complex:
        return complex(CONSTELLATION[self.pilot_symbol_index])

    @property
    def pilot_label(self) -> tuple[int, int]:
        """The pilot's (b1, b0) bit pair."""
        return (self.pilot_symbol_index >> 1) & 1, self.pilot_symbol_index & 1

    def data_slots(self) -> np.ndarray:
        return np.array([i for i in range(self.frame_len_symbols) if i != self.pilot_position])


def generate_bits(n: int, seed: int) -> np.ndarray:
    if n < 0:
        raise ValueError("bit count must be >= 0")
    return np.random.default_rng(seed).integers(0, 2, size=int(n), dtype=np.uint8)


def _as_bits(bits) -> np.ndarray:
    b = np.asarray(bits)
    if b.size and not np.all((b == 0) | (b == 1)):
        raise ValueError("bits must be 0 or 1")
    return b.astype(np.uint8, copy=False).ravel()


def map_qpsk(bits) -> np.ndarray:
    b = _as_bits(bits)
    if len(b) % 2:
        raise ValueError(f"QPSK mapping needs an even bit count, got {len(b)}")
    labels = 2 * b[0::2].astype(np.intp) + b[1::2]
    return CONSTELLATION[labels]


def demap_qpsk(symbols) -> np.ndarray:
    """Nearest-point decision, inverse of :func:`map_qpsk`."""
    s = np.asarray(symbols, dtype=np.complex128).ravel()
    out = np.empty(2 * len(s), dtype=np.uint8)
    out[0::2] = s.imag < 0
    out[1::2] = s.real < 0
    return out


def insert_pilots(data: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    data = np.asarray(data, dtype=np.complex128)
    per = cfg.data_symbols_per_frame
    if len(data) % per:
        raise ValueError(f"{len(data)} data symbols do not fill whole frames of {per}")
    n_frames = len(data) // per
    out = np.empty((n_frames, cfg.frame_len_symbols), dtype=np.complex128)
    out[:, cfg.pilot_position] = cfg.pilot_symbol
    out[:, cfg.data_slots()] = data.reshape(n_frames, per)
    return out.ravel()


def strip_pilots(symbols: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    s = np.asarray(symbols)
    if len(s) % cfg.frame_len_symbols:
        raise ValueError("symbol count is not a whole number of frames")
    return s.reshape(-1, cfg.frame_len_symbols)[:, cfg.data_slots()].ravel()


def pulse_shape(
    symbols: np.ndarray,
    rrc: FirFilter,
    cfg: FrameConfig,
    sample_rate_hz: float,
    tail_samples: int | None = None,
) -> IqBuffer:
    """Zero-stuff to ``samples_per_symbol`` and filter with ``rrc``.

    ``tail_samples`` zeros are appended so the filter can flush; the default
    is ``num_taps - 1``. Output length is ``len(symbols) * sps + tail``.
    """
    sps = cfg.samples_per_symbol
    if rrc.samples_per_symbol is not None and rrc.samples_per_symbol != sps:
        raise ValueError(f"rrc designed for {rrc.samples_per_symbol} sps but frame uses {sps}")
    tail = rrc.num_taps - 1 if tail_samples is None else int(tail_samples)
    s = np.asarray(symbols, dtype=np.complex128)
    up = np.zeros(len(s) * sps + tail, dtype=np.complex128)
    up[: len(s) * sps : sps] = s
    y = np.convolve(up, rrc.taps)[: len(up)]
    return IqBuffer(y, sample_rate_hz)


def transmit_frames(
    n_frames: int,
    seed: int,
    cfg: FrameConfig,
    rrc: FirFilter,
    sample_rate_hz: float,
    tail_samples: int | None = None,
) -> tuple[np.ndarray, IqBuffer]:
    """Random data bits and their pilot-framed, pulse-shaped waveform.

    Returns the data bits only; pilots never appear in the returned bits.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    bits = generate_bits(n_frames * cfg.bits_per_frame, seed)
    symbols = insert_pilots(map_qpsk(bits), cfg)
    return bits, pulse_shape(symbols, rrc, cfg, sample_rate_hz, tail_samples)


def frame_symbols(bits: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Pilot-framed symbol stream for a data bit sequence."""
    return insert_pilots(map_qpsk(bits), cfg)
