"""
Parametric stand-in for the over-the-air link: flat unit-gain channel with
AWGN, carrier frequency/phase offset, fractional timing offset, a bulk
integer delay and a noise prefix that mimics receiver output before lock.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import IqBuffer

# 0.3 s at 2 MHz
DEFAULT_MAX_DELAY_SAMPLES = 600_000


@dataclass(frozen=True)
class SnrModel:
    """Received SNR from received power, receiver gain and noise floor (all dB)."""

    p_r_db: float = -64.0
    n_floor_db: float = -68.0
    g_r_db: float = 15.0

    def snr_db(self) -> float:
        return self.p_r_db + self.g_r_db - self.n_floor_db

    def with_gain(self, g_r_db: float) -> "SnrModel":
        return SnrModel(self.p_r_db, self.n_floor_db, g_r_db)


def snr_from_gain(model: SnrModel) -> float:
    return model.snr_db()


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = math.inf
    cfo_hz: float = 0.0
    phase_rad: float = 0.0
    timing_offset_samples: float = 0.0
    delay_samples: int = 0
    lockin_prefix_samples: int = 0
    seed: int = 0
    max_delay_samples: int = DEFAULT_MAX_DELAY_SAMPLES

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if not 0 <= self.timing_offset_samples < 1:
            raise ValueError("timing_offset_samples must be in [0, 1)")
        if self.delay_samples < 0 or self.lockin_prefix_samples < 0:
            raise ValueError("delay and prefix lengths must be >= 0")
        if self.delay_samples > self.max_delay_samples:
            raise ValueError(
                f"delay_samples={self.delay_samples} exceeds the cap of {self.max_delay_samples}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["snr_db"]):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        d = dict(d)
        if "snr_db" in d:
            d["snr_db"] = float(d["snr_db"])
        return cls(**d)


@dataclass(frozen=True)
class AlignmentRecord:
    """Ground truth injected by the channel. Test-only; the receiver never reads it."""

    delay_samples: int
    lockin_prefix_samples: int
    timing_offset_samples: float
    phase_rad: float
    cfo_hz: float
    sample_rate_hz: float

    @property
    def delay(self) -> int:
        return self.delay_samples

    @property
    def phase(self) -> float:
        return self.phase_rad

    @property
    def signal_start(self) -> float:
        """Output index at which input sample 0 lands (fractional)."""
        return self.lockin_prefix_samples + self.delay_samples + self.timing_offset_samples

    def carrier_phase_at(self, output_index) -> np.ndarray:
        n = np.asarray(output_index, dtype=np.float64)
        return self.phase_rad + 2 * np.pi * self.cfo_hz * n / self.sample_rate_hz

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentRecord":
        return cls(**d)


def genie_reference(cfg: ChannelConfig, sample_rate_hz: float = 2e6) -> AlignmentRecord:
    return AlignmentRecord(
        delay_samples=cfg.delay_samples,
        lockin_prefix_samples=cfg.lockin_prefix_samples,
        timing_offset_samples=cfg.timing_offset_samples,
        phase_rad=cfg.phase_rad,
        cfo_hz=cfg.cfo_hz,
        sample_rate_hz=sample_rate_hz,
    )


def complex_noise(rng: np.random.Generator, n: int, power: float) -> np.ndarray:
    """Circular complex Gaussian noise with E|w|^2 = power."""
    scale = np.sqrt(power / 2)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def apply_channel(sig: IqBuffer, cfg: ChannelConfig) -> IqBuffer:
    """Pass ``sig`` through the impairment model.

    Output layout: ``lockin_prefix_samples`` of noise at the signal's power,
    ``delay_samples`` zeros, then the (fractionally delayed, rotated) input.
    AWGN is added over the whole output at ``snr_db`` below the input's mean
    power. The carrier rotation is referenced to output sample 0.
    """
    if len(sig) == 0:
        raise ValueError("cannot pass an empty signal through the channel")
    if cfg.delay_samples > cfg.max_delay_samples:
        raise ValueError(f"delay_samples exceeds cap {cfg.max_delay_samples}")
    x = sig.samples
    fs = sig.sample_rate_hz
    p_sig = float(np.mean(np.abs(x) ** 2))
    prefix_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))

    tau = cfg.timing_offset_samples
    if tau:
        x = (1 - tau) * x + tau * np.concatenate([[0], x[:-1]])

    start = cfg.lockin_prefix_samples + cfg.delay_samples
    n_out = start + len(x)
    out = np.zeros(n_out, dtype=np.complex128)
    if cfg.lockin_prefix_samples:
        out[: cfg.lockin_prefix_samples] = complex_noise(prefix_rng, cfg.lockin_prefix_samples, p_sig)

    if cfg.cfo_hz or cfg.phase_rad:
        n = np.arange(start, n_out, dtype=np.float64)
        x = x * np.exp(1j * (2 * np.pi * cfg.cfo_hz * n / fs + cfg.phase_rad))
    out[start:] = x

    if math.isfinite(cfg.snr_db):
        out += complex_noise(noise_rng, n_out, p_sig / 10 ** (cfg.snr_db / 10))
    return IqBuffer(out, fs)
