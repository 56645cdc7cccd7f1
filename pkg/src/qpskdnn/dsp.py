"""
Complex baseband containers and the FIR/spectrum primitives shared by the
transmit and receive chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps_signal

# dB value reported for bins whose power is exactly zero
POWER_FLOOR_DB = -300.0

DEFAULT_MAX_LOWPASS_TAPS = 4095


@dataclass(frozen=True)
class IqBuffer:
    """Complex baseband samples tagged with their sample rate."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.complex128)
        if x.ndim != 1:
            raise ValueError("IqBuffer samples must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise ValueError("IqBuffer samples contain NaN or Inf")
        x = x.copy() if x is self.samples else x
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples: np.ndarray) -> "IqBuffer":
        return IqBuffer(samples, self.sample_rate_hz)

    def scaled(self, gain: float) -> "IqBuffer":
        return IqBuffer(self.samples * gain, self.sample_rate_hz)


@dataclass(frozen=True)
class FirFilter:
    """Real-tap FIR filter. ``kind`` is one of rrc, lowpass, custom."""

    taps: np.ndarray
    kind: str = "custom"
    samples_per_symbol: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        h = np.asarray(self.taps, dtype=np.float64)
        if h.ndim != 1 or len(h) < 1:
            raise ValueError("FirFilter needs at least one tap")
        if not np.all(np.isfinite(h)):
            raise ValueError("FirFilter taps must be finite")
        if self.kind not in ("rrc", "lowpass", "custom"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.kind == "rrc":
            if len(h) % 2 == 0:
                raise ValueError("rrc filters need an odd tap count")
            if np.max(np.abs(h - h[::-1])) > 1e-12:
                raise ValueError("rrc taps are not symmetric")
        h = h.copy()
        h.flags.writeable = False
        object.__setattr__(self, "taps", h)

    @property
    def num_taps(self) -> int:
        return len(self.taps)

    @property
    def group_delay(self) -> float:
        """Delay in samples of a linear-phase filter."""
        return (self.num_taps - 1) / 2


@dataclass(frozen=True)
class SpectrumEstimate:
    freqs_hz: np.ndarray
    power_db: np.ndarray
    rbw_hz: float

    def __post_init__(self):
        if len(self.freqs_hz) != len(self.power_db):
            raise ValueError("freqs_hz and power_db lengths differ")
        if len(self.freqs_hz) > 1 and np.any(np.diff(self.freqs_hz) <= 0):
            raise ValueError("freqs_hz must be strictly increasing")
        if not self.rbw_hz > 0:
            raise ValueError("rbw_hz must be > 0")

    def power_at(self, freq_hz: float) -> float:
        """Power of the bin nearest ``freq_hz``."""
        return float(self.power_db[np.argmin(np.abs(self.freqs_hz - freq_hz))])

    def band_mean_db(self, f_lo: float, f_hi: float) -> float:
        """Mean linear power over |f| in [f_lo, f_hi], returned in dB."""
        sel = (np.abs(self.freqs_hz) >= f_lo) & (np.abs(self.freqs_hz) <= f_hi)
        if not np.any(sel):
            raise ValueError(f"no bins in [{f_lo}, {f_hi}] Hz")
        return float(10 * np.log10(np.mean(10 ** (self.power_db[sel] / 10))))


def rrc_impulse(t: np.ndarray, excess_bw: float) -> np.ndarray:
    """Closed-form root-raised-cosine pulse at times ``t`` in symbol periods.

    The two removable singularities use their analytic limits.
    """
    b = excess_bw
    t = np.asarray(t, dtype=np.float64)
    h = np.empty_like(t)
    at_zero = np.isclose(t, 0.0, atol=1e-12)
    at_edge = np.isclose(np.abs(t), 1 / (4 * b), atol=1e-9)
    regular = ~(at_zero | at_edge)
    tr = t[regular]
    num = np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))
    den = np.pi * tr * (1 - (4 * b * tr) ** 2)
    h[regular] = num / den
    h[at_zero] = 1 - b + 4 * b / np.pi
    h[at_edge] = (b / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    return h


def design_rrc(samples_per_symbol: int, excess_bw: float = 0.35, num_taps: int | None = None) -> FirFilter:
    """Unit-energy root-raised-cosine taps sampled ``samples_per_symbol`` times per symbol.

    Args:
        samples_per_symbol: oversampling factor, at least 2.
        excess_bw: roll-off factor in (0, 1].
        num_taps: odd tap count, at least samples_per_symbol + 1. Defaults to
            ``11 * samples_per_symbol + 1``.
    """
    sps = int(samples_per_symbol)
    if sps < 2:
        raise ValueError(f"samples_per_symbol must be >= 2, got {samples_per_symbol}")
    if not 0 < excess_bw <= 1:
        raise ValueError(f"excess_bw must be in (0, 1], got {excess_bw}")
    if num_taps is None:
        num_taps = 11 * sps + 1
    if num_taps % 2 == 0:
        raise ValueError(f"num_taps must be odd, got {num_taps}")
    if num_taps < sps + 1:
        raise ValueError(f"num_taps must be >= samples_per_symbol + 1 = {sps + 1}")
    n = np.arange(num_taps) - (num_taps - 1) // 2
    h = rrc_impulse(n / sps, excess_bw)
    # Force exact symmetry so the FirFilter invariant holds bit-for-bit.
    h = 0.5 * (h + h[::-1])
    h /= np.sqrt(np.sum(h**2))
    return FirFilter(h, kind="rrc", samples_per_symbol=sps, meta={"excess_bw": excess_bw})


def frequency_response_db(f: FirFilter, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """|H(f)| in dB evaluated directly from the taps."""
    n = np.arange(f.num_taps)
    w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64)[:, None] / sample_rate_hz
    H = np.exp(-1j * w * n[None, :]) @ f.taps
    with np.errstate(divide="ignore"):
        return 20 * np.log10(np.abs(H))


def _lowpass_meets(h, sample_rate_hz, cutoff_hz, transition_hz, atten_db) -> bool:
    f = FirFilter(h, kind="lowpass")
    f_pass = cutoff_hz - transition_hz
    f_stop = cutoff_hz + transition_hz
    grid_pass = np.linspace(0, max(f_pass, 0.0), 256)
    grid_stop = np.linspace(f_stop, sample_rate_hz / 2, 2048)
    pb = frequency_response_db(f, grid_pass, sample_rate_hz) if f_pass > 0 else np.zeros(1)
    sb = frequency_response_db(f, grid_stop, sample_rate_hz) if f_stop < sample_rate_hz / 2 else np.full(1, -np.inf)
    return bool(np.all(np.abs(pb) <= 1.0) and np.all(sb <= -atten_db))


def design_lowpass(
    sample_rate_hz: float,
    cutoff_hz: float,
    transition_hz: float,
    stopband_atten_db: float = 60.0,
    max_taps: int = DEFAULT_MAX_LOWPASS_TAPS,
) -> FirFilter:
    """Kaiser-windowed sinc low-pass with unit DC gain.

    The transition band spans ``cutoff_hz +/- transition_hz``. The tap count
    starts at the Kaiser estimate and grows until a dense evaluation of the
    response meets the passband (+/-1 dB) and stopband limits.
    """
    nyq = sample_rate_hz / 2
    if not 0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff_hz must be in (0, {nyq}), got {cutoff_hz}")
    if not transition_hz > 0:
        raise ValueError("transition_hz must be > 0")
    if not stopband_atten_db > 0:
        raise ValueError("stopband_atten_db must be > 0")

    a = float(stopband_atten_db)
    if a > 50:
        beta = 0.1102 * (a - 8.7)
    elif a >= 21:
        beta = 0.5842 * (a - 21) ** 0.4 + 0.07886 * (a - 21)
    else:
        beta = 0.0
    dw = 2 * np.pi * (2 * transition_hz) / sample_rate_hz
    n_taps = int(np.ceil((a - 7.95) / (2.285 * dw))) + 1
    n_taps = max(n_taps, 3)
    n_taps += 1 - n_taps % 2

    while n_taps <= max_taps:
        n = np.arange(n_taps) - (n_taps - 1) / 2
        h = 2 * cutoff_hz / sample_rate_hz * np.sinc(2 * cutoff_hz / sample_rate_hz * n)
        h *= np.kaiser(n_taps, beta)
        h /= np.sum(h)
        if _lowpass_meets(h, sample_rate_hz, cutoff_hz, transition_hz, a):
            return FirFilter(
                h,
                kind="lowpass",
                meta={"cutoff_hz": cutoff_hz, "transition_hz": transition_hz, "stopband_atten_db": a},
            )
        n_taps += 2
    raise ValueError(
        f"low-pass spec infeasible: needs more than max_taps={max_taps} taps "
        f"(cutoff {cutoff_hz} Hz, transition {transition_hz} Hz, {a} dB)"
    )


def apply_fir(sig: IqBuffer, f: FirFilter) -> IqBuffer:
    """Causal linear convolution truncated to the input length.

    The (num_taps - 1)/2 sample group delay is left in place.
    """
    if len(sig) == 0:
        raise ValueError("cannot filter an empty signal")
    y = np.convolve(sig.samples, f.taps)[: len(sig)]
    return sig.with_samples(y)


class StreamingFir:
    """FIR filter that carries its delay line across calls.

    Feeding a signal in chunks yields the same samples as one call on the
    whole signal.
    """

    def __init__(self, f: FirFilter):
        self.taps = f.taps
        self._history = np.zeros(len(f.taps) - 1, dtype=np.complex128)

    def process(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        if len(x) == 0:
            return x
        buf = np.concatenate([self._history, x])
        y = np.convolve(buf, self.taps, mode="valid")
        if len(self._history):
            self._history = buf[-len(self._history):]
        return y


def estimate_spectrum(sig: IqBuffer, segment_len: int = 4096, overlap_fraction: float = 0.5) -> SpectrumEstimate:
    """Welch-averaged two-sided power spectrum (Hann window), in dB full scale.

    A full-scale complex tone of amplitude 1 reads 0 dB at its bin.
    """
    if segment_len < 2 or segment_len & (segment_len - 1):
        raise ValueError(f"segment_len must be a power of two, got {segment_len}")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    if len(sig) < segment_len:
        raise ValueError(f"signal has {len(sig)} samples, shorter than one segment ({segment_len})")
    fs = sig.sample_rate_hz
    freqs, pxx = sps_signal.welch(
        sig.samples,
        fs=fs,
        window="hann",
        nperseg=segment_len,
        noverlap=int(segment_len * overlap_fraction),
        detrend=False,
        return_onesided=False,
        scaling="spectrum",
    )
    freqs = np.fft.fftshift(freqs)
    pxx = np.fft.fftshift(pxx)
    with np.errstate(divide="ignore"):
        power_db = np.where(pxx > 0, 10 * np.log10(np.where(pxx > 0, pxx, 1.0)), POWER_FLOOR_DB)
    window = sps_signal.get_window("hann", segment_len)
    enbw_bins = segment_len * np.sum(window**2) / np.sum(window) ** 2
    return SpectrumEstimate(freqs, power_db, rbw_hz=float(enbw_bins * fs / segment_len))


def mean_power_db(sig: IqBuffer) -> float:
    """10*log10 of the mean of |x|^2."""
    if len(sig) == 0:
        raise ValueError("mean power of an empty signal is undefined")
    p = float(np.mean(np.abs(sig.samples) ** 2))
    with np.errstate(divide="ignore"):
        return float(10 * np.log10(p))
