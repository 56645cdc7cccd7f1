"""
Receive chain: LPF -> polyphase clock sync -> CMA equalizer -> Costas loop
-> hard decisions.

Every block is a small stateful object whose ``process`` method may be fed
a signal in arbitrary chunks; the concatenated outputs equal a single call
on the whole signal. The functional wrappers build a fresh block per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import FirFilter, IqBuffer, StreamingFir, rrc_impulse
from .transmitter import demap_qpsk


@dataclass(frozen=True)
class SyncConfig:
    pfb_num_branches: int = 32
    pfb_loop_bw: float = 5e-3
    pfb_damping: float = 1 / math.sqrt(2)
    pfb_max_rate_dev: float = 0.05
    cma_num_taps: int = 11
    cma_step: float = 1e-3
    cma_modulus: float = 1.0
    costas_loop_bw: float = 2 * math.pi / 100
    costas_damping: float = 1 / math.sqrt(2)
    costas_order: int = 4
    # rad/symbol; well below pi/2, where a pilot every 4th symbol would see no rotation
    costas_max_freq: float = 0.5
    skip_cma: bool = False

    def __post_init__(self):
        if self.pfb_num_branches < 8:
            raise ValueError("pfb_num_branches must be >= 8")
        for name in ("pfb_loop_bw", "costas_loop_bw"):
            bw = getattr(self, name)
            if not 0 < bw < 0.5:
                raise ValueError(f"{name} must be in (0, 0.5), got {bw}")
        if self.cma_num_taps < 1 or self.cma_num_taps % 2 == 0:
            raise ValueError("cma_num_taps must be odd and >= 1")
        if not self.cma_step > 0 or not self.cma_modulus > 0:
            raise ValueError("cma_step and cma_modulus must be > 0")
        if not 0 < self.costas_max_freq < math.pi / 4:
            raise ValueError("costas_max_freq must be in (0, pi/4)")
        if self.costas_order != 4:
            raise ValueError("only the 4th-order (QPSK) Costas loop is supported")


def loop_gains(loop_bw: float, damping: float) -> tuple[float, float]:
    """Proportional and integral gains of a 2nd-order loop with unit detector slope."""
    denom = 1 + 2 * damping * loop_bw + loop_bw**2
    return 4 * damping * loop_bw / denom, 4 * loop_bw**2 / denom


@dataclass
class SyncedSymbols:
    """One complex sample per recovered symbol plus per-symbol loop traces.

    ``sample_times`` is the receiver-input sample position whose matched
    filter peak produced each symbol (fractional, LPF delay removed).
    """

    symbols: np.ndarray
    timing_error: np.ndarray
    phase_error: np.ndarray
    sample_times: np.ndarray
    nco_phase: np.ndarray
    nco_freq: np.ndarray

    def __post_init__(self):
        n = len(self.symbols)
        for name in ("timing_error", "phase_error", "sample_times", "nco_phase", "nco_freq"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, sl: slice) -> "SyncedSymbols":
        return SyncedSymbols(
            self.symbols[sl],
            self.timing_error[sl],
            self.phase_error[sl],
            self.sample_times[sl],
            self.nco_phase[sl],
            self.nco_freq[sl],
        )

    @classmethod
    def from_symbols(cls, symbols) -> "SyncedSymbols":
        s = np.asarray(symbols, dtype=np.complex128)
        z = np.zeros(len(s))
        return cls(s, z, z.copy(), np.arange(len(s), dtype=np.float64), z.copy(), z.copy())

    @classmethod
    def concatenate(cls, parts: list["SyncedSymbols"]) -> "SyncedSymbols":
        if not parts:
            return cls.from_symbols([])
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in (
            "symbols", "timing_error", "phase_error", "sample_times", "nco_phase", "nco_freq")))


class PolyphaseClockSync:
    """Timing recovery over a bank of fractionally shifted matched filters.

    Branch ``k`` of ``nfilts`` evaluates the matched filter ``k/nfilts`` of a
    sample later than branch 0; a parallel bank holds the time derivative.
    The detector Re{y conj(dy)} is scaled by the slope of its S-curve so the
    loop error reads directly in samples of timing offset; it is clipped to
    one sample.
    """

    def __init__(self, matched_rrc: FirFilter, cfg: SyncConfig, sps: int):
        if "excess_bw" not in matched_rrc.meta:
            raise ValueError("polyphase clock sync needs an RRC matched filter with known excess_bw")
        if matched_rrc.samples_per_symbol not in (None, sps):
            raise ValueError("matched filter sps does not match receiver sps")
        beta = matched_rrc.meta["excess_bw"]
        nf = cfg.pfb_num_branches
        span_samples = matched_rrc.num_taps - 1
        fine = sps * nf
        c = span_samples * nf // 2
        j = np.arange(span_samples * nf + 3) - 1
        # Fine-grid prototype scaled so branch 0 reproduces the matched filter.
        scale = matched_rrc.taps[span_samples // 2] / rrc_impulse(np.array([0.0]), beta)[0]
        g = rrc_impulse((j - c) / fine, beta) * scale
        dg = np.zeros_like(g)
        dg[1:-1] = (g[2:] - g[:-2]) / 2 * nf
        g, dg = g[1:-1], dg[1:-1]

        self.sps = sps
        self.nfilts = nf
        self.length = span_samples + 2
        self.center = span_samples // 2
        idx = c + (self.center - np.arange(self.length))[None, :] * nf + np.arange(nf)[:, None]
        valid = (idx >= 0) & (idx < len(g))
        safe = np.clip(idx, 0, len(g) - 1)
        self.bank = np.where(valid, g[safe], 0.0)
        self.dbank = np.where(valid, dg[safe], 0.0)

        self.ted_gain = ted_slope(beta, sps)
        self.alpha, self.beta = loop_gains(cfg.pfb_loop_bw, cfg.pfb_damping)
        self.max_rate = cfg.pfb_max_rate_dev

        self._buf = np.zeros(0, dtype=np.complex128)
        self._base = 0  # absolute input index of _buf[0]
        self._pos = 0  # window start inside _buf
        self._k = 0.0
        self._rate = 0.0

    def process(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Consume samples; return (symbols, timing_error, sample_times)."""
        buf = np.concatenate([self._buf, np.asarray(x, dtype=np.complex128)])
        L, nf, sps = self.length, self.nfilts, self.sps
        bank, dbank = self.bank, self.dbank
        alpha, beta, gain, max_rate = self.alpha, self.beta, self.ted_gain, self.max_rate
        pos, k, rate = self._pos, self._k, self._rate
        # shortest possible advance per symbol given the clamps below
        min_step = sps - max_rate - alpha - 1
        n_max = max(int((len(buf) - pos) / min_step) + 2, 0)
        ys = np.empty(n_max, dtype=np.complex128)
        errs = np.empty(n_max)
        times = np.empty(n_max)
        re, im = buf.real, buf.imag
        n = 0
        while True:
            f = math.floor(k)
            while f >= nf:
                k -= nf
                f -= nf
                pos += 1
            while f < 0:
                k += nf
                f += nf
                pos -= 1
            if pos + L > len(buf):
                break
            if pos < 0:
                pos = 0
            h = bank[f]
            dh = dbank[f]
            wr = re[pos : pos + L]
            wi = im[pos : pos + L]
            yr = h @ wr
            yi = h @ wi
            dyr = dh @ wr
            dyi = dh @ wi
            err = (yr * dyr + yi * dyi) / gain
            err = 1.0 if err > 1.0 else -1.0 if err < -1.0 else err
            ys[n] = complex(yr, yi)
            errs[n] = err
            times[n] = self._base + pos + self.center + f / nf
            n += 1
            rate += beta * err
            if rate > max_rate:
                rate = max_rate
            elif rate < -max_rate:
                rate = -max_rate
            k += nf * (rate + alpha * err)
            pos += sps
        # two samples of margin so a backward phase wrap never leaves the buffer
        keep = max(min(pos, len(buf)) - 2, 0)
        self._buf = buf[keep:]
        self._base += keep
        self._pos = pos - keep
        self._k, self._rate = k, rate
        return ys[:n], errs[:n], times[:n]


def rc_pulse(t: np.ndarray, beta: float) -> np.ndarray:
    """Raised-cosine pulse (RRC convolved with itself), t in symbols."""
    t = np.asarray(t, dtype=np.float64)
    den = 1 - (2 * beta * t) ** 2
    sing = np.abs(den) < 1e-10
    out = np.sinc(t) * np.cos(np.pi * beta * t) / np.where(sing, 1.0, den)
    out[sing] = np.pi / 4 * np.sinc(1 / (2 * beta))
    return out


def ted_slope(beta: float, sps: int, span: int = 64) -> float:
    """Slope magnitude of E[Re{y conj(dy/dt)}] versus timing offset, per sample^2.

    Evaluated for i.i.d. unit-energy symbols through the raised-cosine pulse.
    """
    m = np.arange(-span, span + 1, dtype=np.float64)
    eps = 1e-4

    def s_curve(d):
        p = rc_pulse(d - m, beta)
        dp = (rc_pulse(d - m + eps, beta) - rc_pulse(d - m - eps, beta)) / (2 * eps)
        return float(np.sum(p * dp))

    slope_sym = (s_curve(eps) - s_curve(-eps)) / (2 * eps)
    return abs(slope_sym) / sps**2


class CmaDivergence(RuntimeError):
    def __init__(self, index: int, magnitude: float):
        super().__init__(f"CMA equalizer diverged at sample {index} (|y| = {magnitude:.3g})")
        self.index = index
        self.magnitude = magnitude


class CmaEqualizer:
    """Blind FIR equalizer driven by the constant-modulus error.

    y = w . x (x newest first), e = y (|y|^2 - R^2), w <- w - mu e conj(x).
    Taps start as a centre spike, so the output lags the input by
    ``num_taps // 2`` samples.
    """

    def __init__(self, cfg: SyncConfig):
        self.num_taps = cfg.cma_num_taps
        self.step = cfg.cma_step
        self.modulus = cfg.cma_modulus
        self.delay = cfg.cma_num_taps // 2
        self.weights = np.zeros(self.num_taps, dtype=np.complex128)
        self.weights[self.delay] = 1.0
        self._line = np.zeros(self.num_taps, dtype=np.complex128)
        self._count = 0

    def process(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128)
        out = np.empty(len(x), dtype=np.complex128)
        w, line = self.weights, self._line
        mu, r2, limit = self.step, self.modulus**2, 10 * self.modulus
        ntaps = self.num_taps
        for i in range(len(x)):
            line[1:] = line[:-1]
            line[0] = x[i]
            y = w @ line
            mag2 = y.real * y.real + y.imag * y.imag
            if mag2 > limit * limit:
                raise CmaDivergence(self._count + i, math.sqrt(mag2))
            out[i] = y
            e = y * (mag2 - r2)
            if e != 0:
                if ntaps == 1:
                    w[0] -= mu * e * line[0].conjugate()
                else:
                    w -= (mu * e) * line.conj()
        self._count += len(x)
        return out


class CostasLoop:
    """4th-order Costas loop.

    Detector: sign(Re y) Im y - sign(Im y) Re y, clipped to [-1, 1]. Locks
    modulo 90 degrees. The NCO frequency is clamped to ``costas_max_freq``
    so the loop cannot settle on the alias a quarter symbol rate away.
    """

    def __init__(self, cfg: SyncConfig):
        self.alpha, self.beta = loop_gains(cfg.costas_loop_bw, cfg.costas_damping)
        self.max_freq = cfg.costas_max_freq
        self.phase = 0.0
        self.freq = 0.0

    def process(self, x: np.ndarray):
        """Return (symbols, phase_error, nco_phase, nco_freq) for the chunk."""
        x = np.asarray(x, dtype=np.complex128)
        n = len(x)
        out = np.empty(n, dtype=np.complex128)
        errs = np.empty(n)
        phases = np.empty(n)
        freqs = np.empty(n)
        alpha, beta, fmax = self.alpha, self.beta, self.max_freq
        phase, freq = self.phase, self.freq
        cos, sin = math.cos, math.sin
        xr, xi = x.real.tolist(), x.imag.tolist()
        for i in range(n):
            c, s = cos(phase), sin(phase)
            yr = xr[i] * c + xi[i] * s
            yi = xi[i] * c - xr[i] * s
            err = (yi if yr > 0 else -yi if yr < 0 else 0.0) - (yr if yi > 0 else -yr if yi < 0 else 0.0)
            err = 1.0 if err > 1.0 else -1.0 if err < -1.0 else err
            out[i] = complex(yr, yi)
            errs[i] = err
            phases[i] = phase
            freqs[i] = freq
            freq += beta * err
            freq = fmax if freq > fmax else -fmax if freq < -fmax else freq
            phase += freq + alpha * err
        self.phase, self.freq = phase, freq
        return out, errs, phases, freqs


def polyphase_clock_sync(sig: IqBuffer, matched_rrc: FirFilter, cfg: SyncConfig, sps: int) -> IqBuffer:
    """Timing-recover ``sig`` to one sample per symbol."""
    pfb = PolyphaseClockSync(matched_rrc, cfg, sps)
    if len(sig) < pfb.length:
        raise ValueError(f"input of {len(sig)} samples is shorter than one filter span ({pfb.length})")
    y, _, _ = pfb.process(sig.samples)
    return IqBuffer(y, sig.sample_rate_hz / sps)


def cma_equalize(symbols: IqBuffer, cfg: SyncConfig) -> IqBuffer:
    return symbols.with_samples(CmaEqualizer(cfg).process(symbols.samples))


def costas_loop(symbols: IqBuffer, cfg: SyncConfig) -> SyncedSymbols:
    y, err, ph, fr = CostasLoop(cfg).process(symbols.samples)
    return SyncedSymbols(y, np.zeros(len(y)), err, np.arange(len(y), dtype=np.float64), ph, fr)


def hard_decode(symbols) -> np.ndarray:
    """Nearest-point QPSK decisions, two bits per symbol in stream order."""
    if isinstance(symbols, SyncedSymbols):
        symbols = symbols.symbols
    return demap_qpsk(symbols)


class Receiver:
    """Streaming composition of the full receive chain.

    Stage traces are re-timed through the equalizer delay so each output
    symbol carries the timing data of the input sample it came from.
    """

    def __init__(self, lpf: FirFilter, matched_rrc: FirFilter, cfg: SyncConfig, sps: int):
        self.cfg = cfg
        self.sps = sps
        self.lpf = StreamingFir(lpf)
        self.lpf_delay = lpf.group_delay
        self.pfb = PolyphaseClockSync(matched_rrc, cfg, sps)
        self.cma = None if cfg.skip_cma else CmaEqualizer(cfg)
        self.costas = CostasLoop(cfg)
        d = 0 if self.cma is None else self.cma.delay
        first = self.pfb.center - self.lpf_delay
        self._pend_err = np.zeros(d)
        self._pend_time = first - sps * np.arange(d, 0, -1, dtype=np.float64)

    def process(self, x: np.ndarray) -> SyncedSymbols:
        filtered = self.lpf.process(x)
        y, terr, times = self.pfb.process(filtered)
        times = times - self.lpf_delay
        if self.cma is not None:
            y = self.cma.process(y)
            terr = np.concatenate([self._pend_err, terr])
            times = np.concatenate([self._pend_time, times])
            d = len(self._pend_err)
            self._pend_err, self._pend_time = terr[len(y):], times[len(y):]
            terr, times = terr[: len(y)], times[: len(y)]
            assert len(self._pend_err) == d
        sym, perr, ph, fr = self.costas.process(y)
        return SyncedSymbols(sym, terr, perr, times, ph, fr)


def run_receiver(
    sig: IqBuffer, lpf: FirFilter, matched_rrc: FirFilter, cfg: SyncConfig, sps: int
) -> tuple[SyncedSymbols, np.ndarray]:
    """LPF, timing, CMA, Costas and hard decisions in that order."""
    rx = Receiver(lpf, matched_rrc, cfg, sps)
    synced = rx.process(sig.samples)
    return synced, hard_decode(synced)


def genie_sample(sig: IqBuffer, matched_rrc: FirFilter, sps: int, first_peak: int, n_symbols: int | None = None) -> np.ndarray:
    """Matched filter and symbol-spaced sampling at an externally known timing.

    ``first_peak`` is the input index of the first symbol's pulse centre.
    Used as a reference receiver in tests; it does no synchronisation.
    """
    y = np.convolve(sig.samples, matched_rrc.taps)
    start = first_peak + (matched_rrc.num_taps - 1) // 2
    picks = y[start::sps]
    if n_symbols is not None:
        picks = picks[:n_symbols]
    return picks
