"""
End-to-end runs: TX -> channel -> RX -> frame recovery, with
retransmission on alignment failure, dataset construction, training and
BER sweeps.

Seed splitting: every transmission draws its TX and channel seeds from
``SeedSequence(root_seed, spawn_key=(stream, index, attempt))``, using the
two words of ``generate_state(2)``. ``stream`` is one of the STREAM_*
constants, ``index`` the sweep point or SNR index and ``attempt`` the
retransmission count. Results therefore do not depend on worker count or
completion order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .channel import ChannelConfig, apply_channel
from .config import ExperimentConfig, config_hash
from .dnn import FrameDataset, MlpModel, TrainHistory, detect, evaluate_ber, train
from .dsp import FirFilter, IqBuffer, apply_fir, design_lowpass, design_rrc, estimate_spectrum
from .framing import AlignedFrames, AlignmentError, AlignmentResult, align, max_delay_bits_for
from .sync import CmaDivergence, SyncedSymbols, genie_sample, run_receiver
from .transmitter import FrameConfig, demap_qpsk, generate_bits, map_qpsk, pulse_shape, transmit_frames

log = logging.getLogger(__name__)

STREAM_SWEEP = 0
STREAM_TRAIN = 1
STREAM_TEST = 2
STREAM_PIPELINE = 3


class RetransmitExhausted(AlignmentError):
    def __init__(self, failures: list[str]):
        super().__init__(f"alignment failed after {len(failures)} attempt(s); last: {failures[-1]}")
        self.failures = failures


def derive_seeds(root_seed: int, stream: int, index: int, attempt: int) -> tuple[int, int]:
    """(tx_seed, channel_seed) for one transmission."""
    ss = np.random.SeedSequence(root_seed, spawn_key=(stream, index, attempt))
    a, b = ss.generate_state(2)
    return int(a), int(b)


def build_filters(cfg: ExperimentConfig) -> tuple[FirFilter, FirFilter]:
    m = cfg.modem
    rrc = design_rrc(cfg.frame.samples_per_symbol, m.rrc_excess_bw, m.rrc_num_taps)
    lpf = design_lowpass(m.sample_rate_hz, m.lpf_cutoff_hz, m.lpf_transition_hz, m.lpf_atten_db)
    return rrc, lpf


def tx_tail_samples(cfg: ExperimentConfig, rrc: FirFilter, lpf: FirFilter) -> int:
    """Trailing zeros so every symbol clears the TX filter and the receive chain."""
    if cfg.modem.tx_tail_samples is not None:
        return cfg.modem.tx_tail_samples
    sps = cfg.frame.samples_per_symbol
    return 2 * rrc.num_taps + lpf.num_taps + (cfg.sync.cma_num_taps + 4) * sps


@dataclass
class PipelineRun:
    tx_bits: np.ndarray
    rx: IqBuffer
    synced: SyncedSymbols
    decoded: np.ndarray
    alignment: AlignmentResult
    frames: AlignedFrames
    channel: ChannelConfig
    tx_seed: int
    attempts: int
    failures: list = field(default_factory=list)


def run_once(
    cfg: ExperimentConfig,
    n_frames: int,
    tx_seed: int,
    channel: ChannelConfig,
    filters: tuple[FirFilter, FirFilter] | None = None,
) -> PipelineRun:
    rrc, lpf = filters or build_filters(cfg)
    fs = cfg.modem.sample_rate_hz
    bits, tx = transmit_frames(n_frames, tx_seed, cfg.frame, rrc, fs, tx_tail_samples(cfg, rrc, lpf))
    rx = apply_channel(tx, channel)
    synced, decoded = run_receiver(rx, lpf, rrc, cfg.sync, cfg.frame.samples_per_symbol)
    max_delay = max_delay_bits_for(channel.max_delay_samples, cfg.frame)
    res, frames = align(bits, (synced, decoded), cfg.frame, max_delay_bits=max_delay)
    return PipelineRun(bits, rx, synced, decoded, res, frames, channel, tx_seed, 1)


def run_pipeline(
    cfg: ExperimentConfig,
    n_frames: int | None = None,
    channel: ChannelConfig | None = None,
    stream: int = STREAM_PIPELINE,
    index: int = 0,
    min_frames: int = 0,
) -> PipelineRun:
    """Transmit until alignment succeeds, up to ``retransmit_limit`` repeats.

    A run that aligns fewer than ``min_frames`` frames also counts as a failure.

    Raises:
        RetransmitExhausted: every attempt failed.
    """
    n_frames = n_frames or cfg.pipeline_frames
    channel = channel or cfg.channel
    filters = build_filters(cfg)
    failures = []
    for attempt in range(cfg.retransmit_limit + 1):
        tx_seed, ch_seed = derive_seeds(cfg.seed, stream, index, attempt)
        ch = dataclasses.replace(channel, seed=ch_seed)
        try:
            run = run_once(cfg, n_frames, tx_seed, ch, filters)
        except (AlignmentError, CmaDivergence) as e:
            failures.append(f"{type(e).__name__}: {e}")
            log.info("attempt %d failed: %s", attempt, e)
            continue
        if len(run.frames) < min_frames:
            failures.append(f"only {len(run.frames)} of {min_frames} frames aligned")
            continue
        run.attempts = attempt + 1
        run.failures = failures
        return run
    raise RetransmitExhausted(failures)


def frame_margin(n: int) -> int:
    """Extra frames transmitted to cover those lost during lock-in."""
    return 200 + n // 50


def frames_to_dataset(frames: AlignedFrames, n: int | None = None, split: str = "train", offset: int = 0, metadata=None) -> FrameDataset:
    """Take the first ``n`` aligned frames; inputs are rounded to float32 as stored on disk."""
    n = len(frames) if n is None else n
    x = frames.inputs()[:n].astype(np.float32).astype(np.float64)
    return FrameDataset(x, frames.labels[:n], frames.conventional[:n], frames.tx_frame_index[:n] + offset, split, metadata or {})


def _concat(parts: list[FrameDataset], split: str, metadata: dict) -> FrameDataset:
    return FrameDataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.conventional for p in parts]),
        np.concatenate([p.frame_index for p in parts]),
        split,
        metadata,
    )


def make_datasets(cfg: ExperimentConfig, train_frames: int | None = None, test_frames: int | None = None) -> tuple[FrameDataset, FrameDataset | None]:
    """Train split pooled over ``dataset.train_snr_db``; test split at the channel SNR.

    Each SNR is its own transmission. Frame indices are made global by
    offsetting each transmission past the previous one, so the splits never
    share an index.
    """
    n_train = train_frames if train_frames is not None else cfg.dataset.train_frames
    n_test = test_frames if test_frames is not None else cfg.dataset.test_frames
    if n_train < 1 or n_test < 0:
        raise ValueError("train split needs at least one frame and test split cannot be negative")
    h = config_hash(cfg)
    snrs = cfg.dataset.train_snr_db
    counts = [n_train // len(snrs) + (i < n_train % len(snrs)) for i in range(len(snrs))]
    parts, runs_meta, offset = [], [], 0
    for i, (snr, n) in enumerate(zip(snrs, counts)):
        if n == 0:
            continue
        ntx = n + frame_margin(n)
        run = run_pipeline(cfg, ntx, dataclasses.replace(cfg.channel, snr_db=snr), STREAM_TRAIN, i, min_frames=n)
        parts.append(frames_to_dataset(run.frames, n, "train", offset))
        runs_meta.append(_run_meta(run, snr, offset))
        offset += ntx
    train_ds = _concat(parts, "train", {"config_hash": h, "frame": dataclasses.asdict(cfg.frame), "runs": runs_meta})
    test_ds = None
    if n_test:
        ntx = n_test + frame_margin(n_test)
        run = run_pipeline(cfg, ntx, cfg.channel, STREAM_TEST, 0, min_frames=n_test)
        meta = {"config_hash": h, "frame": dataclasses.asdict(cfg.frame), "runs": [_run_meta(run, cfg.channel.snr_db, offset)]}
        test_ds = frames_to_dataset(run.frames, n_test, "test", offset, meta)
    return train_ds, test_ds


def _run_meta(run: PipelineRun, snr_db: float, offset: int) -> dict:
    return {
        "snr_db": snr_db if math.isfinite(snr_db) else "inf",
        "frame_offset": offset,
        "attempts": run.attempts,
        "tx_seed": run.tx_seed,
        "alignment": run.alignment.to_dict(),
        "channel": run.channel.to_dict(),
    }


def train_model(cfg: ExperimentConfig, ds: FrameDataset) -> tuple[MlpModel, TrainHistory]:
    return train(ds, cfg.mlp, cfg.train)


@dataclass
class BerPoint:
    snr_db: float
    g_r_db: float
    bits_evaluated: int
    conventional_ber: float
    dnn_ber: float
    frames_dropped: int
    dropped: bool = False
    attempts: int = 0
    failure: str = ""
    frames_digest: str = ""
    alignment: dict = field(default_factory=dict)

    def row(self) -> dict:
        a = self.alignment
        return {
            "snr_db": self.snr_db,
            "g_r_db": self.g_r_db,
            "bits_evaluated": self.bits_evaluated,
            "conventional_ber": self.conventional_ber,
            "dnn_ber": self.dnn_ber,
            "frames_dropped": self.frames_dropped,
            "dropped": int(self.dropped),
            "attempts": self.attempts,
            "delay_bits": a.get("delay_bits", ""),
            "rotation_k": a.get("rotation_k", ""),
            "failure": self.failure,
        }


@dataclass
class BerReport:
    points: list
    config: dict
    config_hash: str
    root_seed: int
    model_sha256: str = ""
    tool_version: str = __version__

    def to_dict(self) -> dict:
        pts = []
        for p in self.points:
            d = dataclasses.asdict(p)
            for k in ("conventional_ber", "dnn_ber"):
                if isinstance(d[k], float) and math.isnan(d[k]):
                    d[k] = None
            pts.append(d)
        return {
            "tool_version": self.tool_version,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "seed_rule": "SeedSequence(root_seed, spawn_key=(0, point_index, attempt)).generate_state(2)",
            "model_sha256": self.model_sha256,
            "identical_frames": True,
            "config": self.config,
            "points": pts,
        }

    def rows(self) -> list[dict]:
        return [p.row() for p in self.points]


def _frames_digest(frames: AlignedFrames, n: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(frames.tx_frame_index[:n]).tobytes())
    h.update(np.ascontiguousarray(frames.labels[:n]).tobytes())
    return h.hexdigest()[:16]


def ber_point(cfg: ExperimentConfig, model: MlpModel, index: int, snr_db: float, g_r_db: float) -> BerPoint:
    """Fresh transmission at one SNR; both detectors score the same frames."""
    n = cfg.frames_per_point
    bpf = cfg.frame.bits_per_frame
    ch = dataclasses.replace(cfg.channel, snr_db=snr_db)
    try:
        run = run_pipeline(cfg, n + frame_margin(n), ch, STREAM_SWEEP, index, min_frames=n)
    except RetransmitExhausted as e:
        return BerPoint(snr_db, g_r_db, 0, math.nan, math.nan, n, True, len(e.failures), e.failures[-1])
    ds = frames_to_dataset(run.frames, n, "test")
    truth = ds.labels.ravel()
    conv = evaluate_ber(ds.conventional.ravel(), truth)
    dnn = evaluate_ber(detect(model, ds), truth)
    return BerPoint(
        snr_db,
        g_r_db,
        n * bpf,
        conv,
        dnn,
        0,
        False,
        run.attempts,
        "",
        _frames_digest(run.frames, n),
        run.alignment.to_dict(),
    )


def _ber_point_job(args):
    return ber_point(*args)


def ber_sweep(cfg: ExperimentConfig, model: MlpModel, model_sha256: str = "") -> BerReport:
    cfg.mlp.check_frame(cfg.frame)
    if tuple(model.config.layer_sizes) != tuple(cfg.mlp.layer_sizes):
        raise ValueError(f"model layers {model.config.layer_sizes} do not match config {cfg.mlp.layer_sizes}")
    jobs = [(cfg, model, i, s, g) for i, (s, g) in enumerate(cfg.sweep.snr_points())]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            points = list(ex.map(_ber_point_job, jobs))
    else:
        points = [_ber_point_job(j) for j in jobs]
    return BerReport(points, cfg.to_dict(), config_hash(cfg), cfg.seed, model_sha256)


def spectrum_rows(buf: IqBuffer, lpf: FirFilter | None = None, segment_len: int = 4096) -> list[dict]:
    """(freq_hz, power_db[, power_db_lpf]) rows; the LPF column is the filtered input."""
    est = estimate_spectrum(buf, segment_len)
    rows = [{"freq_hz": float(f), "power_db": float(p)} for f, p in zip(est.freqs_hz, est.power_db)]
    if lpf is not None:
        post = estimate_spectrum(apply_fir(buf, lpf), segment_len)
        for r, p in zip(rows, post.power_db):
            r["power_db_lpf"] = float(p)
    return rows


def constellation_rows(frames: AlignedFrames, pilot_position: int) -> list[dict]:
    s = frames.symbols
    slot = np.broadcast_to(np.arange(s.shape[1]), s.shape)
    return [
        {"i": float(v.real), "q": float(v.imag), "slot_type": "pilot" if k == pilot_position else "data"}
        for v, k in zip(s.ravel(), slot.ravel())
    ]


def live_tx(cfg: ExperimentConfig, n_frames: int = 5000, seed: int | None = None) -> IqBuffer:
    rrc, _ = build_filters(cfg)
    seed = cfg.seed if seed is None else seed
    _, tx = transmit_frames(n_frames, seed, cfg.frame, rrc, cfg.modem.sample_rate_hz)
    return tx


def genie_ber(snr_db: float, n_bits: int, seed: int, sps: int = 8, excess_bw: float = 0.35) -> float:
    """BER of a matched-filter receiver given perfect timing and phase.

    No pilots, no synchronization loops; used to validate the channel's
    noise calibration against theory.
    """
    rrc = design_rrc(sps, excess_bw)
    bits = generate_bits(n_bits, seed)
    sym = map_qpsk(bits)
    tx = pulse_shape(sym, rrc, FrameConfig(samples_per_symbol=sps), 1.0)
    rx = apply_channel(tx, ChannelConfig(snr_db=snr_db, seed=seed + 1))
    y = genie_sample(rx, rrc, sps, first_peak=(rrc.num_taps - 1) // 2, n_symbols=len(sym))
    return evaluate_ber(demap_qpsk(y), bits)


__all__ = [
    "BerPoint",
    "BerReport",
    "PipelineRun",
    "RetransmitExhausted",
    "ber_point",
    "ber_sweep",
    "build_filters",
    "constellation_rows",
    "derive_seeds",
    "genie_ber",
    "live_tx",
    "make_datasets",
    "run_pipeline",
    "spectrum_rows",
    "train_model",
]
