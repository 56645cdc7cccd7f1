"""
Data-domain recovery: drop the pre-lock region, find the pilot grid,
resolve the 90 degree phase ambiguity and find the delay between the
transmitted and decoded bitstreams, then emit aligned frames.

Decoded bits are handled as per-symbol labels ``2*b1 + b0`` wherever the
pilot grid is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sync import SyncedSymbols
from .transmitter import CONSTELLATION, FrameConfig, demap_qpsk

PILOT_MATCH_THRESHOLD = 0.9
DELAY_MATCH_THRESHOLD = 0.95
AMBIGUITY_MARGIN = 0.05
LOCKIN_WINDOW_FRAMES = 50
CONFIRM_FRAMES = 8
PILOT_RADIUS = 0.4
DEFAULT_WINDOW_FRAMES = 100


class AlignmentError(RuntimeError):
    """Alignment failed; the caller should repeat the transmission."""


class PilotNotFound(AlignmentError):
    def __init__(self, msg: str, best_fraction: float):
        super().__init__(msg)
        self.best_fraction = best_fraction


class AmbiguousRotation(AlignmentError):
    pass


class DelayNotFound(AlignmentError):
    def __init__(self, best_score: float, best_delay: int):
        super().__init__(f"no delay reaches the match threshold (best score {best_score:.3f} at {best_delay} bits)")
        self.best_score = best_score
        self.best_delay = best_delay


class LockinUnrecoverable(AlignmentError):
    pass


def _labels(bits: np.ndarray) -> np.ndarray:
    b = np.asarray(bits, dtype=np.intp)
    n = len(b) // 2
    return 2 * b[0 : 2 * n : 2] + b[1 : 2 * n : 2]


def _bits_from_labels(labels: np.ndarray) -> np.ndarray:
    out = np.empty(2 * len(labels), dtype=np.uint8)
    out[0::2] = (labels >> 1) & 1
    out[1::2] = labels & 1
    return out


@dataclass(frozen=True)
class RotationRemap:
    """Label permutation seen when the constellation is rotated by k*90 degrees.

    ``bitpair_map[label]`` is the label decoded from the point ``label``
    after rotation.
    """

    k: int
    bitpair_map: tuple = field(init=False)

    def __post_init__(self):
        k = self.k % 4
        object.__setattr__(self, "k", k)
        rotated = CONSTELLATION * (1j) ** k
        object.__setattr__(self, "bitpair_map", tuple(int(v) for v in _labels(demap_qpsk(rotated))))

    def then(self, other: "RotationRemap") -> "RotationRemap":
        return RotationRemap(self.k + other.k)

    @property
    def inverse_map(self) -> np.ndarray:
        inv = np.empty(4, dtype=np.intp)
        inv[np.array(self.bitpair_map)] = np.arange(4)
        return inv

    def rotate_labels(self, labels) -> np.ndarray:
        return np.asarray(self.bitpair_map)[np.asarray(labels, dtype=np.intp)]

    def undo_bits(self, bits) -> np.ndarray:
        """Map bits decoded under this rotation back to transmit labels."""
        return _bits_from_labels(self.inverse_map[_labels(bits)])

    def rotate_bits(self, bits) -> np.ndarray:
        return _bits_from_labels(self.rotate_labels(_labels(bits)))


@dataclass
class AlignmentResult:
    """Outcome of the frame-recovery steps.

    ``delay_bits`` counts transmitted data bits preceding the first emitted
    frame. ``truncated_bits`` counts decoded bits dropped before it.
    ``stream_delay_symbols`` is the decoded-stream symbol index where
    transmitted frame 0 begins (may lie inside the truncated region).
    ``pilot_positions`` are decoded-bit indices of the pilot pairs on the
    recovered grid, spaced by two bits per frame symbol.
    """

    delay_bits: int = 0
    rotation_k: int = 0
    truncated_bits: int = 0
    match_fraction: float = 0.0
    pilot_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pilot_fraction: float = 0.0
    stream_delay_symbols: int = 0
    n_frames: int = 0

    def to_dict(self) -> dict:
        pp = np.asarray(self.pilot_positions)
        spacing = int(pp[1] - pp[0]) if len(pp) > 1 else 0
        return {
            "delay_bits": int(self.delay_bits),
            "rotation_k": int(self.rotation_k),
            "truncated_bits": int(self.truncated_bits),
            "match_fraction": float(self.match_fraction),
            "pilot_first": int(pp[0]) if len(pp) else -1,
            "pilot_count": int(len(pp)),
            "pilot_spacing": spacing,
            "pilot_fraction": float(self.pilot_fraction),
            "stream_delay_symbols": int(self.stream_delay_symbols),
            "n_frames": int(self.n_frames),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentResult":
        n = d.get("pilot_count", 0)
        pp = d.get("pilot_first", 0) + d.get("pilot_spacing", 0) * np.arange(n, dtype=np.int64)
        return cls(
            delay_bits=d["delay_bits"],
            rotation_k=d["rotation_k"],
            truncated_bits=d["truncated_bits"],
            match_fraction=d["match_fraction"],
            pilot_positions=pp,
            pilot_fraction=d.get("pilot_fraction", 0.0),
            stream_delay_symbols=d.get("stream_delay_symbols", 0),
            n_frames=d.get("n_frames", 0),
        )


@dataclass
class PilotSearchResult:
    offset_bits: int
    fraction: float
    positions: np.ndarray


def _pilot_hits(labels: np.ndarray, cfg: FrameConfig, rotation: RotationRemap) -> np.ndarray:
    target = rotation.bitpair_map[cfg.pilot_symbol_index]
    return labels == target


def _grid_fraction(hits: np.ndarray, L: int) -> tuple[int, float]:
    n_frames = len(hits) // L
    if n_frames == 0:
        return 0, 0.0
    grid = hits[: n_frames * L].reshape(n_frames, L)
    fr = grid.mean(axis=0)
    o = int(np.argmax(fr))
    return o, float(fr[o])


def pilot_search(
    decoded: np.ndarray,
    cfg: FrameConfig,
    rotation: RotationRemap | None = None,
    threshold: float = PILOT_MATCH_THRESHOLD,
) -> PilotSearchResult:
    """Locate the pilot grid in a decoded bitstream under ``rotation``.

    Raises:
        PilotNotFound: no symbol offset reaches ``threshold``.
    """
    rotation = rotation or RotationRemap(0)
    L = cfg.frame_len_symbols
    labels = _labels(decoded)
    if len(labels) < 3 * L:
        raise ValueError("pilot search needs at least three frames of bits")
    o, frac = _grid_fraction(_pilot_hits(labels, cfg, rotation), L)
    if frac < threshold:
        raise PilotNotFound(f"pilot match {frac:.3f} below threshold {threshold}", frac)
    positions = 2 * np.arange(o, len(labels), L, dtype=np.int64)
    return PilotSearchResult(2 * o, frac, positions)


def resolve_phase_ambiguity(
    decoded: np.ndarray,
    cfg: FrameConfig,
    threshold: float = PILOT_MATCH_THRESHOLD,
    margin: float = AMBIGUITY_MARGIN,
) -> tuple[RotationRemap, PilotSearchResult]:
    """Pick the rotation whose remapped pilot label best fits a frame grid."""
    L = cfg.frame_len_symbols
    labels = _labels(decoded)
    if len(labels) < 3 * L:
        raise ValueError("phase resolution needs at least three frames of bits")
    scores = []
    for k in range(4):
        o, frac = _grid_fraction(_pilot_hits(labels, cfg, RotationRemap(k)), L)
        scores.append((frac, k, o))
    scores.sort(reverse=True)
    best, second = scores[0], scores[1]
    if best[0] < threshold:
        raise PilotNotFound(f"no rotation reaches pilot threshold (best {best[0]:.3f})", best[0])
    if best[0] - second[0] < margin:
        raise AmbiguousRotation(
            f"rotations {best[1]} and {second[1]} both match ({best[0]:.3f} vs {second[0]:.3f})"
        )
    frac, k, o = best
    positions = 2 * np.arange(o, len(labels), L, dtype=np.int64)
    return RotationRemap(k), PilotSearchResult(2 * o, frac, positions)


def _pack_words(bits: np.ndarray) -> np.ndarray:
    """uint64 word starting at every bit position (MSB first, zero padded)."""
    b = np.concatenate([np.asarray(bits, dtype=np.uint64), np.zeros(64, dtype=np.uint64)])
    n = len(bits)
    words = np.zeros(n, dtype=np.uint64)
    for i in range(64):
        words |= b[i : i + n] << np.uint64(63 - i)
    return words


def _scores_fast(tx: np.ndarray, rx_win: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    W = len(rx_win)
    n_words = -(-W // 64)
    tail = W - 64 * (n_words - 1)
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    mask[-1] = np.uint64(((1 << tail) - 1) << (64 - tail))
    tx_words = _pack_words(tx)
    rx_words = _pack_words(rx_win)[::64][:n_words]
    idx = candidates[:, None] + 64 * np.arange(n_words)[None, :]
    mism = np.bitwise_count((tx_words[idx] ^ rx_words[None, :]) & mask[None, :]).sum(axis=1)
    return (W - mism) / W


def _scores_scan(tx: np.ndarray, rx_win: np.ndarray, candidates: np.ndarray, chunk: int = 2048) -> np.ndarray:
    W = len(rx_win)
    out = np.empty(len(candidates))
    for s in range(0, len(candidates), chunk):
        c = candidates[s : s + chunk]
        win = tx[c[:, None] + np.arange(W)[None, :]]
        out[s : s + chunk] = np.count_nonzero(win == rx_win[None, :], axis=1)
    return out / W


def delay_scores_reference(tx_bits, rx_bits, max_delay_bits: int, window_bits: int, rx_offset_bits: int = 0) -> np.ndarray:
    """Bit-granular agreement for every delay in [0, max_delay_bits], one at a time."""
    tx = np.asarray(tx_bits)
    rx = np.asarray(rx_bits)[rx_offset_bits : rx_offset_bits + window_bits]
    last = min(max_delay_bits, len(tx) - window_bits)
    return np.array([np.mean(tx[d : d + window_bits] == rx) for d in range(last + 1)])


def find_delay(
    tx_bits: np.ndarray,
    rx_bits: np.ndarray,
    cfg: FrameConfig,
    max_delay_bits: int | None = None,
    window_bits: int | None = None,
    threshold: float = DELAY_MATCH_THRESHOLD,
    fast: bool = True,
    rx_offset_bits: int = 0,
) -> AlignmentResult:
    """Delay ``d`` (in transmitted data bits) such that tx[d:] lines up with rx.

    ``rx_bits`` must be rotation-corrected data bits starting on a frame
    boundary. Candidates step by one frame of data bits. ``score(d)`` is the
    agreement of ``tx[d : d+W]`` with ``rx[rx_offset : rx_offset+W]``.

    Raises:
        DelayNotFound: best score below ``threshold``.
    """
    tx = np.asarray(tx_bits, dtype=np.uint8)
    rx = np.asarray(rx_bits, dtype=np.uint8)
    bpf = cfg.bits_per_frame
    if window_bits is None:
        window_bits = min(DEFAULT_WINDOW_FRAMES * bpf, len(rx) - rx_offset_bits)
    if window_bits <= 0 or rx_offset_bits + window_bits > len(rx):
        raise ValueError("delay window exceeds the received bits")
    last = len(tx) - window_bits
    if max_delay_bits is not None:
        last = min(last, max_delay_bits)
    if last < 0:
        raise ValueError("transmitted stream shorter than the delay window")
    candidates = np.arange(0, last + 1, bpf, dtype=np.int64)
    rx_win = rx[rx_offset_bits : rx_offset_bits + window_bits]
    scores = _scores_fast(tx, rx_win, candidates) if fast else _scores_scan(tx, rx_win, candidates)
    i = int(np.argmax(scores))
    if scores[i] < threshold:
        raise DelayNotFound(float(scores[i]), int(candidates[i]))
    return AlignmentResult(delay_bits=int(candidates[i]), match_fraction=float(scores[i]))


def max_delay_bits_for(delay_samples: int, cfg: FrameConfig) -> int:
    """Data-bit delay equivalent to ``delay_samples`` at the frame's sample rate."""
    frames = -(-delay_samples // (cfg.samples_per_symbol * cfg.frame_len_symbols))
    return frames * cfg.bits_per_frame


def find_lockin(
    decoded: np.ndarray,
    cfg: FrameConfig,
    window_frames: int = LOCKIN_WINDOW_FRAMES,
    threshold: float = PILOT_MATCH_THRESHOLD,
    confirm_frames: int = CONFIRM_FRAMES,
    symbols: np.ndarray | None = None,
    pilot_radius: float = PILOT_RADIUS,
) -> int:
    """Symbol index of the first frame start after the pre-lock region.

    The first 50-frame window whose pilot match reaches ``threshold`` marks
    lock; the start then moves to the first pilot that opens an unbroken run
    of ``confirm_frames`` pilots. When ``symbols`` are given, pilots in that
    run must also sit within ``pilot_radius`` of the expected point, which
    skips frames whose loops are still settling.
    """
    L = cfg.frame_len_symbols
    labels = _labels(decoded)
    best = None
    for k in range(4):
        hits = _pilot_hits(labels, cfg, RotationRemap(k)).astype(np.int64)
        tight = hits
        if symbols is not None:
            ref = cfg.pilot_symbol * (1j) ** k
            tight = hits & (np.abs(np.asarray(symbols)[: len(hits)] - ref) < pilot_radius)
        for o in range(L):
            h = hits[o::L]
            if len(h) < window_frames:
                continue
            csum = np.concatenate([[0], np.cumsum(h)])
            win = (csum[window_frames:] - csum[:-window_frames]) / window_frames
            ok = np.flatnonzero(win >= threshold)
            if not len(ok):
                continue
            j = int(ok[0])
            # step to the first pilot followed by an unbroken run of pilots
            run = np.concatenate([[0], np.cumsum(tight[o::L])])
            c = min(confirm_frames, len(h) - j)
            full = np.flatnonzero(run[j + c :] - run[j : len(run) - c] == c)
            if not len(full):
                continue
            j += int(full[0])
            start = o + j * L - cfg.pilot_position
            if start < 0:
                start += L
            if best is None or start < best:
                best = start
    if best is None:
        raise LockinUnrecoverable("pilot match never reaches threshold; stream unrecoverable")
    return best


def truncate_lockin(
    symbols: SyncedSymbols,
    decoded: np.ndarray,
    cfg: FrameConfig,
    window_frames: int = LOCKIN_WINDOW_FRAMES,
    threshold: float = PILOT_MATCH_THRESHOLD,
) -> tuple[SyncedSymbols, np.ndarray, int]:
    """Cut both streams at the first locked frame boundary.

    Returns the truncated symbols, truncated bits and the number of symbols
    dropped.
    """
    start = find_lockin(decoded, cfg, window_frames, threshold, symbols=symbols.symbols)
    return symbols[start:], np.asarray(decoded)[2 * start :], start


@dataclass
class AlignedFrames:
    """Per-frame records in transmit order.

    ``symbols`` are rotated into the canonical orientation; ``labels`` are
    the transmitted data bits and ``conventional`` the hard-decision bits,
    both without pilot bits.
    """

    symbols: np.ndarray  # (n, frame_len) complex
    labels: np.ndarray  # (n, bits_per_frame) uint8
    conventional: np.ndarray  # (n, bits_per_frame) uint8
    tx_frame_index: np.ndarray
    rx_symbol_index: np.ndarray

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self):
        for i in range(len(self)):
            yield self.symbols[i], self.labels[i], self.conventional[i]

    def inputs(self) -> np.ndarray:
        """Real network inputs: Re of each frame symbol, then Im."""
        return np.concatenate([self.symbols.real, self.symbols.imag], axis=1)


def align(
    tx_bits: np.ndarray,
    rx: tuple[SyncedSymbols, np.ndarray],
    cfg: FrameConfig,
    max_delay_bits: int | None = None,
    window_bits: int | None = None,
    fast: bool = True,
    check_lock: bool = True,
) -> tuple[AlignmentResult, AlignedFrames]:
    """Truncate, resolve rotation, find the delay and pair up frames.

    Raises:
        AlignmentError: any step fails, including a lost lock after the
            first emitted frame.
    """
    synced, decoded = rx
    L = cfg.frame_len_symbols
    bpf = cfg.bits_per_frame
    tx_bits = np.asarray(tx_bits, dtype=np.uint8)

    start = find_lockin(decoded, cfg, symbols=synced.symbols)
    n_frames_rx = (len(synced) - start) // L
    if n_frames_rx < 3:
        raise LockinUnrecoverable("fewer than three frames after truncation")
    stop = start + n_frames_rx * L
    frame_bits = np.asarray(decoded)[2 * start : 2 * stop]
    rotation, search = resolve_phase_ambiguity(frame_bits, cfg)
    if search.offset_bits != 2 * cfg.pilot_position:
        raise AlignmentError("pilot grid moved after truncation")

    canon = rotation.undo_bits(frame_bits).reshape(n_frames_rx, 2 * L)
    data_cols = np.concatenate([[2 * s, 2 * s + 1] for s in cfg.data_slots()])
    rx_data = canon[:, data_cols]

    guard = min(CONFIRM_FRAMES, n_frames_rx - 1)
    avail = n_frames_rx - guard
    if window_bits is None:
        window_bits = min(DEFAULT_WINDOW_FRAMES, avail) * bpf
    res = find_delay(
        tx_bits, rx_data.ravel(), cfg, max_delay_bits, window_bits, fast=fast, rx_offset_bits=guard * bpf
    )
    tx0 = res.delay_bits // bpf - guard  # tx frame index of rx frame 0
    first_rx = max(0, -tx0)
    n_tx_frames = len(tx_bits) // bpf
    n = min(n_frames_rx - first_rx, n_tx_frames - (tx0 + first_rx))
    if n <= 0:
        raise AlignmentError("no overlap between received and transmitted frames")
    rx_sel = slice(first_rx, first_rx + n)
    tx_idx = np.arange(tx0 + first_rx, tx0 + first_rx + n)

    canon_syms = synced.symbols[start:stop].reshape(n_frames_rx, L) * (1j) ** (-rotation.k)
    labels = tx_bits[: n_tx_frames * bpf].reshape(n_tx_frames, bpf)[tx_idx]
    conv = rx_data[rx_sel]

    if check_lock and n >= LOCKIN_WINDOW_FRAMES:
        pil = canon[rx_sel][:, 2 * cfg.pilot_position : 2 * cfg.pilot_position + 2]
        hit = (2 * pil[:, 0].astype(np.intp) + pil[:, 1]) == cfg.pilot_symbol_index
        csum = np.concatenate([[0], np.cumsum(hit)])
        win = (csum[LOCKIN_WINDOW_FRAMES:] - csum[:-LOCKIN_WINDOW_FRAMES]) / LOCKIN_WINDOW_FRAMES
        if np.min(win) < PILOT_MATCH_THRESHOLD:
            at = int(np.argmin(win >= PILOT_MATCH_THRESHOLD))
            raise AlignmentError(f"lock lost near aligned frame {at} (pilot match {np.min(win):.3f})")

    first_sym = start + first_rx * L
    result = AlignmentResult(
        delay_bits=int((tx0 + first_rx) * bpf),
        rotation_k=rotation.k,
        truncated_bits=int(2 * first_sym),
        match_fraction=res.match_fraction,
        pilot_positions=2 * (first_sym + cfg.pilot_position + L * np.arange(n, dtype=np.int64)),
        pilot_fraction=search.fraction,
        stream_delay_symbols=int(start - tx0 * L),
        n_frames=int(n),
    )
    frames = AlignedFrames(
        symbols=canon_syms[rx_sel],
        labels=labels,
        conventional=conv,
        tx_frame_index=tx_idx,
        rx_symbol_index=first_sym + L * np.arange(n, dtype=np.int64),
    )
    return result, frames
