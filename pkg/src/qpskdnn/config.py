"""
Experiment configuration: one YAML document, every key defaulted.

Schema (top-level keys; nested keys mirror the dataclass fields)::

    seed: 1234                  root seed, split per point/attempt
    frame:    {frame_len_symbols, pilot_symbol_index, pilot_position, samples_per_symbol}
    modem:    {sample_rate_hz, carrier_hz, rrc_excess_bw, rrc_num_taps,
               lpf_cutoff_hz, lpf_transition_hz, lpf_atten_db, tx_tail_samples}
    channel:  ChannelConfig fields (snr_db may be "inf")
    sync:     SyncConfig fields
    mlp:      {layer_sizes, seed}
    train:    TrainConfig fields
    sweep:    {axis: snr|gain, points: [...], p_r_db, n_floor_db}
    dataset:  {train_frames, test_frames, train_snr_db}
    bits_per_point, retransmit_limit, workers, pipeline_frames
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml

from .channel import ChannelConfig, SnrModel
from .dnn import MlpConfig, TrainConfig
from .sync import SyncConfig
from .transmitter import DEFAULT_CARRIER_HZ, FrameConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModemConfig:
    sample_rate_hz: float = 2e6
    carrier_hz: float = DEFAULT_CARRIER_HZ
    rrc_excess_bw: float = 0.35
    rrc_num_taps: int | None = None
    lpf_cutoff_hz: float = 200e3
    lpf_transition_hz: float = 50e3
    lpf_atten_db: float = 60.0
    # None: long enough to flush the whole receive chain
    tx_tail_samples: int | None = None


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "snr"
    points: tuple = (6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
    p_r_db: float = -64.0
    n_floor_db: float = -68.0

    def __post_init__(self):
        if self.axis not in ("snr", "gain"):
            raise ConfigError(f"sweep.axis must be 'snr' or 'gain', got {self.axis!r}")
        object.__setattr__(self, "points", tuple(float(p) for p in self.points))

    def snr_points(self) -> list[tuple[float, float]]:
        """(snr_db, g_r_db) per point."""
        out = []
        for p in self.points:
            if self.axis == "gain":
                out.append((SnrModel(self.p_r_db, self.n_floor_db, p).snr_db(), p))
            else:
                out.append((p, p - self.p_r_db + self.n_floor_db))
        return out


@dataclass(frozen=True)
class DatasetConfig:
    train_frames: int = 50_000
    test_frames: int = 10_000
    # training data is pooled evenly over these SNRs
    train_snr_db: tuple = (2.0, 4.0, 19.0)

    def __post_init__(self):
        object.__setattr__(self, "train_snr_db", tuple(float(s) for s in self.train_snr_db))
        if self.train_frames < 1 or self.test_frames < 0:
            raise ConfigError("dataset frame counts must be positive")
        if not self.train_snr_db:
            raise ConfigError("dataset.train_snr_db must not be empty")


def _default_channel() -> ChannelConfig:
    return ChannelConfig(
        snr_db=19.0,
        cfo_hz=1000.0,
        phase_rad=1.0,
        timing_offset_samples=0.5,
        delay_samples=200_000,
        lockin_prefix_samples=20_000,
        seed=0,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1234
    frame: FrameConfig = field(default_factory=FrameConfig)
    modem: ModemConfig = field(default_factory=ModemConfig)
    channel: ChannelConfig = field(default_factory=_default_channel)
    sync: SyncConfig = field(default_factory=SyncConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bits_per_point: int = 100_000
    pipeline_frames: int = 20_000
    retransmit_limit: int = 3
    workers: int = 1

    def __post_init__(self):
        try:
            self.mlp.check_frame(self.frame)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.bits_per_point < 1e4:
            raise ConfigError("bits_per_point must be >= 1e4")
        if self.retransmit_limit < 0 or self.workers < 1 or self.pipeline_frames < 1:
            raise ConfigError("retransmit_limit >= 0, workers >= 1 and pipeline_frames >= 1 required")
        if not self.sweep.points:
            raise ConfigError("sweep.points must not be empty")

    @property
    def frames_per_point(self) -> int:
        return -(-self.bits_per_point // self.frame.bits_per_frame)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        d["channel"] = self.channel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        sections = {
            "frame": FrameConfig,
            "modem": ModemConfig,
            "sync": SyncConfig,
            "mlp": MlpConfig,
            "train": TrainConfig,
            "sweep": SweepConfig,
            "dataset": DatasetConfig,
        }
        kw = {}
        try:
            for name, typ in sections.items():
                if name in d:
                    kw[name] = _build(typ, d.pop(name), name)
            if "channel" in d:
                ch = d.pop("channel") or {}
                _check_keys(ChannelConfig, ch, "channel")
                base = _default_channel().to_dict()
                base.update(ch)
                kw["channel"] = ChannelConfig.from_dict(base)
            _check_keys(cls, d, "top level")
            kw.update(d)
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _check_keys(typ, d: dict, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(typ)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


def _build(typ, d, where):
    d = d or {}
    _check_keys(typ, d, where)
    return typ(**d)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or defaults when ``path`` is None)."""
    d = {}
    if path is not None:
        try:
            with open(path) as f:
                d = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path} must hold a mapping")
    if overrides:
        d.update(overrides)
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
