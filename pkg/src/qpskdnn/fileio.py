"""
On-disk formats: IQ captures, frame datasets and trained models.

IQ capture
    ``cf32``: interleaved little-endian float32 I/Q. ``ci8``: interleaved
    int8 I/Q, value = code * scale (default 1/128). The sample rate and
    format live in a JSON sidecar ``<path>.json``.

Dataset (``.qpds``), all little-endian::

    0   4  magic b"QPDS"
    4   2  uint16 version (1)
    6   4  uint32 header length H
    10  H  UTF-8 JSON header: frame, alignment, channel, split, n_records,
           n_inputs, n_bits, extra metadata
    ..     n_records fixed-width records:
             n_inputs x float32   Re of each frame symbol, then Im
             ceil(n_bits/8) bytes label bits, MSB first, zero padded
             ceil(n_bits/8) bytes conventional bits, same packing
             uint32               transmitted frame index

    For the default 4-symbol frame a record is 32 + 1 + 1 + 4 = 38 bytes.

Model (``.qpm``)::

    0   4  magic b"QPMD"
    4   2  uint16 version (1)
    6   4  uint32 header length H
    10  H  UTF-8 JSON: layer_sizes, seed, sha256 of the payload
    ..     payload: per layer W (fan_in x fan_out, row-major) then b,
           float64 little-endian
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .dnn import FrameDataset, MlpConfig, MlpModel
from .dsp import IqBuffer

IQ_FORMATS = ("cf32", "ci8")
DATASET_MAGIC = b"QPDS"
MODEL_MAGIC = b"QPMD"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class FileFormatError(OSError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_iq(path, buf: IqBuffer, fmt: str = "cf32", scale: float = 1 / 128) -> None:
    if fmt not in IQ_FORMATS:
        raise FileFormatError(f"unknown IQ format {fmt!r}")
    inter = np.empty(2 * len(buf), dtype=np.float64)
    inter[0::2] = buf.samples.real
    inter[1::2] = buf.samples.imag
    if fmt == "cf32":
        data = inter.astype("<f4")
    else:
        data = np.clip(np.round(inter / scale), -128, 127).astype(np.int8)
    data.tofile(path)
    meta = {"format": fmt, "sample_rate_hz": buf.sample_rate_hz}
    if fmt == "ci8":
        meta["scale"] = scale
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def read_iq(path, fmt: str | None = None, sample_rate_hz: float | None = None, scale: float | None = None) -> IqBuffer:
    """Read a capture; explicit arguments override the sidecar."""
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    fmt = fmt or meta.get("format", "cf32")
    if fmt not in IQ_FORMATS:
        raise FileFormatError(f"unknown IQ format {fmt!r}")
    rate = sample_rate_hz or meta.get("sample_rate_hz")
    if rate is None:
        raise FileFormatError(f"no sample rate for {path}; pass one or provide {side.name}")
    raw = Path(path).read_bytes()
    if fmt == "cf32":
        if len(raw) % 8:
            raise FileFormatError(f"{path}: {len(raw)} bytes is not a whole number of cf32 samples")
        v = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        if len(raw) % 2:
            raise FileFormatError(f"{path}: odd byte count for ci8 samples")
        s = scale if scale is not None else meta.get("scale", 1 / 128)
        v = np.frombuffer(raw, dtype=np.int8).astype(np.float64) * s
    return IqBuffer(v[0::2] + 1j * v[1::2], float(rate))


def _write_blob(path, magic: bytes, header: dict, payload: bytes) -> None:
    h = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(magic, FORMAT_VERSION, len(h)))
        f.write(h)
        f.write(payload)


def _read_blob(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FileFormatError(f"{path}: file too short")
    m, version, hlen = _PREFIX.unpack_from(raw)
    if m != magic:
        raise FileFormatError(f"{path}: bad magic {m!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise FileFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : end])
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: corrupt header ({e})") from None
    return header, raw[end:]


def dataset_record_dtype(n_inputs: int, n_bits: int) -> np.dtype:
    nb = -(-n_bits // 8)
    return np.dtype([("inputs", "<f4", (n_inputs,)), ("labels", "u1", (nb,)), ("conv", "u1", (nb,)), ("frame", "<u4")])


def write_dataset(path, ds: FrameDataset) -> None:
    n_in, n_bits = ds.inputs.shape[1], ds.labels.shape[1]
    rec = np.zeros(len(ds), dtype=dataset_record_dtype(n_in, n_bits))
    rec["inputs"] = ds.inputs
    rec["labels"] = np.packbits(ds.labels, axis=1)
    rec["conv"] = np.packbits(ds.conventional, axis=1)
    rec["frame"] = ds.frame_index
    header = {
        "split": ds.split,
        "n_records": len(ds),
        "n_inputs": n_in,
        "n_bits": n_bits,
        "metadata": ds.metadata,
    }
    _write_blob(path, DATASET_MAGIC, header, rec.tobytes())


def read_dataset(path) -> FrameDataset:
    header, payload = _read_blob(path, DATASET_MAGIC)
    dt = dataset_record_dtype(header["n_inputs"], header["n_bits"])
    if len(payload) != header["n_records"] * dt.itemsize:
        raise FileFormatError(f"{path}: record section has {len(payload)} bytes, expected {header['n_records'] * dt.itemsize}")
    rec = np.frombuffer(payload, dtype=dt)
    nb = header["n_bits"]
    return FrameDataset(
        inputs=rec["inputs"].astype(np.float64),
        labels=np.unpackbits(rec["labels"], axis=1)[:, :nb],
        conventional=np.unpackbits(rec["conv"], axis=1)[:, :nb],
        frame_index=rec["frame"].astype(np.int64),
        split=header["split"],
        metadata=header.get("metadata", {}),
    )


def _model_payload(model: MlpModel) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())


def model_checksum(model: MlpModel) -> str:
    return hashlib.sha256(_model_payload(model)).hexdigest()


def save_model(path, model: MlpModel, extra: dict | None = None) -> str:
    payload = _model_payload(model)
    digest = hashlib.sha256(payload).hexdigest()
    header = {"layer_sizes": list(model.config.layer_sizes), "seed": model.config.seed, "sha256": digest}
    if extra:
        header["extra"] = extra
    _write_blob(path, MODEL_MAGIC, header, payload)
    return digest


def load_model(path) -> MlpModel:
    header, payload = _read_blob(path, MODEL_MAGIC)
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise FileFormatError(f"{path}: checksum mismatch")
    cfg = MlpConfig(tuple(header["layer_sizes"]), header.get("seed", 0))
    sizes = cfg.layer_sizes
    flat = np.frombuffer(payload, dtype="<f8")
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if flat.size != expected:
        raise FileFormatError(f"{path}: payload holds {flat.size} values, expected {expected}")
    weights, biases, i = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[i : i + a * b].reshape(a, b).copy())
        i += a * b
        biases.append(flat[i : i + b].copy())
        i += b
    return MlpModel(weights, biases, cfg)


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
