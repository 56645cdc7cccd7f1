"""Command-line entry point: ``qpskdnn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, dump_config, load_config
from .dnn import FrameDataset, detect, evaluate_ber
from .experiment import (
    RetransmitExhausted,
    ber_sweep,
    build_filters,
    constellation_rows,
    frames_to_dataset,
    live_tx,
    make_datasets,
    run_pipeline,
    spectrum_rows,
    train_model,
)
from .fileio import (
    FileFormatError,
    load_model,
    model_checksum,
    read_dataset,
    read_iq,
    save_model,
    write_csv,
    write_dataset,
    write_iq,
    write_json,
)
from .framing import AlignmentError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALIGN = 3
EXIT_IO = 4

log = logging.getLogger("qpskdnn")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="qpskdnn", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", parents=[common], help="TX -> channel -> RX -> alignment")
    p.add_argument("--frames", type=int, help="frames to transmit")
    p.add_argument("--snr", type=float, help="override channel SNR (dB)")
    p.add_argument("--save-iq", action="store_true", help="also write the channel output as cf32")

    p = sub.add_parser("dataset", parents=[common], help="generate train/test splits")
    p.add_argument("--train-frames", type=int)
    p.add_argument("--test-frames", type=int)

    p = sub.add_parser("train", parents=[common], help="train the detector")
    p.add_argument("--dataset", type=Path, help="train split (default: OUT/train.qpds)")

    p = sub.add_parser("ber-sweep", parents=[common], help="BER of both detectors over SNR")
    p.add_argument("--model", type=Path, help="model file (default: OUT/model.qpm)")
    p.add_argument("--points", type=float, nargs="+", help="override sweep points")
    p.add_argument("--bits", type=int, help="override bits_per_point")

    p = sub.add_parser("spectrum", parents=[common], help="Welch spectrum as CSV")
    p.add_argument("--input", type=Path, help="IQ file; live TX when omitted")
    p.add_argument("--format", choices=["cf32", "ci8"])
    p.add_argument("--sample-rate", type=float)
    p.add_argument("--lpf", action="store_true", help="add a post-LPF column")
    p.add_argument("--segment", type=int, default=4096)

    p = sub.add_parser("constellation", parents=[common], help="aligned symbol cloud as CSV")
    p.add_argument("--dataset", type=Path, help="read symbols from a dataset instead of running the pipeline")
    p.add_argument("--frames", type=int, default=5000)

    p = sub.add_parser("iq", parents=[common], help="inspect or convert IQ captures")
    p.add_argument("action", choices=["inspect", "convert"])
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, nargs="?")
    p.add_argument("--format", choices=["cf32", "ci8"], help="input format (default: sidecar or cf32)")
    p.add_argument("--to", choices=["cf32", "ci8"], default="cf32")
    p.add_argument("--scale", type=float, default=1 / 128)
    p.add_argument("--sample-rate", type=float)
    return ap


def _resolve(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    if getattr(args, "points", None):
        cfg = cfg.from_dict({**cfg.to_dict(), "sweep": {**cfg.to_dict()["sweep"], "points": args.points}})
    if getattr(args, "bits", None):
        cfg = cfg.replace(bits_per_point=args.bits)
    return cfg


def cmd_pipeline(cfg, args) -> int:
    ch = cfg.channel if args.snr is None else dataclasses.replace(cfg.channel, snr_db=args.snr)
    run = run_pipeline(cfg, args.frames, ch)
    args.out.mkdir(parents=True, exist_ok=True)
    ds = frames_to_dataset(run.frames, split="test", metadata={"config_hash": config_hash(cfg), "alignment": run.alignment.to_dict(), "channel": run.channel.to_dict()})
    write_dataset(args.out / "pipeline.qpds", ds)
    conv = evaluate_ber(ds.conventional, ds.labels)
    report = {
        "config_hash": config_hash(cfg),
        "attempts": run.attempts,
        "failures": run.failures,
        "alignment": run.alignment.to_dict(),
        "channel": run.channel.to_dict(),
        "frames_transmitted": len(run.tx_bits) // cfg.frame.bits_per_frame,
        "frames_aligned": len(run.frames),
        "conventional_ber": conv,
    }
    write_json(args.out / "alignment.json", report)
    if args.save_iq:
        write_iq(args.out / "rx.cf32", run.rx)
    print(f"aligned {len(run.frames)} frames in {run.attempts} attempt(s); conventional BER {conv:.3e}")
    return EXIT_OK


def cmd_dataset(cfg, args) -> int:
    train_ds, test_ds = make_datasets(cfg, args.train_frames, args.test_frames)
    args.out.mkdir(parents=True, exist_ok=True)
    write_dataset(args.out / "train.qpds", train_ds)
    summary = {"config_hash": config_hash(cfg), "train_frames": len(train_ds)}
    if test_ds is not None:
        write_dataset(args.out / "test.qpds", test_ds)
        summary["test_frames"] = len(test_ds)
    write_json(args.out / "dataset.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    path = args.dataset or args.out / "train.qpds"
    ds = read_dataset(path)
    model, hist = train_model(cfg, ds)
    args.out.mkdir(parents=True, exist_ok=True)
    digest = save_model(args.out / "model.qpm", model, {"config_hash": config_hash(cfg), "best_epoch": hist.best_epoch})
    write_csv(args.out / "history.csv", hist.rows())
    print(f"best epoch {hist.best_epoch}, val accuracy {hist.best_val_acc:.5f}, model sha256 {digest[:16]}")
    test_path = path.with_name("test.qpds")
    if test_path.exists():
        test = read_dataset(test_path)
        print(f"test BER: dnn {evaluate_ber(detect(model, test), test.labels):.3e}, conventional {evaluate_ber(test.conventional, test.labels):.3e}")
    return EXIT_OK


def cmd_ber_sweep(cfg, args) -> int:
    model = load_model(args.model or args.out / "model.qpm")
    report = ber_sweep(cfg, model, model_checksum(model))
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "ber.csv", report.rows())
    write_json(args.out / "ber.json", report.to_dict())
    for r in report.rows():
        print(f"snr {r['snr_db']:6.2f} dB  g_r {r['g_r_db']:6.2f} dB  conv {r['conventional_ber']:.3e}  dnn {r['dnn_ber']:.3e}  bits {r['bits_evaluated']}")
    return EXIT_OK


def cmd_spectrum(cfg, args) -> int:
    if args.input is not None:
        buf = read_iq(args.input, args.format, args.sample_rate)
    else:
        buf = live_tx(cfg)
    if len(buf) < args.segment:
        raise FileFormatError(f"input has {len(buf)} samples, fewer than one {args.segment}-sample segment")
    lpf = build_filters(cfg)[1] if args.lpf else None
    rows = spectrum_rows(buf, lpf, args.segment)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "spectrum.csv", rows)
    print(f"wrote {len(rows)} bins to {args.out / 'spectrum.csv'}")
    return EXIT_OK


def cmd_constellation(cfg, args) -> int:
    L = cfg.frame.frame_len_symbols
    if args.dataset is not None:
        ds: FrameDataset = read_dataset(args.dataset)
        sym = ds.inputs[:, :L] + 1j * ds.inputs[:, L:]
        rows = [
            {"i": float(v.real), "q": float(v.imag), "slot_type": "pilot" if k == cfg.frame.pilot_position else "data"}
            for v, k in zip(sym.ravel(), np.tile(np.arange(L), len(sym)))
        ]
    else:
        run = run_pipeline(cfg, args.frames)
        rows = constellation_rows(run.frames, cfg.frame.pilot_position)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "constellation.csv", rows, ["i", "q", "slot_type"])
    print(f"wrote {len(rows)} points to {args.out / 'constellation.csv'}")
    return EXIT_OK


def cmd_iq(cfg, args) -> int:
    buf = read_iq(args.input, args.format, args.sample_rate)
    if args.action == "inspect":
        p = float(np.mean(np.abs(buf.samples) ** 2)) if len(buf) else 0.0
        print(json.dumps({"samples": len(buf), "sample_rate_hz": buf.sample_rate_hz, "mean_power": p, "peak": float(np.max(np.abs(buf.samples), initial=0.0))}))
        return EXIT_OK
    if args.output is None:
        raise FileFormatError("convert needs an output path")
    write_iq(args.output, buf, args.to, args.scale)
    return EXIT_OK


COMMANDS = {
    "pipeline": cmd_pipeline,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "ber-sweep": cmd_ber_sweep,
    "spectrum": cmd_spectrum,
    "constellation": cmd_constellation,
    "iq": cmd_iq,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(dump_config(cfg), end="")
        print(f"# config hash {config_hash(cfg)}")
        return EXIT_OK
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RetransmitExhausted, AlignmentError) as e:
        print(f"alignment failed: {e}", file=sys.stderr)
        return EXIT_ALIGN
    except (FileFormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
