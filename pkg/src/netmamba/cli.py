"""Command-line surface: extract, pretrain, finetune, evaluate, bench.

Exit codes: 0 success, 2 usage/data problems, 3 checkpoint mismatches,
4 numeric faults during training or inference.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    cap = os.environ.get("NETMAMBA_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()  # must precede the first numpy import

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import checkpoint as ckpt
from . import config as cfgmod
from . import data as datamod
from . import model as nm
from . import traffic
from . import train as trainmod
from .errors import (
    EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE,
    CheckpointMismatchError, ConfigError, DataError, EmptyFlowError,
    NumericFaultError, ParseError, UnsupportedFormatError,
)
from .pcap import parse_capture

_USAGE_ERRORS = (ConfigError, DataError, ParseError, UnsupportedFormatError,
                 EmptyFlowError, FileNotFoundError, NotADirectoryError)


def _load_file_config(path) -> dict:
    if path is None:
        return {}
    return cfgmod.load_config(path)


def _dataclass_kwargs(cls, values: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}


def _repr_config(values: dict) -> traffic.ReprConfig:
    return traffic.ReprConfig(**_dataclass_kwargs(
        traffic.ReprConfig, cfgmod.subset(values, cfgmod.REPR_KEYS)))


def _model_config(values: dict, seq_len: int, stride_len: int,
                  num_classes: int) -> nm.ModelConfig:
    kwargs = _dataclass_kwargs(
        nm.ModelConfig, cfgmod.subset(values, cfgmod.MODEL_KEYS))
    kwargs.update(seq_len=seq_len, stride_len=stride_len,
                  num_classes=num_classes)
    return nm.ModelConfig(**kwargs)


def _train_config(values: dict, defaults: trainmod.TrainConfig) -> trainmod.TrainConfig:
    kwargs = _dataclass_kwargs(
        trainmod.TrainConfig, cfgmod.subset(values, cfgmod.TRAIN_KEYS))
    merged = {**defaults.__dict__, **kwargs}
    return trainmod.TrainConfig(**merged)


def _tokens(sf: datamod.StrideFile, values: dict) -> np.ndarray:
    if values.get("patch_split"):
        return nm.patch_tokens(sf.data, sf.stride_len)
    return sf.strides


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        print(f"error: input directory {input_dir} does not exist",
              file=sys.stderr)
        return EXIT_USAGE
    flags = {
        "anonymize_ips": False if args.no_anonymize_ips else None,
        "include_header": False if args.no_header else None,
        "include_payload": False if args.no_payload else None,
        "min_packets": args.min_packets,
        "limit_lower": args.limit_lower,
        "limit_upper": args.limit_upper,
        "seed": args.seed,
    }
    values = cfgmod.merge(_load_file_config(args.config), flags)
    repr_cfg = _repr_config(values)
    seed = values.get("seed", 0)
    min_packets = values.get("min_packets", 1)
    ratios = (values.get("train_ratio", 0.8), values.get("val_ratio", 0.1),
              values.get("test_ratio", 0.1))

    class_dirs = sorted(d for d in input_dir.iterdir() if d.is_dir())
    if not class_dirs:
        print(f"error: {input_dir} has no class subdirectories", file=sys.stderr)
        return EXIT_USAGE

    per_class: dict[int, list] = {}
    summary: dict = {"classes": {}, "file_errors": [],
                     "malformed_packets": 0, "skipped_packets": 0}
    for label, class_dir in enumerate(class_dirs):
        stats = traffic.AssemblyStats()
        flows: list[traffic.FlowRecord] = []
        for pcap_path in sorted(class_dir.glob("*.pcap")):
            try:
                packets = parse_capture(pcap_path)
            except (ParseError, UnsupportedFormatError) as exc:
                summary["file_errors"].append({"file": str(pcap_path),
                                               "error": str(exc)})
                continue
            flows.extend(traffic.assemble_flows(packets, repr_cfg, stats))
        kept, dropped = [], 0
        for flow in flows:
            if len(flow.packets) < min_packets:
                dropped += 1
                continue
            flow.label = label
            try:
                kept.append(traffic.build_sample(flow, repr_cfg))
            except EmptyFlowError:
                dropped += 1
        per_class[label] = kept
        summary["classes"][class_dir.name] = {
            "flows_kept": len(kept), "flows_dropped": dropped}
        summary["malformed_packets"] += stats.malformed_packets
        summary["skipped_packets"] += stats.skipped_packets

    if "limit_lower" in values or "limit_upper" in values:
        lower = values.get("limit_lower", 0)
        upper = values.get("limit_upper", 2**31)
        per_class = datamod.balance_dataset(per_class, lower, upper, seed)
        for label, class_dir in enumerate(class_dirs):
            entry = summary["classes"][class_dir.name]
            entry["flows_after_balance"] = len(per_class.get(label, []))

    samples = [s for label in sorted(per_class) for s in per_class[label]]
    if not samples:
        print("error: no usable flows were extracted", file=sys.stderr)
        return EXIT_USAGE
    train, val, test = datamod.split_dataset(samples, ratios, seed)

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = len(class_dirs)
    for name, part in (("train", train), ("val", val), ("test", test)):
        datamod.write_samples(out_dir / f"{name}.nmstride", part, repr_cfg,
                              n_classes)
        summary[f"{name}_samples"] = len(part)
    datamod.write_manifest(out_dir / "manifest.json",
                           [d.name for d in class_dirs])
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"extracted {len(samples)} flows from {n_classes} classes "
          f"-> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands


def _resolve_data(path, split: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.nmstride"
    if not p.exists():
        raise FileNotFoundError(f"sample file {p} does not exist")
    return p


def cmd_pretrain(args) -> int:
    flags = {"steps": args.steps, "batch_size": args.batch, "lr": args.lr,
             "seed": args.seed, "mask_ratio": args.mask_ratio}
    values = cfgmod.merge(_load_file_config(args.config), flags)
    sf = datamod.read_samples(_resolve_data(args.data, "train"))
    tokens = _tokens(sf, values)
    cfg = _model_config(values, seq_len=sf.n_strides + 1,
                        stride_len=sf.stride_len, num_classes=max(sf.num_classes, 2))
    tcfg = _train_config(values, trainmod.pretrain_defaults())
    out_dir = Path(args.output)
    result = trainmod.pretrain(tokens, cfg, tcfg, out_dir=out_dir,
                               resume=args.resume)
    print(f"pre-training done: best loss {result.best_loss:.6f} at step "
          f"{result.best_step}; artifacts in {out_dir}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    if args.init is None and not args.from_scratch:
        print("error: pass --init CHECKPOINT or --from-scratch", file=sys.stderr)
        return EXIT_USAGE
    flags = {"epochs": args.epochs, "batch_size": args.batch, "lr": args.lr,
             "seed": args.seed, "early_stop_val_acc": args.early_stop}
    values = cfgmod.merge(_load_file_config(args.config), flags)
    splits = {}
    geometry = None
    for name in ("train", "val", "test"):
        sf = datamod.read_samples(_resolve_data(args.data, name))
        splits[name] = (_tokens(sf, values), sf.labels)
        geometry = sf
    if (splits["train"][1] < 0).any():
        raise DataError("training split contains unlabeled samples")
    cfg = _model_config(values, seq_len=geometry.n_strides + 1,
                        stride_len=geometry.stride_len,
                        num_classes=geometry.num_classes)
    tcfg = _train_config(values, trainmod.finetune_defaults())
    out_dir = Path(args.output)
    result = trainmod.finetune(splits, cfg, tcfg, init=args.init,
                               out_dir=out_dir)
    print(json.dumps(result.report.to_dict()))
    print(f"fine-tuning done: best val acc {result.best_val_acc:.4f} at epoch "
          f"{result.best_epoch}; test acc {result.report.accuracy:.4f}; "
          f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, _, _ = ckpt.load_model(args.checkpoint)
    sf = datamod.read_samples(_resolve_data(args.data, "test"))
    values = cfgmod.merge(_load_file_config(args.config), {})
    report = trainmod.evaluate(params, _tokens(sf, values), sf.labels,
                               batch_size=args.batch or 64)
    text = report.to_json(indent=2)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    values = cfgmod.merge(_load_file_config(args.config), {})
    cfg = _model_config(values, seq_len=401,
                        stride_len=values.get("stride_len", 4), num_classes=2)
    batch_sizes = [int(x) for x in args.batch_sizes.split(",")]
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = bench_mod.bench_forward(cfg, batch_sizes, lengths,
                                   repeats=args.repeats, seed=args.seed or 0)
    if args.output:
        bench_mod.write_bench_csv(rows, args.output)
    print(bench_mod.CSV_HEADER)
    for r in rows:
        print(f"{r['batch']},{r['seq_len']},{r['samples_per_sec']:.6g},"
              f"{r['peak_bytes']}")
    first_batch = rows[0]["batch"]
    series = [(r["seq_len"], r["median_seconds"]) for r in rows
              if r["batch"] == first_batch]
    if len(series) >= 2:
        exponent = bench_mod.fit_scaling_exponent(*zip(*series))
        print(f"scaling exponent over lengths {[s for s, _ in series]}: "
              f"{exponent:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netmamba",
        description="stride-based traffic representation and a selective "
                    "state space classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="pcap tree -> NMSTRIDE sample files")
    p.add_argument("--input", required=True,
                   help="directory laid out as <class_name>/*.pcap")
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--min-packets", type=int, dest="min_packets")
    p.add_argument("--no-anonymize-ips", action="store_true")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--no-payload", action="store_true")
    p.add_argument("--limit-lower", type=int, dest="limit_lower")
    p.add_argument("--limit-upper", type=int, dest="limit_upper")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    p.add_argument("--data", required=True, help="NMSTRIDE file or extract dir")
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--resume", help="resume from a last.nmckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised classification training")
    p.add_argument("--data", required=True, help="extract output dir")
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="pre-training checkpoint for the encoder")
    p.add_argument("--from-scratch", action="store_true",
                   help="random init (the no-pre-training ablation)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--early-stop", type=float, dest="early_stop",
                   help="stop when validation accuracy reaches this value")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a split")
    p.add_argument("--data", required=True, help="NMSTRIDE file or extract dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--output", help="also write the JSON report here")
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="forward-pass throughput and scaling")
    p.add_argument("--config")
    p.add_argument("--batch-sizes", default="1,8", dest="batch_sizes")
    p.add_argument("--lengths", default="400,800,1600")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericFaultError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
