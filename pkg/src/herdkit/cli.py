"""Command-line entry point: ``herdkit <subcommand> ...``.

Errors are reported on stderr as a single line ``herdkit: error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import analysis
from .config import ConfigError, derive_seed, load_config_file
from .data import load_cifar10
from .models import load_checkpoint
from .probes import ProbeRecord, extract_embeddings, run_probe


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _config(args):
    return load_config_file(args.config, args.override or ())


def _add_config_args(p, required=True):
    p.add_argument("--config", required=required, help="TOML experiment config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable, dotted keys allowed)")


def _peer_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad integer list {text!r}") from None


def cmd_train(args):
    from .herd import train

    cfg = _config(args)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    result = train(cfg)
    print(json.dumps({"output_dir": str(result.output_dir), "batches": len(result.reports)}))


def cmd_probe(args):
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    fit_set = load_cifar10(cfg.dataset_dir, "train")
    test_set = load_cifar10(cfg.dataset_dir, "test")
    pcfg = cfg.probe_config
    subset = None if args.full else pcfg.fit_subset
    fit = extract_embeddings([model], fit_set, subset)
    test = extract_embeddings([model], test_set, None if args.full else pcfg.test_subset)
    seed = derive_seed(cfg.master_seed, f"probe-{args.kind}-checkpoint-{Path(args.checkpoint).name}")
    result = run_probe(args.kind, fit, test, pcfg, seed, num_classes=10)
    print(json.dumps(result.__dict__))
    log_path = Path(args.log) if args.log else Path(args.checkpoint).parent / "probe_log.csv"
    new = not log_path.exists() or log_path.stat().st_size == 0
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(ProbeRecord.header)
        writer.writerow(ProbeRecord(args.step, args.peer_id, result).row())


def _run_dir(args, cfg) -> Path:
    return Path(args.run_dir or cfg.output_dir)


def cmd_ensemble_eval(args):
    cfg = _config(args)
    run_dir = _run_dir(args, cfg)
    sizes = _peer_list(args.peers)
    models = [load_checkpoint(run_dir / f"peer_{i}.final.ckpt") for i in range(max(sizes))]
    fit_set = load_cifar10(cfg.dataset_dir, "train")
    test_set = load_cifar10(cfg.dataset_dir, "test")
    seed = derive_seed(cfg.master_seed, f"probe-{args.kind}-ensemble")
    results = analysis.ensemble_eval(models, fit_set, test_set, sizes, cfg.probe_config,
                                     args.kind, seed)
    out = Path(args.out) if args.out else run_dir / "ensemble.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("num_peers", "probe_kind", "macro_f1", "accuracy", "fit_size", "test_size"))
        for k, r in results:
            writer.writerow((k, r.probe_kind, repr(r.macro_f1), repr(r.accuracy),
                             r.train_size, r.test_size))
            print(json.dumps({"num_peers": k, **r.__dict__}))


def cmd_distance_shift(args):
    cfg = _config(args)
    run_dir = _run_dir(args, cfg)
    init_path = run_dir / f"peer_{args.peer}.init.ckpt"
    if not init_path.exists():
        raise CliError(f"missing initialization checkpoint {init_path}")
    before = load_checkpoint(init_path)
    after = load_checkpoint(run_dir / f"peer_{args.peer}.final.ckpt")
    dataset = load_cifar10(cfg.dataset_dir, args.split)
    seed = args.seed if args.seed is not None else derive_seed(cfg.master_seed, "distance-shift")
    report = analysis.distance_shift(before, after, dataset, args.sample_size, seed)
    report.to_csv(Path(args.out) if args.out else run_dir / "distance_shift.csv")
    print(json.dumps({"peer": args.peer, "mean_before": report.mean_before,
                      "mean_after": report.mean_after,
                      "fraction_increased": report.fraction_increased,
                      "pairs": len(report.d_before)}))


def cmd_sweep(args):
    spec = analysis.load_sweep_spec(Path(args.spec).read_text(encoding="utf-8"))
    out = analysis.run_sweep(spec, args.out, args.workers)
    print(json.dumps({"sweep_dir": str(out), "runs": len(spec.grid())}))


def cmd_emit_plots(args):
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / f"plot_{args.kind}.csv"
    if args.kind == "distance-shift":
        source = _read_distance_csv(run_dir / "distance_shift.csv")
    else:
        source = analysis.load_metrics(run_dir)
    n = analysis.emit_plot_data(source, args.kind, out, args.metric, args.svg)
    print(json.dumps({"path": str(out), "rows": n}))


class _Pairs:
    def __init__(self, pairs):
        self.pairs = pairs


def _read_distance_csv(path):
    if not path.exists():
        raise CliError(f"missing {path}; run distance-shift first")
    with open(path, newline="") as fh:
        return _Pairs([(float(r["d_before"]), float(r["d_after"])) for r in csv.DictReader(fh)])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="herdkit", description="Peer-group self-distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a peer pool")
    _add_config_args(p)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="probe one checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("knn", "linear", "mlp"), default="linear")
    p.add_argument("--full", action="store_true", help="fit on all 50000 training images")
    p.add_argument("--step", type=int, default=-1)
    p.add_argument("--peer-id", type=int, default=-1)
    p.add_argument("--log", help="probe_log.csv to append to")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ensemble-eval", help="probe concatenated peer embeddings")
    _add_config_args(p)
    p.add_argument("--run-dir")
    p.add_argument("--peers", default="1,2,4,8", help="ensemble sizes, e.g. 1,2,4,8")
    p.add_argument("--kind", choices=("knn", "linear", "mlp"), default="linear")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("distance-shift", help="before/after cosine distances of shuffled pairs")
    _add_config_args(p)
    p.add_argument("--run-dir")
    p.add_argument("--peer", type=int, required=True)
    p.add_argument("--sample-size", type=int, default=2048)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_distance_shift)

    p = sub.add_parser("sweep", help="run an ablation grid")
    p.add_argument("--spec", required=True, help="TOML base config with a [sweep] table")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("emit-plots", help="write plot-ready CSV (and optional SVG)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--kind", choices=analysis.PLOT_KINDS, required=True)
    p.add_argument("--metric", default="linear_accuracy")
    p.add_argument("--out")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("HERDKIT_THREADS")
    if threads and threads.isdigit() and int(threads) > 0:
        torch.set_num_threads(int(threads))
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise CliError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
    except CliError as exc:
        print(f"herdkit: error: UsageError: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, ValueError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"herdkit: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
