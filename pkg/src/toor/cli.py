"""Command-line entry point: ``toor {gen-data,train,evaluate,sweep,metrics}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every file is
written below ``--out``; each subcommand prints the path of its main result.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import build_mismatch_split, gauss6_4, generate_mixture, load_csv, write_csv
from .metrics import detection_metrics, write_histogram
from .networks import load_checkpoint
from .scoring import read_pool_dump
from .trainer import REPORT_FIELDS, _fmt, evaluate, run

log = logging.getLogger("toor")


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p, out_required=True):
    p.add_argument("--config", type=Path, help="key=value experiment config")
    p.add_argument("--seed", type=int, help="override experiment.seeds with one seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--method", help="override experiment.methods")
    p.add_argument("--zeta", type=float, help="override the OOD proportion")


def build_parser():
    parser = _Parser(prog="toor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_common(sub.add_parser("gen-data", help="write the dataset and its splits as CSV"))
    _add_common(sub.add_parser("train", help="train one (method, zeta, seed) run"))
    ev = sub.add_parser("evaluate", help="accuracy of the checkpoint in a run directory")
    _add_common(ev)
    ev.add_argument("--data", type=Path, help="labeled CSV to evaluate on instead of the "
                                              "config's test split")
    _add_common(sub.add_parser("sweep", help="all methods x zetas x seeds, plus aggregate"))
    me = sub.add_parser("metrics", help="detection metrics and score histogram of a run")
    _add_common(me)
    me.add_argument("--pool", type=Path, help="pool dump (default OUT/pool.csv)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["experiment.seeds"] = (args.seed,)
    if args.method is not None:
        overrides["experiment.methods"] = tuple(m.strip() for m in args.method.split(","))
    if args.zeta is not None:
        overrides["data.zeta"] = args.zeta
        overrides["experiment.zetas"] = (args.zeta,)
    cfg = cfg.override(**overrides) if overrides else cfg
    cfg.validate()
    return cfg


def make_dataset(cfg: ExperimentConfig, seed: int):
    if cfg["data.benchmark"] == "csv":
        return load_csv(cfg["data.csv"])
    return generate_mixture(gauss6_4(cfg["data.id_count"], cfg["data.ood_count"], seed))


def make_splits(cfg: ExperimentConfig, zeta: float, seed: int):
    return build_mismatch_split(make_dataset(cfg, seed), cfg.split_spec(zeta, seed))


def run_dir(out: Path, method: str, zeta: float, seed: int) -> Path:
    return out / method / f"zeta={zeta:g}" / f"seed={seed}"


def execute_run(cfg: ExperimentConfig, method: str, zeta: float, seed: int, out: Path):
    """Train one configuration and write all of its artifacts into ``out``."""
    splits = make_splits(cfg, zeta, seed)
    out.mkdir(parents=True, exist_ok=True)
    trainer = run(cfg.train_config(method, seed), splits, out)
    write_histogram(trainer.pool.score, splits.truth, out / "histogram.csv")
    (out / "config.txt").write_text(cfg.dumps())
    return trainer


def cmd_gen_data(args, cfg):
    seed = cfg.seeds[0]
    args.out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg, seed)
    write_csv(data, args.out / "dataset.csv")
    sp = build_mismatch_split(data, cfg.split_spec(cfg.zetas[0], seed))
    write_csv(sp.labeled, args.out / "labeled.csv")
    write_csv(sp.unlabeled, args.out / "unlabeled.csv")
    write_csv(sp.test, args.out / "test.csv", roles=["test"] * len(sp.test))
    return args.out / "dataset.csv"


def _single(values, what):
    if len(values) != 1:
        raise UsageFailure(f"this command runs a single {what}; got {list(values)} "
                           f"(override with --{what})")
    return values[0]


def cmd_train(args, cfg):
    method = _single(cfg.methods, "method")
    zeta = _single(cfg.zetas, "zeta")
    seed = _single(cfg.seeds, "seed")
    execute_run(cfg, method, zeta, seed, args.out)
    return args.out / "report.json"


def cmd_evaluate(args, cfg):
    ckpt = args.out / "checkpoint.bin"
    if not ckpt.exists():
        raise UsageFailure(f"no checkpoint at {ckpt}")
    bundle = load_checkpoint(ckpt)
    if args.data is not None:
        test = load_csv(args.data)
        test = test.subset(np.flatnonzero(test.y >= 0))
    else:
        test = make_splits(cfg, _single(cfg.zetas, "zeta"), _single(cfg.seeds, "seed")).test
    acc = evaluate(bundle, test.X, test.y)
    path = args.out / "evaluation.json"
    path.write_text(json.dumps({"accuracy": acc, "n": int(len(test.y))}, sort_keys=True) + "\n")
    return path


def cmd_metrics(args, cfg):
    pool_path = args.pool or args.out / "pool.csv"
    dump = read_pool_dump(pool_path)
    m = detection_metrics(dump["score"], dump["tag"], dump["truth"])
    args.out.mkdir(parents=True, exist_ok=True)
    write_histogram(dump["score"], dump["truth"], args.out / "histogram.csv")
    path = args.out / "detection.json"
    path.write_text(json.dumps(m, sort_keys=True, indent=2) + "\n")
    return path


def aggregate(results):
    """``{(method, zeta): [accuracy, ...]}`` -> rows of mean and population std."""
    rows = []
    for (method, zeta), accs in results.items():
        accs = np.asarray(accs, dtype=np.float64)
        rows.append({"method": method, "zeta": zeta, "n_runs": len(accs),
                     "mean_accuracy": float(accs.mean()) if len(accs) else math.nan,
                     "std_accuracy": float(accs.std()) if len(accs) else math.nan})
    return rows


def cmd_sweep(args, cfg):
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    metric_rows = []
    failures = []
    for method in cfg.methods:
        for zeta in cfg.zetas:
            accs = results.setdefault((method, zeta), [])
            for seed in cfg.seeds:
                rd = run_dir(out, method, zeta, seed)
                try:
                    trainer = execute_run(cfg, method, zeta, seed, rd)
                except Exception as exc:  # recorded per run; aggregation goes on
                    rd.mkdir(parents=True, exist_ok=True)
                    (rd / "FAILED.txt").write_text(traceback.format_exc())
                    failures.append(f"{method} zeta={zeta:g} seed={seed}: {exc}")
                    log.error("run failed: %s", failures[-1])
                    continue
                accs.append(trainer.report.last_accuracy)
                for r in trainer.report.records:
                    metric_rows.append([method, f"{zeta:g}", seed] + [r[k] for k in REPORT_FIELDS])
                log.info("%s zeta=%g seed=%d acc=%.4f", method, zeta, seed,
                         trainer.report.last_accuracy)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "zeta", "seed"] + REPORT_FIELDS)
        for row in metric_rows:
            w.writerow(row[:3] + [_fmt(v) for v in row[3:]])
    agg_path = out / "aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "zeta", "n_runs", "mean_accuracy", "std_accuracy"])
        for r in aggregate(results):
            w.writerow([r["method"], f"{r['zeta']:g}", r["n_runs"], _fmt(r["mean_accuracy"]),
                        _fmt(r["std_accuracy"])])
    if failures:
        (out / "failures.txt").write_text("\n".join(failures) + "\n")
    return agg_path


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"toor: config error: {exc}", file=sys.stderr)
        return 1
    try:
        path = COMMANDS[args.command](args, cfg)
    except UsageFailure as exc:
        print(f"toor: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"toor: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
