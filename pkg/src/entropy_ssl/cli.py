"""Command-line interface: ``entropy-ssl <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .adaptation import DEFAULT_GRID, adapt_predictions, optimal_threshold_search
from .errors import ConfigError, EntropySSLError
from .metrics import evaluate, reject_scores_from_probs
from .records import (PredictionDump, read_ledger, read_predictions, write_ledger, write_manifest,
                      write_predictions)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("entropy_ssl")


def _add_config_flags(p):
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.lam=0.5 (repeatable)")
    p.add_argument("--output", help=f"output root (default ${ex.OUTPUT_ENV} or ./runs)")
    p.add_argument("--seed", type=int, help="scenario and training seed")
    p.add_argument("--regularizer", choices=("uniform", "prior", "off"))
    p.add_argument("--lam", type=float, help="regularizer weight")
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--repetitions", type=int)


def _config(args) -> ex.RunConfig:
    overrides = list(args.overrides)
    for flag, key in (("seed", "scenario.seed"), ("regularizer", "train.regularizer"),
                      ("lam", "train.lam"), ("epochs", "train.max_epochs"),
                      ("repetitions", "repetitions"), ("output", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return ex.load_config(args.config, overrides)


def cmd_scenario(args):
    cfg = _config(args)
    seed = cfg.run_seeds()[0]
    bundle = ex.build_scenario(cfg.scenario, seed)
    out = Path(args.manifest or cfg.resolved_output() / f"{cfg.name}-s{seed}-manifest.jsonl")
    write_manifest(out, bundle.manifest(), {**dataclasses.asdict(cfg.scenario), "seed": seed})
    print(json.dumps({"manifest": str(out), "n_labeled": len(bundle.y_labeled),
                      "n_unlabeled": len(bundle.X_unlabeled), "n_test": len(bundle.y_test),
                      "seen": list(bundle.original_partition.seen),
                      "unseen": list(bundle.original_partition.unseen)}))


def cmd_train(args):
    cfg = _config(args)
    rec = ex.run_experiment(cfg)
    print(json.dumps({"run_id": rec.run_id, "final": rec.final, "stop_report": rec.stop_report}))


def cmd_sweep(args):
    cfg = _config(args)
    if args.regularizers:
        cfg.regularizers = args.regularizers
    records = ex.sweep(cfg)
    out = cfg.resolved_output() / f"{cfg.name}-sweep"
    write_ledger(out / "ledger.jsonl", records)
    rows = ex.compare_runs(records, out)
    print(json.dumps(rows))


def _parse_threshold(value):
    if value == "optimal":
        return value
    try:
        t = float(value)
    except ValueError:
        raise ConfigError(f"threshold must be a number or 'optimal', got {value!r}")
    return t


def cmd_adapt(args):
    threshold = _parse_threshold(args.threshold)
    dump = read_predictions(args.predictions)
    part = dump.partition
    if threshold == "optimal":
        threshold, score, _ = optimal_threshold_search(dump.probs, dump.features, dump.labels, part,
                                                       DEFAULT_GRID, seed=args.seed)
    preds, _ = adapt_predictions(dump.probs, dump.features, part, threshold, seed=args.seed)
    out = PredictionDump(part, dump.ids, dump.labels, preds, dump.probs, dump.features,
                         meta={**dump.meta, "adapted_threshold": threshold})
    write_predictions(args.out, out)
    print(json.dumps({"out": str(args.out), "threshold": threshold}))


def cmd_eval(args):
    dump = read_predictions(args.predictions)
    renorm = "adapted_threshold" in dump.meta
    reject = reject_scores_from_probs(dump.probs, dump.partition, renormalize=renorm)
    report = evaluate(dump.preds, dump.probs, dump.labels, dump.partition, reject)
    print(json.dumps(report.to_dict()))


def cmd_compare(args):
    records = [r for path in args.ledgers for r in read_ledger(path)]
    rows = ex.compare_runs(records, args.out)
    if args.format == "json":
        print(json.dumps(rows))
        return
    header = f"{'method':<18}{'n':>3}" + "".join(f"{m:>18}" for m in ex.METRICS)
    print(header)
    for row in rows:
        cells = []
        for m in ex.METRICS:
            mean, std = row[f"{m}_mean"], row[f"{m}_std"]
            if mean is None:
                cells.append("n/a")
            else:
                cells.append(f"{mean:.3f}±{std:.3f}" if std is not None else f"{mean:.3f}")
        print(f"{row['method']:<18}{row['n']:>3}" + "".join(f"{c:>18}" for c in cells))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entropy-ssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="build a scenario and write its split manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", help="manifest output path")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("train", help="run one experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run all repetitions (and regularizers) of a config")
    _add_config_flags(p)
    p.add_argument("--regularizers", nargs="+", choices=("uniform", "prior", "off"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("adapt", help="threshold + K-means adaptation of a prediction file")
    p.add_argument("predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", default="optimal")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="summarise ledgers into tables and charts")
    p.add_argument("ledgers", nargs="+")
    p.add_argument("--out", help="directory for summary.json/.csv and scores.png")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EntropySSLError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
