"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 a ``--check``
property failed. Output directories default to ``$KGREPORT_OUTPUT_ROOT/<command>``
(``runs/<command>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import OUTPUT_ROOT_ENV, load_config
from .exceptions import ConfigError, ContractError
from .nlg_metrics import METRIC_COLUMNS

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3

# CLI flag -> config key; every flag defaults to None so the config file wins unless given
_OVERRIDES = {
    "n": int, "corpus_seed": int, "imbalance_exponent": float, "noise_sd": float,
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float, "seed": int,
    "dtype": str, "eval_every": int, "clf_epochs": int, "clf_lr": float, "share_mode": str,
    "queue_size": int, "strategy": str, "beam_width": int, "cider_variant": str,
    "width": int, "layers": int, "heads": int,
}


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _config(args):
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    if getattr(args, "accuracies", None):
        overrides["accuracies"] = args.accuracies
    if getattr(args, "seeds", None):
        overrides["sweep_seeds"] = args.seeds
    return load_config(args.config, overrides)


def _print_row(row: dict) -> None:
    print(",".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def cmd_gen_corpus(args) -> int:
    from .experiment import write_corpus_dir

    cfg = _config(args)
    out = write_corpus_dir(cfg, _out_dir(args, "corpus"))
    print(f"wrote {cfg.n} samples to {out}")
    return EXIT_OK


def _splits(args, cfg):
    from .experiment import load_corpus_dir, make_corpus

    return load_corpus_dir(args.corpus) if args.corpus else make_corpus(cfg)


def cmd_train_classifier(args) -> int:
    from .experiment import train_classifier

    cfg = _config(args)
    _, metrics = train_classifier(cfg, _splits(args, cfg), _out_dir(args, "classifier"))
    _print_row(metrics.as_dict())
    if args.check:
        ok = metrics.aACC >= 0.85 and metrics.aF1 <= 0.6 and metrics.aACC - metrics.aF1 >= 0.3
        print(f"long-tail gap check: {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


def cmd_train_generator(args) -> int:
    from .experiment import evaluate, parse_knowledge_source, train_generator

    cfg = _config(args)
    source = parse_knowledge_source(args.knowledge)
    splits = _splits(args, cfg)
    out = _out_dir(args, "generator")
    gen = train_generator(cfg, splits, source, out)
    if splits.test:
        _print_row(evaluate(gen, source, splits.test, "test", cfg.seed, out, cfg.cider_variant))
    return EXIT_OK


def _report_checks(result) -> bool:
    from .experiment import check_trend

    ok = True
    for metric in ("bleu4", "cider"):
        tc = check_trend(result, metric)
        rhos = " ".join(f"seed{s}={r:+.3f}" for s, r in tc.spearman_per_seed.items())
        print(f"{metric}: spearman {rhos}; mean@1.0={tc.mean_at_max:.4f} "
              f"mean@{min(result.levels()):g}={tc.mean_at_min:.4f} "
              f"{'PASS' if tc.passed else 'FAIL'}")
        ok &= tc.passed
    return ok


def cmd_sweep(args) -> int:
    from .experiment import run_accuracy_sweep

    cfg = _config(args)
    result = run_accuracy_sweep(cfg, _splits(args, cfg), _out_dir(args, "sweep"),
                                progress=_print_row)
    for row in result.mean_rows():
        _print_row(row)
    if args.check and not _report_checks(result):
        return EXIT_CHECK
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import evaluate, evaluate_files, parse_knowledge_source
    from .generator import ReportGenerator

    cfg = _config(args)
    out = _out_dir(args, "evaluate")
    if args.predictions or args.references:
        if not (args.predictions and args.references):
            raise ConfigError("--predictions and --references go together")
        summary, _ = evaluate_files(args.predictions, args.references, out, cfg.cider_variant)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --predictions/--references)")
        gen = ReportGenerator.load(args.checkpoint)
        source = parse_knowledge_source(args.knowledge)
        splits = _splits(args, cfg)
        summary = evaluate(gen, source, splits.get(args.split), args.split, cfg.seed, out,
                           cfg.cider_variant)
    _print_row({m: summary[m] for m in METRIC_COLUMNS})
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiment import emit_report, load_sweep

    sweep_dir = Path(args.sweep_dir)
    result = load_sweep(sweep_dir)
    for path in emit_report(result, _out_dir(args, "report") if args.out else sweep_dir):
        print(path)
    if args.check and not _report_checks(result):
        return EXIT_CHECK
    return EXIT_OK


def cmd_generate(args) -> int:
    """One generated report per input line: {"image": {"shape", "data"}, "nodes": [...]}."""
    from .corpus import build_node_vocabulary
    from .generator import ReportGenerator

    gen = ReportGenerator.load(args.checkpoint)
    graph = build_node_vocabulary()
    records = []
    with open(args.input) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if not records:
        raise ContractError(f"{args.input} holds no inputs")
    X = np.stack([np.asarray(r["image"]["data"], dtype=float).reshape(r["image"]["shape"])
                  for r in records])
    K = np.stack([graph.names_to_labels(r.get("nodes", [])) for r in records])
    preds = gen.predict(X, K, strategy=args.strategy)
    sink = open(args.output, "w") if args.output else sys.stdout
    try:
        for r, p in zip(records, preds):
            sink.write(json.dumps({"id": r.get("id"), "report": p}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgreport",
                                     description="Knowledge-conditioned report generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help="output directory")
        if corpus:
            p.add_argument("--corpus", help="corpus directory from gen-corpus "
                                             "(default: generate from the config)")
        for key, kind in _OVERRIDES.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
        return p

    p = common(sub.add_parser("gen-corpus", help="write a synthetic corpus"), corpus=False)
    p.set_defaults(func=cmd_gen_corpus)

    p = common(sub.add_parser("train-classifier", help="train the node classifier"))
    p.add_argument("--check", action="store_true", help="exit 3 unless the long-tail gap holds")
    p.set_defaults(func=cmd_train_classifier)

    p = common(sub.add_parser("train-generator", help="train the report generator"))
    p.add_argument("--knowledge", default="ground_truth",
                   help="ground_truth | corrupted(A) | classifier(PATH)")
    p.set_defaults(func=cmd_train_generator)

    p = common(sub.add_parser("sweep", help="node-accuracy sweep"))
    p.add_argument("--accuracies", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--check", action="store_true", help="exit 3 unless the trend holds")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("evaluate", help="score a checkpoint or two JSONL files"))
    p.add_argument("--checkpoint")
    p.add_argument("--knowledge", default="ground_truth")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--predictions", help="JSONL {id, report}")
    p.add_argument("--references", help="JSONL {id, report} or {id, references: [...]}")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit sweep tables and plots")
    p.add_argument("sweep_dir")
    p.add_argument("--out")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("generate", help="generate reports for JSONL inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--strategy", choices=("greedy", "beam"))
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
