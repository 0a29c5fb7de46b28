"""Command-line entry point.

Subcommands: synth, train, encode, eval, gradcheck, sweep. Every command
honors --seed for bit-reproducible outputs, and commands that produce
output directories persist the effective (defaults-merged) config next to
their outputs.

Exit codes: 0 success, 1 usage, 2 I/O or file format, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import experiment, gradcheck, hash_learn, retrieval
from .errors import ConfigError, EvaluationError, FormatError, TrainingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def _common_config(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key")


def _load_cfg(args):
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return experiment.load_config(args.config, overrides)


def _outdir(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    experiment.save_config(cfg, out / "config.effective")
    return out


def cmd_synth(args):
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    spec = experiment.longtail_spec(cfg)
    data = ds.synthesize_long_tailed(spec, seed=cfg["seed"])
    path = out / "dataset.lcmd"
    ds.save_dataset(data, path)
    counts = data.labels.sum(axis=0)
    print(f"wrote {path}: n={data.n}, classes={data.num_classes}, "
          f"d_x={data.X.shape[1]}, d_y={data.Y.shape[1]}")
    print("per-class sample counts (incl. secondary labels):",
          " ".join(str(int(c)) for c in counts))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _outdir(args, cfg)
    data = ds.load_dataset(args.dataset)
    _, model, history = experiment.run_train(data, cfg)
    hash_learn.save_model(out / "model.lcmh", model)
    experiment.write_loss_csv(out / "loss.csv", history)
    final = history[-1]["total"] if history else float("nan")
    print(f"wrote {out / 'model.lcmh'} and {out / 'loss.csv'} "
          f"({len(history)} epochs, final total loss {final:.6g})")
    return EXIT_OK


def cmd_encode(args):
    model = hash_learn.load_model(args.model)
    data = ds.load_dataset(args.dataset)
    codes = experiment.encode_split(model, data, args.modality, args.split)
    retrieval.save_codes(args.out, codes)
    print(f"wrote {args.out}: {codes.n} codes of {codes.c} bits "
          f"({args.modality}/{args.split})")
    return EXIT_OK


def cmd_eval(args):
    model = hash_learn.load_model(args.model)
    data = ds.load_dataset(args.dataset)
    q_idx = experiment.split_indices(model, args.query_split)
    db_idx = experiment.split_indices(model, args.db_split)
    if args.query_codes and args.db_codes:
        q_codes = retrieval.load_codes(args.query_codes)
        db_codes = retrieval.load_codes(args.db_codes)
    else:
        q_mod, db_mod = (("image", "text") if args.direction == "i2t"
                         else ("text", "image"))
        q_codes = experiment.encode_split(model, data, q_mod, args.query_split)
        db_codes = experiment.encode_split(model, data, db_mod, args.db_split)
    result = retrieval.evaluate(q_codes, data.labels[q_idx], db_codes,
                                data.labels[db_idx], model.partition,
                                args.direction)
    retrieval.write_result_csv(args.out, [result])
    for direction, group, bits, m, nq in result.rows():
        print(f"{direction} {group:>4} {bits}bit map={m:.4f} queries={nq}")
    return EXIT_OK


def cmd_gradcheck(args):
    errors = gradcheck.run_all(seed=args.seed if args.seed is not None else 0,
                               corrupt=args.corrupt)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:<24} max relative error {err:.3e}")
    print(f"overall max relative error {worst:.3e}")
    if worst > args.threshold:
        print("FAIL: gradient check exceeded threshold", file=sys.stderr)
        return EXIT_NUMERICAL
    print("PASS")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_cfg(args)
    if args.param not in ("alpha", "beta"):
        raise ConfigError(f"sweep param must be alpha or beta, got {args.param!r}")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = _outdir(args, cfg)
    data = ds.load_dataset(args.dataset)
    other = "beta" if args.param == "alpha" else "alpha"
    rows = []
    for v in values:
        run_cfg = dict(cfg)
        run_cfg[args.param] = v
        run_cfg[other] = 1.0
        _, model, _ = experiment.run_train(data, run_cfg)
        i2t = experiment.evaluate_direction(model, data, "i2t")
        t2i = experiment.evaluate_direction(model, data, "t2i")
        rows.append((v, i2t.map_all, t2i.map_all))
        print(f"{args.param}={v:g}: map_i2t={i2t.map_all:.4f} "
              f"map_t2i={t2i.map_all:.4f}")
    path = out / f"sweep_{args.param}.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([args.param, "map_i2t", "map_t2i"])
        for v, m1, m2 in rows:
            w.writerow([f"{v:g}", f"{m1:.6f}", f"{m2:.6f}"])
    print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ltcmh",
        description="Meta-embedding cross-modal hashing for long-tailed data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a long-tailed dataset")
    _common_config(p)
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a hash model")
    _common_config(p)
    p.add_argument("--dataset", required=True, help="dataset file (.lcmd)")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dataset split to binary codes")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modality", choices=("image", "text"), required=True)
    p.add_argument("--split", choices=("train", "query", "retrieval", "all"),
                   default="all")
    p.add_argument("--out", required=True, help="output code file (.lcmb)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="evaluate cross-modal retrieval MAP")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--direction", choices=("i2t", "t2i"), required=True)
    p.add_argument("--query-codes", help="precomputed query code file")
    p.add_argument("--db-codes", help="precomputed database code file")
    p.add_argument("--query-split", default="query")
    p.add_argument("--db-split", default="retrieval")
    p.add_argument("--out", default="results.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--corrupt", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control test hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    _common_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--param", required=True, help="alpha or beta")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, EvaluationError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
