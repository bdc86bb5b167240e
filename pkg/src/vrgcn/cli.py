"""Command-line front end: training runs, dataset generation, evaluation,
verification suites, and CSV report emission.

Conventions shared by every command:

* flat JSON config files; unknown keys are rejected; command-line flags
  override config values;
* CSV artifacts have a header row, a stable column order, floats printed
  with 17 significant digits, and are byte-identical across reruns of the
  same config + seed (wall-clock timings therefore stay out of the CSVs);
* exit codes: 0 all good, 1 an assertion or suite check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import _threads  # noqa: F401  (thread caps before numpy kernels spin up)
import numpy as np

from . import model as M
from . import variance as var
from . import verify as V
from .graphs import generate_sbm, load_graph_dir, save_graph_dir
from .sampling import CVD_SCALINGS, NS_VARIANTS, build_receptive_fields
from .sparse import build_propagation
from .training import (OPTIMIZERS, SCANS, SCHEDULES, TrainConfig, evaluate,
                       load_checkpoint, save_checkpoint, train)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2

TRAIN_KEYS = ("estimator", "hidden_dims", "samples_per_layer",
              "minibatch_size", "epochs", "optimizer", "learning_rate",
              "adam_beta1", "adam_beta2", "adam_eps", "lr_schedule",
              "dropout_rate", "weight_decay", "epoch_scan", "preprocess",
              "sampler_variant", "cvd_scaling", "seed")
CONFIG_KEYS = TRAIN_KEYS + ("dataset", "out_dir", "repeat")


class UsageError(Exception):
    """Bad input: missing files, malformed configs, unknown names."""


def fmt(value):
    if isinstance(value, float) or isinstance(value, np.floating):
        return "%.17g" % value
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def load_config(path):
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a flat JSON object")
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise UsageError("unknown config keys: " + ", ".join(unknown))
    return doc


def merge_config(config_doc, args, flag_names):
    """Config file first, then any explicitly passed flag wins."""
    merged = dict(config_doc)
    for name in flag_names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return merged


def parse_hidden_dims(text):
    try:
        dims = tuple(int(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError:
        raise UsageError(f"bad hidden dims {text!r}; expected e.g. '32' or '64,32'")
    if not dims:
        raise UsageError("hidden dims must name at least one layer")
    return dims


def build_train_config(merged):
    fields = {}
    for key in TRAIN_KEYS:
        if key in merged:
            fields[key] = merged[key]
    if "hidden_dims" in fields and not isinstance(fields["hidden_dims"], tuple):
        if isinstance(fields["hidden_dims"], str):
            fields["hidden_dims"] = parse_hidden_dims(fields["hidden_dims"])
        else:
            fields["hidden_dims"] = tuple(int(h) for h in fields["hidden_dims"])
    try:
        return TrainConfig(**fields).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def require_dataset(merged):
    path = merged.get("dataset")
    if not path:
        raise UsageError("no dataset directory given (config key 'dataset' "
                         "or flag --dataset)")
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {path}")
    try:
        return load_graph_dir(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"failed to load dataset {path}: {exc}") from exc


# ---------------------------------------------------------------- train

def cmd_train(args):
    doc = load_config(args.config) if args.config else {}
    merged = merge_config(doc, args, CONFIG_KEYS)
    graph = require_dataset(merged)
    base = build_train_config(merged)
    repeat = int(merged.get("repeat", 1))
    if repeat < 1:
        raise UsageError("repeat must be >= 1")
    out_dir = merged.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    header = ["run", "seed", "epoch", "train_loss", "val_metric",
              "minibatch_loss", "spmm_multiplies", "gemm_multiplies",
              "input_rows_read", "history_rows_read"]
    rows = []
    failures = 0
    for run in range(repeat):
        seed = base.seed + run
        config = build_train_config({**merged, "seed": seed})
        params, report = train(graph, config)
        for epoch, loss in enumerate(report.epoch_losses, start=1):
            i = epoch - 1
            c = report.epoch_counters[i]
            rows.append([run, seed, epoch, loss, report.epoch_val_metrics[i],
                         report.minibatch_losses[i], c["spmm_multiplies"],
                         c["gemm_multiplies"], c["input_rows_read"],
                         c["history_rows_read"]])
        ckpt = os.path.join(out_dir, f"model_seed{seed}.bin")
        save_checkpoint(ckpt, params, estimator=config.estimator, seed=seed,
                        epoch=len(report.epoch_losses))
        if report.aborted:
            failures += 1
            print(f"run {run} (seed {seed}): ABORTED at epoch "
                  f"{report.abort_epoch}: {report.abort_reason}")
        else:
            total = sum(report.epoch_wall_times)
            print(f"run {run} (seed {seed}): final train loss "
                  f"{report.epoch_losses[-1]:.6f} after {report.steps} steps "
                  f"({total:.2f}s), checkpoint {ckpt}")
    csv_path = os.path.join(out_dir, "train_report.csv")
    write_csv(csv_path, header, rows)
    print(f"report: {csv_path} ({len(rows)} rows)")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    merged = merge_config(load_config(args.config) if args.config else {},
                          args, ("dataset",))
    graph = require_dataset(merged)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        params, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"failed to load checkpoint: {exc}") from exc
    expected = (graph.num_features, graph.num_classes)
    got = (params.layer_dims[0], params.layer_dims[-1])
    if expected != got:
        raise UsageError(f"checkpoint shape {got} does not match dataset "
                         f"{expected}")
    if args.split not in graph.splits:
        raise UsageError(f"unknown split {args.split!r}")
    if np.asarray(graph.splits[args.split]).size == 0:
        raise UsageError(f"split {args.split!r} is empty in this dataset")
    out = evaluate(graph, params, split=args.split)
    out["split"] = args.split
    out["checkpoint_meta"] = meta
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- verify

def cmd_verify(args):
    if args.suite not in V.SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from: "
                         + ", ".join(sorted(V.SUITES)))
    checks = V.run_suite(args.suite, seed=args.seed)
    for check in checks:
        print(check.line())
    failed = [c for c in checks if not c.passed]
    print(f"suite {args.suite}: {len(checks) - len(failed)}/{len(checks)} "
          f"checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------- gen-synth

def cmd_gen_synth(args):
    if args.nodes < args.communities * 2:
        raise UsageError("need at least two nodes per community")
    graph = generate_sbm(num_nodes=args.nodes, num_communities=args.communities,
                         p_in=args.p_in, p_out=args.p_out,
                         feature_noise=args.feature_noise,
                         labeled_per_community=args.labeled_per_community,
                         val_per_community=args.val_per_community,
                         seed=args.seed)
    save_graph_dir(graph, args.out)
    print(f"wrote {graph.num_nodes}-node dataset "
          f"({graph.adjacency.nnz // 2} edges, {args.communities} "
          f"communities) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- reports

def cmd_variance_report(args):
    """Gradient bias/std per estimator and layer on a small community graph,
    plus closed-form variance breakdowns for random scalar cases."""
    graph = generate_sbm(num_nodes=16, num_communities=2,
                         labeled_per_community=8, val_per_community=0,
                         seed=args.seed)
    prop = build_propagation(graph.adjacency)
    labeled = np.arange(graph.num_nodes)

    header = ["case", "estimator", "layer", "bias", "std", "vns", "vd"]
    rows = []
    nan = float("nan")
    estimators = ("exact", "ns", "is", "cv", "cvd")

    for snapshot in ("init", "trained"):
        if snapshot == "init":
            params = M.init_params((graph.num_features, 4, graph.num_classes),
                                   seed=args.seed + 1)
        else:
            warm = TrainConfig(estimator="exact", hidden_dims=(4,),
                               epochs=20, seed=args.seed).validate()
            params, _ = train(graph, warm)
        for estimator in estimators:
            config = TrainConfig(estimator=estimator, hidden_dims=(4,),
                                 samples_per_layer=2,
                                 sampler_variant="unbiased",
                                 dropout_rate=args.dropout_rate,
                                 seed=args.seed).validate()
            history = None
            if estimator in ("cv", "cvd"):
                history = V.exact_seeded_history(prop, graph.features, params)
            draws = 1 if estimator == "exact" and args.dropout_rate == 0 \
                else args.draws
            biases, stds = var.gradient_bias_std(
                prop, graph.features, graph.labels, labeled, params, config,
                draws, args.seed + 2, history=history)
            for layer, (b, s) in enumerate(zip(biases, stds)):
                rows.append([snapshot, estimator, layer, b, s, nan, nan])

    for case in range(3):
        crng = np.random.default_rng(args.seed + 10 + case)
        n, D = 6, 2
        p = crng.uniform(0.2, 1.0, n)
        mu = crng.uniform(-1.0, 1.0, n)
        s = crng.uniform(0.2, 1.0, n)
        delta = crng.uniform(-1.0, 1.0, n)
        for estimator in var.SCALAR_ESTIMATORS:
            bd = var.table2_breakdown(estimator, p, mu, s, delta, D)
            rows.append([f"case{case}", estimator, 0, nan, nan,
                         bd.from_sampling, bd.from_dropout])

    write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_correlation_report(args):
    if not 0.0 < args.dropout_rate < 1.0:
        raise UsageError("dropout rate must lie in (0, 1)")
    graph = generate_sbm(num_nodes=args.nodes, seed=args.seed)
    prop = build_propagation(graph.adjacency)
    hidden = (8, 8) if args.layers == 3 else (8,)
    params = M.init_params((graph.num_features, *hidden, graph.num_classes),
                           seed=args.seed + 1)
    plan = build_receptive_fields(prop, np.arange(graph.num_nodes),
                                  len(hidden) + 1, args.samples_per_layer,
                                  np.random.default_rng(args.seed + 2),
                                  preprocess=True)
    diag = var.correlation_diagnostics(prop, graph.features, params, plan,
                                       keep_prob=1.0 - args.dropout_rate,
                                       draws=args.draws, seed=args.seed + 3)
    header = ["layer", "avg_feature_corr", "avg_neighbor_corr",
              "feature_pairs", "neighbor_rows", "skipped_feature_pairs",
              "skipped_neighbor_pairs"]
    rows = [[layer, d["avg_feature_corr"], d["avg_neighbor_corr"],
             d["feature_pairs"], d["neighbor_rows"],
             d["skipped_feature_pairs"], d["skipped_neighbor_pairs"]]
            for layer, d in sorted(diag.items())]
    write_csv(args.out, header, rows)
    for layer, d in sorted(diag.items()):
        print(f"layer {layer}: feature corr {d['avg_feature_corr']:+.4f}, "
              f"neighbor corr {d['avg_neighbor_corr']:+.4f}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
    p.add_argument("--estimator", choices=M.ESTIMATORS)
    p.add_argument("--hidden-dims", dest="hidden_dims", type=parse_hidden_dims,
                   help="comma-separated hidden sizes, e.g. 64,32")
    p.add_argument("--samples-per-layer", dest="samples_per_layer", type=int)
    p.add_argument("--minibatch-size", dest="minibatch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=SCHEDULES)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epoch-scan", dest="epoch_scan", choices=SCANS)
    p.add_argument("--pp", dest="preprocess", action="store_const", const=True,
                   default=None, help="precompute the dense first aggregation")
    p.add_argument("--no-pp", dest="preprocess", action="store_const",
                   const=False, help="disable the dense first aggregation")
    p.add_argument("--sampler-variant", dest="sampler_variant",
                   choices=NS_VARIANTS)
    p.add_argument("--cvd-scaling", dest="cvd_scaling", choices=CVD_SCALINGS)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeat", type=int,
                   help="number of runs with consecutive seeds")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vrgcn",
        description="Variance-reduced stochastic GCN training and "
                    "verification. Set VRGCN_THREADS to cap BLAS threads.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, write report CSV + "
                                     "checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", required=True,
                   help="one of: " + ", ".join(sorted(V.SUITES)))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-synth", help="generate a community-graph dataset")
    p.add_argument("--nodes", type=int, default=32)
    p.add_argument("--communities", type=int, default=2)
    p.add_argument("--p-in", dest="p_in", type=float, default=0.5)
    p.add_argument("--p-out", dest="p_out", type=float, default=0.02)
    p.add_argument("--feature-noise", dest="feature_noise", type=float,
                   default=2.0)
    p.add_argument("--labeled-per-community", dest="labeled_per_community",
                   type=int, default=4)
    p.add_argument("--val-per-community", dest="val_per_community",
                   type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("variance-report",
                       help="gradient bias/std and variance-breakdown CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--draws", type=int, default=400)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float,
                   default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_variance_report)

    p = sub.add_parser("correlation-report",
                       help="activation correlation diagnostics CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--nodes", type=int, default=32)
    p.add_argument("--layers", type=int, default=2, choices=(2, 3))
    p.add_argument("--samples-per-layer", dest="samples_per_layer", type=int,
                   default=2)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float,
                   default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_correlation_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
