"""Command-line front end: train / select / infer / predict / evaluate / reproduce.

Stages communicate through files (checkpoint -> mask -> posterior ->
predictions) so each one is independently runnable and resumable. Every
command writes a ``<out>.manifest.json`` capturing the resolved
configuration; timestamps live only in manifests, all other outputs are
byte-identical across reruns with the same seeds.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import data as datasets
from . import evaluate as ev
from .data import SplitSpec, split_gap, split_standard, standardize_split
from .errors import SubnetLaplaceError
from .laplace import (
    assemble_ggn,
    build_posterior,
    compute_ggn,
    eligible_indices,
    ggn_data_term,
    load_posterior,
    rescale_prior,
    save_posterior,
)
from .net import MlpArchitecture, WeightVector, load_checkpoint, save_checkpoint
from .predict import (
    destandardize_regression,
    epistemic_std,
    predict_classification,
    predict_regression,
    write_predictions_csv,
)
from .select import (
    apply_dead_filter,
    load_mask,
    save_mask,
    score_weights,
    select_top_s,
)
from .train import MapEstimate, TrainConfig, train_map, write_training_curve

STRATEGY_FLAGS = {
    "wass-exact": "wasserstein_exact",
    "wass-diag": "wasserstein_diag",
    "random": "random",
    "final-layer": "final_layer",
    "magnitude": "magnitude",
}

BUILTIN_DATASETS = ("toy1d", "two-moons", "tabular")


def _write_manifest(out_path, command, resolved):
    doc = {
        "command": command,
        "config": resolved,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = f"{out_path}.manifest.json"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _resolve_dataset(name_or_path, targets, task):
    if name_or_path == "toy1d":
        return datasets.make_toy_1d()
    if name_or_path == "two-moons":
        return datasets.make_two_moons()
    if name_or_path == "tabular":
        return datasets.make_synthetic_tabular()
    if not os.path.exists(name_or_path):
        raise FileNotFoundError(name_or_path)
    return datasets.load_csv(name_or_path, targets, task=task)


def _split_dataset(dataset, meta):
    split = meta["split"]
    if split["kind"] == "gap":
        return split_gap(dataset, split["gap_dimension"], seed=split["seed"])
    spec = SplitSpec(kind="standard", train_frac=split["train_frac"],
                     val_frac_of_train=split["val_frac"], seed=split["seed"])
    return split_standard(dataset, spec)


def _load_context(checkpoint_path):
    """Rebuild (map estimate, standardized split, scalers, meta) from a checkpoint."""
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(checkpoint_path)
    arch, weights, noise_log_variance, seed, meta = load_checkpoint(checkpoint_path)
    dataset = _resolve_dataset(meta["data"], meta.get("targets", ["y"]), meta["task"])
    split = _split_dataset(dataset, meta)
    std_split, x_scaler, y_scaler = standardize_split(split)
    map_est = MapEstimate(
        weights=weights, noise_log_variance=noise_log_variance, task=meta["task"],
        val_metric_history=[], train_loss_history=[],
        best_epoch=meta.get("best_epoch", -1), seed=seed)
    return map_est, std_split, x_scaler, y_scaler, meta


def cmd_train(args) -> int:
    dataset = _resolve_dataset(args.data, args.target, args.task)
    meta_split = {"kind": args.split, "seed": args.split_seed,
                  "train_frac": 0.9, "val_frac": 0.15,
                  "gap_dimension": args.gap_dim}
    split = _split_dataset(dataset, {"split": meta_split})
    std_split, _, _ = standardize_split(split)

    arch = MlpArchitecture(input_dim=std_split.train.input_dim,
                           hidden_widths=tuple([args.hidden] * args.layers),
                           output_dim=(std_split.train.output_dim
                                       if args.task == "classification"
                                       else std_split.train.targets.shape[1]))
    cfg = TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                      weight_decay=args.weight_decay, batch_size=args.batch_size,
                      max_epochs=args.max_epochs, patience=args.patience,
                      seed=args.seed, task=args.task)
    map_est = train_map(arch, std_split, cfg)

    meta = {
        "data": args.data, "targets": list(args.target), "task": args.task,
        "split": meta_split, "best_epoch": map_est.best_epoch,
        "normalization": std_split.train.normalization,
        "train_config": {
            "learning_rate": cfg.learning_rate, "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay, "batch_size": cfg.batch_size,
            "max_epochs": cfg.max_epochs, "patience": cfg.patience,
            "seed": cfg.seed, "task": cfg.task,
        },
    }
    save_checkpoint(args.out, arch, map_est.weights, map_est.noise_log_variance,
                    args.seed, meta)
    curve_path = os.path.splitext(args.out)[0] + "_curve.csv"
    write_training_curve(curve_path, map_est.train_loss_history,
                         map_est.val_metric_history)
    _write_manifest(args.out, "train", meta)
    print(f"wrote checkpoint {args.out} (best epoch {map_est.best_epoch})")
    return 0


def _write_score_histogram(path, scores, eligible, n_bins=30):
    values = np.asarray(scores)[np.asarray(eligible)]
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for i, c in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    os.replace(tmp, path)


def cmd_select(args) -> int:
    map_est, std_split, _, _, _ = _load_context(args.checkpoint)
    strategy = STRATEGY_FLAGS[args.strategy]
    arch = map_est.weights.arch

    ggn = None
    if strategy in ("wasserstein_exact", "wasserstein_diag") or args.dead_filter:
        kind = "full" if strategy == "wasserstein_exact" else "diagonal"
        mask_idx = eligible_indices(arch, args.include_biases)
        ggn = compute_ggn(arch, map_est, std_split.train, mask=mask_idx, kind=kind,
                          prior_precision=args.lam, include_biases=args.include_biases)
    scores = score_weights(strategy, map_est, ggn,
                           include_biases=args.include_biases, seed=args.seed)
    if args.dead_filter:
        scores = apply_dead_filter(scores, ggn, args.dead_threshold)

    if strategy == "final_layer":
        if args.fraction is not None or args.size is not None:
            print("warning: --fraction/--size ignored for final-layer selection",
                  file=sys.stderr)
        mask = select_top_s(scores)
    else:
        if args.size is not None:
            s = args.size
        elif args.fraction is not None:
            s = max(1, round(args.fraction * scores.eligible.shape[0]))
        else:
            raise SubnetLaplaceError("select needs --fraction or --size")
        mask = select_top_s(scores, s)

    save_mask(args.out, mask)
    if scores.scores is not None:
        _write_score_histogram(os.path.splitext(args.out)[0] + "_scores.csv",
                               scores.scores, scores.eligible)
    _write_manifest(args.out, "select", {
        "checkpoint": args.checkpoint, "strategy": args.strategy,
        "fraction": args.fraction, "size": mask.size, "lambda": args.lam,
        "include_biases": args.include_biases, "dead_filter": args.dead_filter,
        "seed": args.seed,
    })
    print(f"wrote mask {args.out} ({mask.size} of {mask.total} parameters)")
    return 0


def _parse_grid(text):
    if text == "default":
        return ev.LAMBDA_GRID
    return tuple(float(tok) for tok in text.split(","))


def cmd_infer(args) -> int:
    map_est, std_split, _, _, _ = _load_context(args.checkpoint)
    if not os.path.exists(args.mask):
        raise FileNotFoundError(args.mask)
    mask = load_mask(args.mask)
    arch = map_est.weights.arch
    elig = eligible_indices(arch, args.include_biases)
    rescale = not args.no_rescale

    cfg = ev.InferenceConfig(train=std_split.train, kind="subnetwork", mask=mask,
                             rescale=rescale, include_biases=args.include_biases)
    if args.grid is not None:
        lam, report = ev.grid_search_lambda(map_est, std_split.val,
                                            _parse_grid(args.grid), cfg)
    else:
        lam, report = args.lam, None
    lam_s = rescale_prior(lam, mask.size, elig.shape[0]) if rescale else lam
    term = ggn_data_term(arch, map_est, std_split.train, mask.selected)
    posterior = build_posterior(
        assemble_ggn(term, mask.selected, "subnetwork", lam_s), map_est)
    save_posterior(args.out, posterior)
    _write_manifest(args.out, "infer", {
        "checkpoint": args.checkpoint, "mask": args.mask, "lambda": lam,
        "lambda_subnet": lam_s, "rescale": rescale, "jitter": posterior.jitter,
        "grid": args.grid, "grid_report": report,
    })
    print(f"wrote posterior {args.out} (lambda={lam}, lambda_S={lam_s:.6g})")
    return 0


def cmd_predict(args) -> int:
    map_est, std_split, x_scaler, y_scaler, _ = _load_context(args.checkpoint)
    posterior = None
    if args.posterior is not None:
        if not os.path.exists(args.posterior):
            raise FileNotFoundError(args.posterior)
        posterior = load_posterior(args.posterior, map_est)

    if args.grid is not None:
        lo, hi, n = args.grid
        raw = np.linspace(lo, hi, int(n))[:, None]
        inputs = x_scaler.transform(raw)
    else:
        inputs = getattr(std_split, args.split).inputs

    if map_est.task == "regression":
        pred = destandardize_regression(
            predict_regression(map_est, posterior, inputs), y_scaler)
    else:
        pred = predict_classification(map_est, posterior, inputs)
    write_predictions_csv(args.out, pred)
    _write_manifest(args.out, "predict", {
        "checkpoint": args.checkpoint, "posterior": args.posterior,
        "split": args.split, "grid": list(args.grid) if args.grid else None,
    })
    print(f"wrote predictions {args.out} ({inputs.shape[0]} rows)")
    return 0


def _evaluate_artifacts(args) -> int:
    map_est, std_split, _, y_scaler, _ = _load_context(args.checkpoint)
    posterior = None
    if args.posterior is not None:
        posterior = load_posterior(args.posterior, map_est)
    test = std_split.test
    metrics = {}
    if map_est.task == "regression":
        pred = destandardize_regression(
            predict_regression(map_est, posterior, test.inputs), y_scaler)
        targets = test.targets if y_scaler is None else y_scaler.inverse(test.targets)
        metrics["ll"] = ev.log_likelihood(pred, targets)
        metrics["rmse"] = ev.rmse(pred, targets)
    else:
        pred = predict_classification(map_est, posterior, test.inputs)
        metrics["ll"] = ev.log_likelihood(pred, test.targets)
        metrics["error"] = ev.error_rate(pred, test.targets)
        metrics["ece"] = ev.ece(pred, test.targets)
        metrics["brier"] = ev.brier(pred, test.targets)
    tmp = f"{args.out}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    os.replace(tmp, args.out)
    _write_manifest(args.out, "evaluate", {
        "checkpoint": args.checkpoint, "posterior": args.posterior,
        "metrics": metrics,
    })
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _run_experiment(name, out_dir, seeds) -> int:
    if name not in ev.EXPERIMENTS:
        raise SubnetLaplaceError(
            f"unknown experiment {name!r}; choose from {sorted(ev.EXPERIMENTS)}")
    spec = ev.EXPERIMENTS[name]() if seeds is None else ev.EXPERIMENTS[name](seeds=tuple(seeds))
    os.makedirs(out_dir, exist_ok=True)
    rows = ev.run_comparison(spec)
    rows_path = os.path.join(out_dir, f"{name}_rows.csv")
    ev.write_rows_csv(rows_path, rows)
    ev.write_summary_json(os.path.join(out_dir, f"{name}_summary.json"), rows)
    ev.write_series_csv(os.path.join(out_dir, f"{name}_series_ll.csv"), rows)
    _write_manifest(rows_path, "evaluate-experiment",
                    {"experiment": name, "seeds": list(spec.seeds)})
    for (method, metric), stats in ev.aggregate_rows(rows).items():
        print(f"{method:>16s}  {metric:>14s}  {stats['mean']:+.4f} "
              f"+/- {stats['std']:.4f}  (n={stats['n']})")
    return 0


def cmd_evaluate(args) -> int:
    if args.experiment is not None:
        return _run_experiment(args.experiment, args.out, args.seeds)
    if args.checkpoint is None:
        raise SubnetLaplaceError("evaluate needs --experiment or --checkpoint")
    return _evaluate_artifacts(args)


def cmd_reproduce(args) -> int:
    return _run_experiment(args.experiment, args.out, args.seeds)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sublaplace",
        description="Subnetwork linearized-Laplace inference pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a MAP network and write a checkpoint")
    p.add_argument("--data", required=True,
                   help=f"CSV path or one of {BUILTIN_DATASETS}")
    p.add_argument("--target", nargs="+", default=["y"])
    p.add_argument("--task", choices=("regression", "classification"),
                   default="regression")
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--split", choices=("standard", "gap"), default="standard")
    p.add_argument("--gap-dim", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="score weights and write a subnetwork mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS), required=True)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=3.0)
    p.add_argument("--include-biases", action="store_true")
    p.add_argument("--dead-filter", action="store_true")
    p.add_argument("--dead-threshold", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("infer", help="build the subnetwork Gaussian posterior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=3.0)
    p.add_argument("--grid", default=None,
                   help='"default" or comma-separated prior precisions')
    p.add_argument("--no-rescale", action="store_true")
    p.add_argument("--include-biases", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("predict", help="write predictive means/stds or probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--posterior", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--grid", nargs=3, type=float, metavar=("LO", "HI", "N"),
                   default=None, help="1D input grid in original units")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run a built-in experiment or score artifacts")
    p.add_argument("--experiment", choices=sorted(ev.EXPERIMENTS), default=None)
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--posterior", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a named experiment end to end")
    p.add_argument("experiment", choices=sorted(ev.EXPERIMENTS))
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2
    except SubnetLaplaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
