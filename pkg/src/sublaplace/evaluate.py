"""Metrics, validation grid search, and the experiment harness.

The harness runs train -> select -> infer -> predict -> metrics for every
(method, mask size, split, seed) cell and emits long-format rows. Regression
metrics are reported in original target units (predictions are mapped back
through the target scaler); the in-between probe for the 1D toy task records
the mean function-space predictive std over the gap between input clusters.
"""

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import data as datasets
from .data import Dataset, SplitSpec, split_gap, split_standard, standardize_split
from .errors import EmptyValidation, TaskMismatch
from .laplace import (
    assemble_ggn,
    build_diag_posterior,
    build_posterior,
    eligible_indices,
    exact_marginal_variances,
    ggn_data_term,
    rescale_prior,
)
from .net import MlpArchitecture
from .predict import (
    ClassificationPredictive,
    RegressionPredictive,
    destandardize_regression,
    epistemic_std,
    predict_classification,
    predict_regression,
)
from .select import SubnetworkMask, score_weights, select_top_s
from .train import MapEstimate, TrainConfig, train_map

# Validation grid for the prior precision.
LAMBDA_GRID = (0.0001, 0.001, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1000.0)

PROBABILITY_FLOOR = 1e-15
ECE_BINS = 15


# ---------------------------------------------------------------------------
# Metrics


def pointwise_log_likelihood(pred, targets) -> np.ndarray:
    """Per-point log-likelihood of the targets under a predictive."""
    if isinstance(pred, RegressionPredictive):
        y = np.asarray(targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape != pred.mean.shape:
            raise TaskMismatch(f"target shape {y.shape} != predictive {pred.mean.shape}")
        n, n_out = y.shape
        if n_out == 1:
            var = pred.cov[:, 0, 0]
            resid = (y[:, 0] - pred.mean[:, 0]) ** 2
            return -0.5 * (np.log(2.0 * np.pi * var) + resid / var)
        out = np.empty(n)
        for i in range(n):
            chol = np.linalg.cholesky(pred.cov[i])
            z = np.linalg.solve(chol, y[i] - pred.mean[i])
            out[i] = -0.5 * (n_out * np.log(2.0 * np.pi) + z @ z) \
                - np.sum(np.log(np.diag(chol)))
        return out
    if isinstance(pred, ClassificationPredictive):
        labels = np.asarray(targets).reshape(-1).astype(np.int64)
        if labels.shape[0] != pred.probs.shape[0]:
            raise TaskMismatch("label count does not match predictions")
        p = pred.probs[np.arange(labels.shape[0]), labels]
        return np.log(np.clip(p, PROBABILITY_FLOOR, None))
    raise TaskMismatch(f"unsupported predictive type {type(pred).__name__}")


def log_likelihood(pred, targets) -> float:
    """Mean per-point test log-likelihood."""
    return float(np.mean(pointwise_log_likelihood(pred, targets)))


def mixture_log_likelihood(preds, targets) -> float:
    """Mean log-likelihood of an equally weighted predictive mixture
    (the multi-seed ensemble baseline)."""
    stacked = np.stack([pointwise_log_likelihood(p, targets) for p in preds])
    return float(np.mean(logsumexp(stacked, axis=0) - np.log(len(preds))))


def rmse(pred, targets) -> float:
    mean = pred.mean if isinstance(pred, RegressionPredictive) else np.asarray(pred)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return float(np.sqrt(np.mean((mean - y) ** 2)))


def _as_probs(pred) -> np.ndarray:
    return pred.probs if isinstance(pred, ClassificationPredictive) else np.asarray(pred)


def error_rate(pred, labels) -> float:
    probs = _as_probs(pred)
    labels = np.asarray(labels).reshape(-1)
    return float(np.mean(np.argmax(probs, axis=1) != labels))


def ece(pred, labels, n_bins: int = ECE_BINS) -> float:
    """Expected calibration error: equal-width bins over the max probability,
    bin-weighted |accuracy - confidence|."""
    probs = _as_probs(pred)
    labels = np.asarray(labels).reshape(-1)
    if probs.shape[0] != labels.shape[0]:
        raise TaskMismatch("label count does not match predictions")
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    n = labels.shape[0]
    for b in range(n_bins):
        members = bins == b
        count = int(members.sum())
        if count == 0:
            continue
        total += (count / n) * abs(correct[members].mean() - conf[members].mean())
    return float(total)


def brier(pred, labels) -> float:
    """Mean squared distance between probability vectors and one-hot labels."""
    probs = _as_probs(pred)
    labels = np.asarray(labels).reshape(-1)
    if probs.shape[0] != labels.shape[0]:
        raise TaskMismatch("label count does not match predictions")
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Inference construction and the lambda grid search


@dataclass(frozen=True)
class InferenceConfig:
    """Everything needed to rebuild a posterior for a given prior precision."""

    train: Dataset
    kind: str = "subnetwork"  # "subnetwork" | "diagonal"
    mask: SubnetworkMask = None
    rescale: bool = True
    include_biases: bool = False


def _predict(map_est: MapEstimate, posterior, inputs):
    if map_est.task == "regression":
        return predict_regression(map_est, posterior, inputs)
    return predict_classification(map_est, posterior, inputs)


def build_method_posterior(map_est: MapEstimate, cfg: InferenceConfig, lam: float):
    """Posterior for one method at one prior precision (rescaled for masks)."""
    arch = map_est.weights.arch
    elig = eligible_indices(arch, cfg.include_biases)
    if cfg.kind == "diagonal":
        term = ggn_data_term(arch, map_est, cfg.train, elig, diagonal=True)
        return build_diag_posterior(assemble_ggn(term, elig, "diagonal", lam), map_est)
    if cfg.mask is None:
        raise ValueError("subnetwork inference requires a mask")
    lam_s = rescale_prior(lam, cfg.mask.size, elig.shape[0]) if cfg.rescale else lam
    term = ggn_data_term(arch, map_est, cfg.train, cfg.mask.selected)
    return build_posterior(assemble_ggn(term, cfg.mask.selected, "subnetwork", lam_s),
                           map_est)


def grid_search_lambda(map_est: MapEstimate, data_val: Dataset, grid, cfg: InferenceConfig):
    """Pick the prior precision maximizing validation log-likelihood.

    The grid is scanned in ascending order and ties keep the smaller value.
    Returns (best lambda, report rows of {"lambda", "val_ll"}).
    """
    if data_val is None or data_val.n == 0:
        raise EmptyValidation("grid search needs a non-empty validation set")
    arch = map_est.weights.arch
    elig = eligible_indices(arch, cfg.include_biases)
    if cfg.kind == "diagonal":
        indices = elig
        term = ggn_data_term(arch, map_est, cfg.train, indices, diagonal=True)
    else:
        if cfg.mask is None:
            raise ValueError("subnetwork inference requires a mask")
        indices = cfg.mask.selected
        term = ggn_data_term(arch, map_est, cfg.train, indices)
    report = []
    best_lam, best_ll = None, -np.inf
    for lam in sorted(float(g) for g in grid):
        if cfg.kind == "diagonal":
            posterior = build_diag_posterior(
                assemble_ggn(term, indices, "diagonal", lam), map_est)
        else:
            lam_s = rescale_prior(lam, cfg.mask.size, elig.shape[0]) if cfg.rescale else lam
            posterior = build_posterior(
                assemble_ggn(term, indices, "subnetwork", lam_s), map_est)
        ll = log_likelihood(_predict(map_est, posterior, data_val.inputs), data_val.targets)
        report.append({"lambda": lam, "val_ll": ll})
        if ll > best_ll:
            best_lam, best_ll = lam, ll
    return best_lam, report


# ---------------------------------------------------------------------------
# Experiment harness


@dataclass(frozen=True)
class MethodSpec:
    """One column of a comparison: how to build the posterior."""

    label: str
    kind: str  # "map" | "subnetwork" | "diagonal"
    strategy: str = "full"  # subnetwork only
    fraction: float = None
    size: int = None


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset: str
    task: str
    hidden_widths: tuple
    methods: tuple
    train_cfg: TrainConfig = TrainConfig()
    lambda_fixed: float = None
    lambda_grid: tuple = None
    n_standard_splits: int = 1
    gap_dims: tuple = ()
    seeds: tuple = (0,)
    selection_seeds: tuple = (0,)
    include_biases: bool = False
    rescale: bool = True
    probe_kind: str = None  # "toy_gap" adds the in-between std metric
    dataset_seed: int = 0
    csv_targets: tuple = ("y",)


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    split_kind: str
    split_index: int
    seed: int
    selection_seed: int
    method: str
    subnet_size: int
    lam: float
    metric: str
    value: float

    def to_dict(self):
        return {
            "dataset": self.dataset, "split_kind": self.split_kind,
            "split_index": self.split_index, "seed": self.seed,
            "selection_seed": self.selection_seed, "method": self.method,
            "subnet_size": self.subnet_size, "lambda": self.lam,
            "metric": self.metric, "value": self.value,
        }


def load_experiment_dataset(spec: ExperimentSpec) -> Dataset:
    if spec.dataset == "toy1d":
        return datasets.make_toy_1d(seed=spec.dataset_seed)
    if spec.dataset == "two-moons":
        return datasets.make_two_moons(seed=spec.dataset_seed)
    if spec.dataset == "tabular":
        return datasets.make_synthetic_tabular(seed=spec.dataset_seed)
    return datasets.load_csv(spec.dataset, list(spec.csv_targets), task=spec.task)


def _iter_splits(spec: ExperimentSpec, dataset: Dataset):
    for i in range(spec.n_standard_splits):
        yield "standard", i, split_standard(dataset, SplitSpec(kind="standard", seed=i))
    for dim in spec.gap_dims:
        yield "gap", int(dim), split_gap(dataset, int(dim))


def _toy_probe_inputs() -> np.ndarray:
    lo, hi = datasets.TOY_GAP
    return np.linspace(lo, hi, 51)[:, None]


class _CellState:
    """Shared per-(split, seed) state: the trained MAP and cached curvature."""

    def __init__(self, spec: ExperimentSpec, split, seed: int):
        self.spec = spec
        std_split, self.x_scaler, self.y_scaler = standardize_split(split)
        self.split = std_split
        self.map_est = train_map(
            _arch_for(spec, split), std_split,
            replace(spec.train_cfg, seed=seed, task=spec.task))
        self.arch = self.map_est.weights.arch
        self.eligible = eligible_indices(self.arch, spec.include_biases)
        self._full_term = None
        self._scores = {}

    def full_term(self) -> np.ndarray:
        if self._full_term is None:
            self._full_term = ggn_data_term(
                self.arch, self.map_est, self.split.train, self.eligible)
        return self._full_term

    def subnet_term(self, mask: SubnetworkMask) -> np.ndarray:
        pos = np.searchsorted(self.eligible, mask.selected)
        return self.full_term()[np.ix_(pos, pos)]

    def diag_term(self) -> np.ndarray:
        return np.diag(self.full_term()).copy()

    def scores(self, strategy: str, scoring_lambda: float, selection_seed: int):
        key = (strategy, scoring_lambda, selection_seed)
        if key not in self._scores:
            ggn = None
            if strategy == "wasserstein_exact":
                ggn = assemble_ggn(self.full_term(), self.eligible, "full", scoring_lambda)
            elif strategy == "wasserstein_diag":
                ggn = assemble_ggn(self.diag_term(), self.eligible, "diagonal",
                                   scoring_lambda)
            self._scores[key] = score_weights(
                strategy, self.map_est, ggn,
                include_biases=self.spec.include_biases, seed=selection_seed)
        return self._scores[key]


def _arch_for(spec: ExperimentSpec, split) -> MlpArchitecture:
    train = split.train if hasattr(split, "train") else split
    out = train.output_dim if spec.task == "classification" else train.targets.shape[1]
    return MlpArchitecture(input_dim=train.input_dim, hidden_widths=spec.hidden_widths,
                           output_dim=out)


def _method_mask(cell: _CellState, method: MethodSpec, scoring_lambda: float,
                 selection_seed: int) -> SubnetworkMask:
    total = cell.arch.n_params
    if method.strategy == "full":
        return SubnetworkMask.over(cell.eligible, total)
    scores = cell.scores(method.strategy, scoring_lambda, selection_seed)
    if method.strategy == "final_layer":
        return select_top_s(scores)
    if method.size is not None:
        s = method.size
    elif method.fraction is not None:
        s = max(1, round(method.fraction * cell.eligible.shape[0]))
    else:
        raise ValueError(f"method {method.label!r} needs a fraction or size")
    return select_top_s(scores, s)


def _evaluate_method(cell: _CellState, method: MethodSpec, selection_seed: int):
    """Returns (posterior or None, mask size, lambda used)."""
    spec = cell.spec
    grid = spec.lambda_grid
    fixed = spec.lambda_fixed if spec.lambda_fixed is not None else 1.0

    if method.kind == "map":
        return None, 0, None

    if method.kind == "diagonal":
        cfg = InferenceConfig(train=cell.split.train, kind="diagonal",
                              include_biases=spec.include_biases)
        lam = fixed
        if grid:
            lam, _ = grid_search_lambda(cell.map_est, cell.split.val, grid, cfg)
        posterior = build_diag_posterior(
            assemble_ggn(cell.diag_term(), cell.eligible, "diagonal", lam), cell.map_est)
        return posterior, cell.eligible.shape[0], lam

    mask = _method_mask(cell, method, fixed, selection_seed)
    cfg = InferenceConfig(train=cell.split.train, kind="subnetwork", mask=mask,
                          rescale=spec.rescale, include_biases=spec.include_biases)
    lam = fixed
    if grid:
        lam, _ = grid_search_lambda(cell.map_est, cell.split.val, grid, cfg)
    lam_s = rescale_prior(lam, mask.size, cell.eligible.shape[0]) if spec.rescale else lam
    posterior = build_posterior(
        assemble_ggn(cell.subnet_term(mask), mask.selected, "subnetwork", lam_s),
        cell.map_est)
    return posterior, mask.size, lam


def _cell_rows(cell: _CellState, split_kind: str, split_index: int, seed: int):
    spec = cell.spec
    rows = []
    probe = None
    if spec.probe_kind == "toy_gap":
        probe = cell.x_scaler.transform(_toy_probe_inputs())
    y_scale = 1.0 if cell.y_scaler is None else float(cell.y_scaler.std[0])

    for method in spec.methods:
        sel_seeds = spec.selection_seeds if method.strategy == "random" else (0,)
        for sel_seed in sel_seeds:
            posterior, size, lam = _evaluate_method(cell, method, sel_seed)
            test = cell.split.test

            def row(metric, value):
                rows.append(MetricRow(
                    dataset=spec.dataset, split_kind=split_kind,
                    split_index=split_index, seed=seed, selection_seed=sel_seed,
                    method=method.label, subnet_size=size,
                    lam=float("nan") if lam is None else lam, metric=metric,
                    value=float(value)))

            if spec.task == "regression":
                pred = predict_regression(cell.map_est, posterior, test.inputs)
                pred = destandardize_regression(pred, cell.y_scaler)
                targets = (test.targets if cell.y_scaler is None
                           else cell.y_scaler.inverse(test.targets))
                row("ll", log_likelihood(pred, targets))
                row("rmse", rmse(pred, targets))
            else:
                pred = predict_classification(cell.map_est, posterior, test.inputs)
                row("ll", log_likelihood(pred, test.targets))
                row("error", error_rate(pred, test.targets))
                row("ece", ece(pred, test.targets))
                row("brier", brier(pred, test.targets))
            if probe is not None:
                stds = epistemic_std(cell.map_est, posterior, probe)
                row("in_between_std", float(np.mean(stds)) * y_scale)
    return rows


def run_comparison(spec: ExperimentSpec):
    """Execute the full pipeline for every (method, split, seed) cell."""
    dataset = load_experiment_dataset(spec)
    rows = []
    for split_kind, split_index, split in _iter_splits(spec, dataset):
        for seed in spec.seeds:
            cell = _CellState(spec, split, seed)
            rows.extend(_cell_rows(cell, split_kind, split_index, seed))
    return rows


def aggregate_rows(rows):
    """Mean and population std per (method, metric) across all other factors."""
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.metric), []).append(r.value)
    return {
        key: {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        for key, vals in sorted(groups.items())
    }


ROW_FIELDS = ("dataset", "split_kind", "split_index", "seed", "selection_seed",
              "method", "subnet_size", "lambda", "metric", "value")


def write_rows_csv(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_FIELDS)
        for r in rows:
            d = r.to_dict()
            writer.writerow([repr(d[k]) if isinstance(d[k], float) else d[k]
                             for k in ROW_FIELDS])
    os.replace(tmp, path)


def write_summary_json(path, rows):
    aggregates = [
        {"method": method, "metric": metric, **stats}
        for (method, metric), stats in aggregate_rows(rows).items()
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"n_rows": len(rows), "aggregates": aggregates}, fh, indent=2)
    os.replace(tmp, path)


def write_series_csv(path, rows, metric: str = "ll"):
    """Plot-ready series: per method, x = subnetwork size, y = mean, band = std."""
    groups = {}
    for r in rows:
        if r.metric != metric:
            continue
        groups.setdefault((r.method, r.subnet_size), []).append(r.value)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "subnet_size", "mean", "std"])
        for (method, size), vals in sorted(groups.items()):
            writer.writerow([method, size, repr(float(np.mean(vals))),
                             repr(float(np.std(vals)))])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Built-in experiment presets


def toy1d_spec(seeds=(0,), selection_seeds=(0, 1, 2, 3, 4)) -> ExperimentSpec:
    """1D two-cluster regression with the standard method lineup."""
    fractions = (0.5, 0.03, 0.01)
    methods = [
        MethodSpec("MAP", kind="map"),
        MethodSpec("Full", kind="subnetwork", strategy="full"),
        MethodSpec("Diag", kind="diagonal"),
        MethodSpec("Final-layer", kind="subnetwork", strategy="final_layer"),
    ]
    for f in fractions:
        methods.append(MethodSpec(f"Wass-{f:.0%}", kind="subnetwork",
                                  strategy="wasserstein_exact", fraction=f))
    for f in fractions:
        methods.append(MethodSpec(f"Rand-{f:.0%}", kind="subnetwork",
                                  strategy="random", fraction=f))
    return ExperimentSpec(
        name="toy1d", dataset="toy1d", task="regression", hidden_widths=(50, 50),
        methods=tuple(methods), lambda_fixed=3.0, n_standard_splits=1,
        seeds=tuple(seeds), selection_seeds=tuple(selection_seeds),
        probe_kind="toy_gap",
    )


def two_moons_spec(seeds=(0,)) -> ExperimentSpec:
    methods = (
        MethodSpec("MAP", kind="map"),
        MethodSpec("Full", kind="subnetwork", strategy="full"),
        MethodSpec("Diag", kind="diagonal"),
        MethodSpec("Wass-25%", kind="subnetwork", strategy="wasserstein_diag",
                   fraction=0.25),
        MethodSpec("Rand-25%", kind="subnetwork", strategy="random", fraction=0.25),
    )
    cfg = TrainConfig(task="classification", max_epochs=500, patience=125)
    return ExperimentSpec(
        name="two-moons", dataset="two-moons", task="classification",
        hidden_widths=(16, 16), methods=methods, train_cfg=cfg,
        lambda_grid=LAMBDA_GRID, n_standard_splits=1, seeds=tuple(seeds),
    )


def tabular_spec(n_standard_splits: int = 20, gap_dims=tuple(range(11)),
                 seeds=(0,), max_epochs: int = 2000, patience: int = 500
                 ) -> ExperimentSpec:
    """Bundled tabular regression with the validation-tuned prior grid."""
    methods = (
        MethodSpec("MAP", kind="map"),
        MethodSpec("Wass-diag-25%", kind="subnetwork", strategy="wasserstein_diag",
                   fraction=0.25),
    )
    cfg = TrainConfig(max_epochs=max_epochs, patience=patience)
    return ExperimentSpec(
        name="tabular", dataset="tabular", task="regression", hidden_widths=(50,),
        methods=methods, train_cfg=cfg, lambda_grid=LAMBDA_GRID,
        n_standard_splits=n_standard_splits, gap_dims=tuple(gap_dims),
        seeds=tuple(seeds),
    )


EXPERIMENTS = {
    "toy1d": toy1d_spec,
    "two-moons": two_moons_spec,
    "tabular": tabular_spec,
}
