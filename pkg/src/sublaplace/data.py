"""Dataset generation, CSV ingestion, splits, and standardization.

Split conventions (fixed here because the size arithmetic must be
reproducible): standard splits take floor(N * (1 - train_frac)) points for
test after a seeded shuffle, then ceil(val_frac * remaining) for validation,
remainder to train. Gap splits sort by one feature and cut at round(N/3) and
round(2N/3); the middle block is the test set, the outer blocks are shuffled
and split into train/validation with the same ceil rule.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.datasets import make_moons

from .errors import EmptyDataset, MissingColumn, ParseError, TooFewPoints
from .rng import derive_rng

# 1D toy geometry: two input clusters separated by a gap probed for
# in-between uncertainty.
TOY_CLUSTER_LOW = (-3.0, -1.0)
TOY_CLUSTER_HIGH = (1.0, 3.0)
TOY_GAP = (TOY_CLUSTER_LOW[1], TOY_CLUSTER_HIGH[0])


def toy_curve(x: np.ndarray) -> np.ndarray:
    """Smooth generating function for the 1D toy regression task."""
    return x**3 / 10.0


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus targets (floats) or labels (ints)."""

    inputs: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    feature_names: tuple = None
    target_names: tuple = None
    normalization: dict = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        if self.task == "regression":
            y = np.asarray(self.targets, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
        elif self.task == "classification":
            y = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if y.shape[0] != x.shape[0]:
            raise ValueError("inputs and targets disagree on the number of points")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y.astype(np.float64))):
            raise ValueError("dataset contains NaN or Inf")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        if self.task == "classification":
            return int(self.targets.max()) + 1
        return self.targets.shape[1]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "standard"
    train_frac: float = 0.9
    val_frac_of_train: float = 0.15
    gap_dimension: int = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("standard", "gap"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie in (0, 1)")
        if not 0.0 < self.val_frac_of_train < 1.0:
            raise ValueError("val_frac_of_train must lie in (0, 1)")


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset


def make_toy_1d(n_per_cluster: int = 100, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Two separated 1D input clusters with targets on a smooth curve.

    Inputs are uniform on TOY_CLUSTER_LOW and TOY_CLUSTER_HIGH; the open
    interval TOY_GAP between them contains no training data and is the
    region probed for in-between uncertainty.
    """
    if n_per_cluster < 1:
        raise EmptyDataset("n_per_cluster must be >= 1")
    rng = derive_rng(seed, "toy-1d")
    x_low = rng.uniform(*TOY_CLUSTER_LOW, size=n_per_cluster)
    x_high = rng.uniform(*TOY_CLUSTER_HIGH, size=n_per_cluster)
    x = np.concatenate([x_low, x_high])
    y = toy_curve(x) + noise_std * rng.normal(size=x.shape[0])
    return Dataset(inputs=x[:, None], targets=y[:, None], task="regression",
                   feature_names=("x",), target_names=("y",))


def make_two_moons(n_points: int = 400, noise_std: float = 0.15, seed: int = 0) -> Dataset:
    """Interleaved half-circles; the stock 2-class separation demo."""
    x, y = make_moons(n_samples=n_points, noise=noise_std, random_state=int(seed))
    return Dataset(inputs=np.asarray(x, dtype=np.float64), targets=y.astype(np.int64),
                   task="classification", feature_names=("x0", "x1"))


# Fixed response-surface coefficients for the bundled tabular regression
# dataset; the surface is part of the dataset definition, only the draw of
# inputs and noise depends on the caller's seed.
def _tabular_coefficients(input_dim: int):
    rng = derive_rng(7, "synthetic-tabular-surface", str(input_dim))
    amp = rng.uniform(0.5, 1.5, size=input_dim)
    freq = rng.uniform(0.8, 2.2, size=input_dim)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=input_dim)
    lin = rng.uniform(-0.5, 0.5, size=input_dim)
    return amp, freq, phase, lin


def tabular_response(x: np.ndarray) -> np.ndarray:
    """Noise-free response of the bundled synthetic tabular dataset."""
    x = np.asarray(x, dtype=np.float64)
    amp, freq, phase, lin = _tabular_coefficients(x.shape[1])
    out = np.sum(amp * np.sin(freq * x + phase), axis=1) + x @ lin
    out = out + 0.6 * x[:, 0] * x[:, 1]
    if x.shape[1] >= 4:
        out = out - 0.4 * x[:, 2] * x[:, 3]
    if x.shape[1] >= 6:
        out = out + 0.5 * np.tanh(x[:, 4] + x[:, 5])
    return out


def make_synthetic_tabular(
    n_points: int = 1598, input_dim: int = 11, noise_std: float = 0.4, seed: int = 0
) -> Dataset:
    """Bundled tabular regression dataset (default shape: 1598 x 11).

    Standard normal inputs with a fixed nonlinear response surface plus
    homoscedastic noise; the default size leaves 1439 train+validation
    points under the standard 90/10 split.
    """
    if n_points < 1:
        raise EmptyDataset("n_points must be >= 1")
    rng = derive_rng(seed, "synthetic-tabular")
    x = rng.normal(size=(n_points, input_dim))
    y = tabular_response(x) + noise_std * rng.normal(size=n_points)
    names = tuple(f"f{i}" for i in range(input_dim))
    return Dataset(inputs=x, targets=y[:, None], task="regression",
                   feature_names=names, target_names=("y",))


def _carve_validation(data: Dataset, trainval_idx, val_frac: float, seed: int):
    n_trainval = len(trainval_idx)
    n_val = math.ceil(val_frac * n_trainval)
    if n_val < 1 or n_val >= n_trainval:
        raise TooFewPoints(f"cannot carve a validation set from {n_trainval} points")
    order = derive_rng(seed, "val-carve").permutation(n_trainval)
    shuffled = np.asarray(trainval_idx)[order]
    return shuffled[n_val:], shuffled[:n_val]


def split_standard(data: Dataset, spec: SplitSpec) -> SplitDataset:
    """Seeded shuffle, floor-sized test block, ceil-sized validation block."""
    n = data.n
    n_test = math.floor(n * (1.0 - spec.train_frac))
    if n_test < 1 or n - n_test < 2:
        raise TooFewPoints(f"{n} points are too few for a {spec.train_frac:.0%} split")
    perm = derive_rng(spec.seed, "standard-split").permutation(n)
    test_idx, trainval_idx = perm[:n_test], perm[n_test:]
    train_idx, val_idx = _carve_validation(data, trainval_idx, spec.val_frac_of_train, spec.seed)
    return SplitDataset(train=data.take(train_idx), val=data.take(val_idx),
                        test=data.take(test_idx))


def split_gap(data: Dataset, dim: int, val_frac: float = 0.15, seed: int = 0) -> SplitDataset:
    """Middle third along one input dimension becomes the test set.

    One split per input dimension reproduces the usual gap-split counts
    (11 for an 11-feature dataset, and so on).
    """
    if not 0 <= dim < data.input_dim:
        raise TooFewPoints(f"gap dimension {dim} out of range for {data.input_dim} features")
    n = data.n
    lo, hi = round(n / 3), round(2 * n / 3)
    if lo < 2 or n - hi < 2 or hi <= lo:
        raise TooFewPoints(f"{n} points are too few for a gap split")
    order = np.argsort(data.inputs[:, dim], kind="stable")
    test_idx = order[lo:hi]
    trainval_idx = np.concatenate([order[:lo], order[hi:]])
    train_idx, val_idx = _carve_validation(data, trainval_idx, val_frac, seed)
    return SplitDataset(train=data.take(train_idx), val=data.take(val_idx),
                        test=data.take(test_idx))


def load_csv(path, target_columns, task: str = "regression") -> Dataset:
    """Read a numeric CSV with a header row; named columns become targets."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in target_columns if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing target column(s) {missing}")
        rows = []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            values = []
            for col_name, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric value {cell!r} at row {row_number}, "
                        f"column {col_name!r}",
                        row=row_number, column=col_name,
                    ) from None
                if not np.isfinite(value):
                    raise ParseError(
                        f"{path}: non-finite value at row {row_number}, column {col_name!r}",
                        row=row_number, column=col_name,
                    )
                values.append(value)
            if len(values) != len(header):
                raise ParseError(f"{path}: row {row_number} has {len(values)} cells, "
                                 f"expected {len(header)}", row=row_number)
            rows.append(values)
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    target_idx = [header.index(c) for c in target_columns]
    feature_idx = [i for i in range(len(header)) if i not in target_idx]
    if not feature_idx:
        raise MissingColumn(f"{path}: no feature columns left after removing targets")
    targets = table[:, target_idx]
    if task == "classification":
        targets = targets[:, 0].astype(np.int64)
    return Dataset(
        inputs=table[:, feature_idx],
        targets=targets,
        task=task,
        feature_names=tuple(header[i] for i in feature_idx),
        target_names=tuple(target_columns),
    )


def write_csv(path, data: Dataset):
    """Write a dataset back to CSV (features then targets); lossless floats."""
    features = data.feature_names or tuple(f"f{i}" for i in range(data.input_dim))
    if data.task == "classification":
        targets = data.target_names or ("label",)
        target_matrix = data.targets[:, None].astype(np.float64)
    else:
        targets = data.target_names or tuple(f"y{i}" for i in range(data.output_dim))
        target_matrix = data.targets
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(features) + list(targets))
        for x_row, y_row in zip(data.inputs, target_matrix):
            writer.writerow([repr(float(v)) for v in x_row]
                            + [repr(float(v)) for v in y_row])
    os.replace(tmp, path)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring; constant features keep unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        std = np.where(std > 0.0, std, 1.0)
        return cls(mean=mean, std=std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardizer":
        return cls(mean=np.asarray(doc["mean"], dtype=np.float64),
                   std=np.asarray(doc["std"], dtype=np.float64))


def standardize_split(split: SplitDataset):
    """Z-score inputs (and regression targets) using train-set statistics.

    Returns the standardized split plus the fitted input scaler and target
    scaler (None for classification). Metrics should be computed after
    mapping predictions back through the target scaler.
    """
    x_scaler = Standardizer.fit(split.train.inputs)
    y_scaler = None
    if split.train.task == "regression":
        y_scaler = Standardizer.fit(split.train.targets)

    def _apply(ds: Dataset) -> Dataset:
        targets = ds.targets if y_scaler is None else y_scaler.transform(ds.targets)
        norm = {"x": x_scaler.to_dict()}
        if y_scaler is not None:
            norm["y"] = y_scaler.to_dict()
        return replace(ds, inputs=x_scaler.transform(ds.inputs), targets=targets,
                       normalization=norm)

    return SplitDataset(train=_apply(split.train), val=_apply(split.val),
                        test=_apply(split.test)), x_scaler, y_scaler
