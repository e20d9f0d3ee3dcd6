"""MAP estimation by mini-batch SGD with momentum and weight decay.

Regression jointly learns a homoscedastic Gaussian noise variance through a
log-variance parameter updated by the same SGD step (no weight decay on it);
classification minimizes softmax cross-entropy. Weight decay follows the
usual per-step convention (gradient += wd * w on the mean-batch loss), so at
a stationary point it plays the role of a Gaussian prior with precision
N * wd in the summed objective; :func:`negative_log_posterior` exposes the
summed form directly for checks against the log-posterior.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_softmax, softmax

from .data import Dataset
from .errors import DivergedTraining, EmptyDataset, EmptyValidation, TaskMismatch
from .net import MlpArchitecture, WeightVector, backprop_batch, forward_batch, he_init
from .rng import derive_rng


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 2000
    patience: int = 500
    seed: int = 0
    task: str = "regression"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class MapEstimate:
    """Point estimate returned by training; predictive means come from here."""

    weights: WeightVector
    noise_log_variance: float
    task: str
    val_metric_history: list
    train_loss_history: list
    best_epoch: int
    seed: int

    @property
    def noise_variance(self) -> float:
        if self.task != "regression":
            raise TaskMismatch("noise variance only exists for regression")
        return float(np.exp(self.noise_log_variance))


def _regression_loss(preds, targets, log_var):
    """Mean Gaussian NLL plus gradients wrt predictions and log-variance."""
    inv_var = np.exp(-log_var)
    resid = preds - targets
    n = preds.shape[0]
    nll = 0.5 * (np.log(2.0 * np.pi) + log_var + resid**2 * inv_var)
    dpred = resid * inv_var / n
    dlogvar = float(np.sum(0.5 * (1.0 - resid**2 * inv_var)) / n)
    return float(np.sum(nll) / n), dpred, dlogvar


def _classification_loss(logits, labels):
    """Mean softmax cross-entropy plus gradient wrt logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    nll = -logp[np.arange(n), labels]
    dlogits = softmax(logits, axis=1)
    dlogits[np.arange(n), labels] -= 1.0
    return float(np.sum(nll) / n), dlogits / n


def _validation_metric(arch, values, log_var, val: Dataset, task: str) -> float:
    preds = forward_batch(arch, WeightVector(arch, values), val.inputs)
    if task == "regression":
        loss, _, _ = _regression_loss(preds, val.targets, log_var)
    else:
        loss, _ = _classification_loss(preds, val.targets)
    return loss


def _resolve_split(data):
    if hasattr(data, "train"):
        return data.train, data.val
    return data, None


def train_map(arch: MlpArchitecture, data, cfg: TrainConfig) -> MapEstimate:
    """Minimize the penalized negative log-likelihood; keep the best-validation weights.

    ``data`` is either a SplitDataset or a bare training Dataset (allowed
    only when patience equals max_epochs, i.e. no early stopping).
    """
    train, val = _resolve_split(data)
    if train.n == 0:
        raise EmptyDataset("training set is empty")
    if train.task != cfg.task:
        raise TaskMismatch(f"dataset task {train.task!r} != config task {cfg.task!r}")
    has_val = val is not None and val.n > 0
    if cfg.patience < cfg.max_epochs and not has_val:
        raise EmptyValidation("early stopping requires a validation split")

    values = he_init(arch, cfg.seed).values.copy()
    log_var = 0.0
    velocity = np.zeros_like(values)
    velocity_lv = 0.0
    shuffle_rng = derive_rng(cfg.seed, "shuffle")

    best = (np.inf, values.copy(), log_var, 0)
    epochs_since_best = 0
    train_hist, val_hist = [], []

    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(train.n)
        epoch_loss = 0.0
        for start in range(0, train.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = train.inputs[idx], train.targets[idx]
            wv = WeightVector(arch, values)
            preds = forward_batch(arch, wv, xb)
            if cfg.task == "regression":
                loss, dpred, dlogvar = _regression_loss(preds, yb, log_var)
            else:
                loss, dpred = _classification_loss(preds, yb)
                dlogvar = 0.0
            if not np.isfinite(loss):
                raise DivergedTraining(f"loss became non-finite at epoch {epoch}")
            grad = backprop_batch(arch, wv, xb, dpred) + cfg.weight_decay * values
            velocity = cfg.momentum * velocity + grad
            values = values - cfg.learning_rate * velocity
            if cfg.task == "regression":
                velocity_lv = cfg.momentum * velocity_lv + dlogvar
                log_var = log_var - cfg.learning_rate * velocity_lv
            epoch_loss += loss * len(idx)
        train_hist.append(epoch_loss / train.n)

        if has_val:
            val_loss = _validation_metric(arch, values, log_var, val, cfg.task)
            if not np.isfinite(val_loss):
                raise DivergedTraining(f"validation loss non-finite at epoch {epoch}")
            val_hist.append(val_loss)
            if val_loss < best[0]:
                best = (val_loss, values.copy(), log_var, epoch)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    break

    if has_val:
        _, values, log_var, best_epoch = best
    else:
        best_epoch = cfg.max_epochs - 1
    return MapEstimate(
        weights=WeightVector(arch, values),
        noise_log_variance=float(log_var) if cfg.task == "regression" else None,
        task=cfg.task,
        val_metric_history=val_hist,
        train_loss_history=train_hist,
        best_epoch=best_epoch,
        seed=cfg.seed,
    )


def train_ensemble(arch: MlpArchitecture, data, cfg: TrainConfig, n_members: int = 5):
    """Seed-shifted retraining; member 0 is exactly train_map(cfg)."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    return [
        train_map(arch, data, replace(cfg, seed=cfg.seed + member))
        for member in range(n_members)
    ]


def negative_log_posterior(
    arch: MlpArchitecture, values: np.ndarray, log_var, data: Dataset,
    weight_decay: float, task: str = "regression",
) -> float:
    """Summed objective sum_n nll_n + (weight_decay / 2) * ||w||^2.

    With weight_decay playing the role of the prior precision, this equals
    the negative log-posterior of a Gaussian-prior model up to an additive
    constant.
    """
    wv = WeightVector(arch, values)
    preds = forward_batch(arch, wv, data.inputs)
    if task == "regression":
        mean_nll, _, _ = _regression_loss(preds, data.targets, log_var)
    else:
        mean_nll, _ = _classification_loss(preds, data.targets)
    penalty = 0.5 * weight_decay * float(values @ values)
    return mean_nll * data.n + penalty


def write_training_curve(path, train_hist, val_hist):
    """CSV with columns epoch, train_loss, val_loss."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, loss in enumerate(train_hist):
            val = val_hist[epoch] if epoch < len(val_hist) else ""
            writer.writerow([epoch, repr(float(loss)), repr(float(val)) if val != "" else ""])
    os.replace(tmp, path)
