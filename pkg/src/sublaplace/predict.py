"""Linearized predictive distributions.

The network is linearized at the MAP, so every method shares the MAP mean
and only the predictive second moment depends on the posterior:
Sigma(x) = J_S(x) Cov J_S(x)^T for a full-covariance subnetwork posterior,
or sum_d J_d^2 var_d for the factorized baseline. Regression adds the
observation noise sigma^2 I; classification pushes the per-class variances
through the probit-style logit scaling 1 / sqrt(1 + (pi/8) diag(Sigma)).
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .data import Standardizer
from .errors import IndexMapMismatch, TaskMismatch
from .laplace import DiagonalPosterior, GaussianPosterior
from .net import Jacobian, forward_batch, jacobian_batch
from .rng import derive_rng
from .train import MapEstimate

PROBIT_COEF = np.pi / 8.0


@dataclass(frozen=True)
class RegressionPredictive:
    """Per-input Gaussian: mean (n, O) and covariance (n, O, O)."""

    mean: np.ndarray
    cov: np.ndarray
    task: str = "regression"

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diagonal(self.cov, axis1=1, axis2=2))


@dataclass(frozen=True)
class ClassificationPredictive:
    """Per-input class probabilities (n, C)."""

    probs: np.ndarray
    task: str = "classification"


def _check_alignment(column_indices: np.ndarray, posterior) -> None:
    if not np.array_equal(column_indices, posterior.index_map):
        raise IndexMapMismatch("Jacobian columns do not match the posterior index map")


def linearized_variance(posterior, jac: Jacobian) -> np.ndarray:
    """Predictive function-space covariance J Cov J^T for one input (O x O)."""
    _check_alignment(jac.column_indices, posterior)
    if isinstance(posterior, GaussianPosterior):
        half = jac.matrix @ posterior.cov_factor.lower
    elif isinstance(posterior, DiagonalPosterior):
        half = jac.matrix * np.sqrt(posterior.variances)
    else:
        raise TypeError(f"unsupported posterior type {type(posterior).__name__}")
    return half @ half.T


def _batch_function_cov(map_est: MapEstimate, posterior, x_batch: np.ndarray) -> np.ndarray:
    """Sigma(x) for every input row, shape (n, O, O); zeros when posterior is None."""
    arch = map_est.weights.arch
    n = np.asarray(x_batch).shape[0]
    if posterior is None:
        return np.zeros((n, arch.output_dim, arch.output_dim))
    jac, cols = jacobian_batch(arch, map_est.weights, x_batch, posterior.index_map)
    _check_alignment(cols, posterior)
    if isinstance(posterior, GaussianPosterior):
        half = np.einsum("nok,kl->nol", jac, posterior.cov_factor.lower)
    elif isinstance(posterior, DiagonalPosterior):
        half = jac * np.sqrt(posterior.variances)
    else:
        raise TypeError(f"unsupported posterior type {type(posterior).__name__}")
    return np.einsum("nol,npl->nop", half, half)


def predict_regression(map_est: MapEstimate, posterior, x_batch: np.ndarray
                       ) -> RegressionPredictive:
    """Gaussian predictive N(f(x, map), Sigma(x) + sigma^2 I).

    ``posterior`` may be a GaussianPosterior, a DiagonalPosterior, or None
    for the bare MAP (zero function-space variance).
    """
    if map_est.task != "regression":
        raise TaskMismatch("predict_regression needs a regression MAP estimate")
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    mean = forward_batch(map_est.weights.arch, map_est.weights, x_batch)
    cov = _batch_function_cov(map_est, posterior, x_batch)
    cov = cov + map_est.noise_variance * np.eye(cov.shape[1])
    return RegressionPredictive(mean=mean, cov=cov)


def predict_classification(map_est: MapEstimate, posterior, x_batch: np.ndarray
                           ) -> ClassificationPredictive:
    """Probit-scaled softmax: softmax(f / sqrt(1 + (pi/8) diag(Sigma)))."""
    if map_est.task != "classification":
        raise TaskMismatch("predict_classification needs a classification MAP estimate")
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    logits = forward_batch(map_est.weights.arch, map_est.weights, x_batch)
    cov = _batch_function_cov(map_est, posterior, x_batch)
    variances = np.diagonal(cov, axis1=1, axis2=2)
    scaled = logits / np.sqrt(1.0 + PROBIT_COEF * variances)
    return ClassificationPredictive(probs=softmax(scaled, axis=1))


def epistemic_std(map_est: MapEstimate, posterior, x_batch: np.ndarray) -> np.ndarray:
    """Function-space predictive std (no observation noise), shape (n, O)."""
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    cov = _batch_function_cov(map_est, posterior, x_batch)
    return np.sqrt(np.clip(np.diagonal(cov, axis1=1, axis2=2), 0.0, None))


def sample_posterior_predictive(
    map_est: MapEstimate, posterior, x: np.ndarray, n_samples: int, seed: int = 0
) -> np.ndarray:
    """Monte-Carlo draws of the linearized function at one input.

    Samples w_S ~ N(mean, Cov) through the covariance Cholesky factor and
    returns f(x, map) + J_S (w_S - mean), shape (n_samples, O). This is the
    sampling oracle the closed forms are validated against.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    arch = map_est.weights.arch
    base = forward_batch(arch, map_est.weights, x)[0]
    if posterior is None:
        return np.tile(base, (n_samples, 1))
    jac, cols = jacobian_batch(arch, map_est.weights, x, posterior.index_map)
    _check_alignment(cols, posterior)
    rng = derive_rng(seed, "posterior-sample")
    z = rng.standard_normal((posterior.size, n_samples))
    if isinstance(posterior, GaussianPosterior):
        deviations = posterior.cov_factor.lower @ z
    elif isinstance(posterior, DiagonalPosterior):
        deviations = np.sqrt(posterior.variances)[:, None] * z
    else:
        raise TypeError(f"unsupported posterior type {type(posterior).__name__}")
    return base[None, :] + (jac[0] @ deviations).T


def destandardize_regression(pred: RegressionPredictive, y_scaler: Standardizer
                             ) -> RegressionPredictive:
    """Map a predictive built on standardized targets back to original units."""
    if y_scaler is None:
        return pred
    scale = np.asarray(y_scaler.std, dtype=np.float64)
    mean = y_scaler.inverse(pred.mean)
    cov = pred.cov * np.outer(scale, scale)[None, :, :]
    return RegressionPredictive(mean=mean, cov=cov)


def write_predictions_csv(path, pred):
    """CSV dump: input id, then means and stds (regression) or probabilities."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(pred, RegressionPredictive):
            n_out = pred.mean.shape[1]
            writer.writerow(["id"] + [f"mean{i}" for i in range(n_out)]
                            + [f"std{i}" for i in range(n_out)])
            stds = pred.std
            for i, (m, s) in enumerate(zip(pred.mean, stds)):
                writer.writerow([i] + [repr(float(v)) for v in m]
                                + [repr(float(v)) for v in s])
        else:
            n_cls = pred.probs.shape[1]
            writer.writerow(["id"] + [f"p{i}" for i in range(n_cls)])
            for i, p in enumerate(pred.probs):
                writer.writerow([i] + [repr(float(v)) for v in p])
    os.replace(tmp, path)
