"""Curvature assembly and Gaussian posteriors over selected weights.

The curvature is the outer-product (generalized Gauss-Newton) form
sum_n J_n^T H_n J_n + prior * I, where J_n is the parameter Jacobian of the
network outputs at training point n and H_n the output-space Hessian of the
negative log-likelihood. The data term is accumulated as a single stacked
matrix product of per-point square-root factors, which is deterministic and
keeps the result PSD by construction.

Posteriors hold the MAP restricted to the selected indices, the explicit
covariance (inverse curvature) with its Cholesky factor, and the point
values of every unselected parameter.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from . import linalg
from .data import Dataset
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidNoiseVariance,
    InvalidSize,
    NonPositiveDiagonal,
)
from .net import MlpArchitecture, jacobian_batch
from .train import MapEstimate

GGN_KINDS = ("full", "diagonal", "subnetwork")


@dataclass(frozen=True)
class GgnMatrix:
    """Curvature including the prior term; ``data`` is a dense matrix for
    full/subnetwork kinds and the diagonal vector for the diagonal kind."""

    kind: str
    data: np.ndarray
    prior_precision: float
    index_map: np.ndarray

    def __post_init__(self):
        if self.kind not in GGN_KINDS:
            raise ValueError(f"unknown GGN kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.index_map.shape[0]

    def data_term_diag(self) -> np.ndarray:
        """Diagonal of the likelihood (data) term, prior removed."""
        diag = self.data if self.kind == "diagonal" else np.diag(self.data)
        return diag - self.prior_precision


def likelihood_hessian(task: str, model_output: np.ndarray, noise_variance=None) -> np.ndarray:
    """Output-space Hessian of the negative log-likelihood at one output.

    Regression: I / sigma^2. Classification: diag(p) - p p^T with
    p = softmax(output), which is PSD by construction.
    """
    out = np.asarray(model_output, dtype=np.float64).reshape(-1)
    if task == "regression":
        if noise_variance is None or noise_variance <= 0:
            raise InvalidNoiseVariance(f"noise variance must be > 0, got {noise_variance}")
        return np.eye(out.shape[0]) / float(noise_variance)
    if task == "classification":
        p = softmax(out)
        return np.diag(p) - np.outer(p, p)
    raise ValueError(f"unknown task {task!r}")


def eligible_indices(arch: MlpArchitecture, include_biases: bool = False) -> np.ndarray:
    """Flat indices inference may touch; weights only unless biases are enabled."""
    if include_biases:
        return np.arange(arch.n_params)
    return arch.weight_indices()


def _sqrt_factor_rows(arch, map_est, data: Dataset, indices: np.ndarray) -> np.ndarray:
    """Stack C_n^T J_n over points, where H_n = C_n C_n^T; rows of the result
    R satisfy R^T R = sum_n J_n^T H_n J_n."""
    jac, _ = jacobian_batch(arch, map_est.weights, data.inputs, indices)
    n, n_out, k = jac.shape
    if map_est.task == "regression":
        sigma2 = map_est.noise_variance
        if sigma2 <= 0:
            raise InvalidNoiseVariance(f"noise variance must be > 0, got {sigma2}")
        return jac.reshape(n * n_out, k) / np.sqrt(sigma2)
    from .net import forward_batch

    probs = softmax(forward_batch(arch, map_est.weights, data.inputs), axis=1)
    hess = -probs[:, :, None] * probs[:, None, :]
    hess[:, np.arange(n_out), np.arange(n_out)] += probs
    eigvals, eigvecs = np.linalg.eigh(hess)
    factors = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))[:, None, :]
    rows = np.einsum("noi,nok->nik", factors, jac)
    return rows.reshape(n * n_out, k)


def ggn_data_term(
    arch: MlpArchitecture, map_est: MapEstimate, data: Dataset,
    indices: np.ndarray, diagonal: bool = False,
) -> np.ndarray:
    """Likelihood term of the curvature over the given flat indices (no prior)."""
    if data.n == 0:
        raise EmptyDataset("cannot accumulate curvature over an empty dataset")
    rows = _sqrt_factor_rows(arch, map_est, data, indices)
    if diagonal:
        return np.einsum("ij,ij->j", rows, rows)
    return rows.T @ rows


def assemble_ggn(data_term: np.ndarray, indices: np.ndarray, kind: str,
                 prior_precision: float) -> GgnMatrix:
    """Attach a prior term to a precomputed data term."""
    if kind == "diagonal":
        data = data_term + prior_precision
    else:
        data = data_term + prior_precision * np.eye(data_term.shape[0])
    return GgnMatrix(kind=kind, data=data, prior_precision=float(prior_precision),
                     index_map=np.asarray(indices, dtype=np.int64))


def compute_ggn(
    arch: MlpArchitecture, map_est: MapEstimate, data: Dataset, mask=None,
    kind: str = "full", prior_precision: float = 1.0, include_biases: bool = False,
) -> GgnMatrix:
    """Accumulate the curvature over all points of ``data`` plus prior * I.

    ``mask`` restricts the parameter set for the subnetwork kind; full and
    diagonal kinds default to the inference-eligible parameters.
    """
    if kind not in GGN_KINDS:
        raise ValueError(f"unknown GGN kind {kind!r}")
    if kind == "subnetwork":
        if mask is None:
            raise DimensionMismatch("subnetwork GGN requires a mask")
        indices = np.asarray(mask.selected, dtype=np.int64)
    elif mask is not None:
        indices = np.asarray(getattr(mask, "selected", mask), dtype=np.int64)
    else:
        indices = eligible_indices(arch, include_biases)
    term = ggn_data_term(arch, map_est, data, indices, diagonal=(kind == "diagonal"))
    return assemble_ggn(term, indices, kind, prior_precision)


def rescale_prior(lambda_full: float, s: int, d: int) -> float:
    """Prior precision for an s-of-d subnetwork: lambda * s / d.

    Shrinking the prior with the subnetwork keeps the magnitude of the
    implied linear-model kernel sum comparable to the full network's.
    """
    if not 1 <= s <= d:
        raise InvalidSize(f"need 1 <= s <= d, got s={s}, d={d}")
    if lambda_full <= 0:
        raise InvalidSize(f"prior precision must be > 0, got {lambda_full}")
    return float(lambda_full) * s / d


@dataclass(frozen=True)
class GaussianPosterior:
    """Full-covariance Gaussian over selected weights; the rest stay at the MAP."""

    mean: np.ndarray
    cov: np.ndarray
    cov_factor: linalg.CholeskyFactor
    index_map: np.ndarray
    total: int
    complement_indices: np.ndarray
    complement_values: np.ndarray
    prior_precision: float
    sigma2: float
    jitter: float

    @property
    def size(self) -> int:
        return self.index_map.shape[0]

    def marginal_variances(self) -> np.ndarray:
        return np.diag(self.cov)

    def embed_mean(self) -> np.ndarray:
        """Reassemble the full MAP vector from mean and complement."""
        full = np.empty(self.total)
        full[self.index_map] = self.mean
        full[self.complement_indices] = self.complement_values
        return full


@dataclass(frozen=True)
class DiagonalPosterior:
    """Factorized Gaussian baseline: marginal variances only."""

    mean: np.ndarray
    variances: np.ndarray
    index_map: np.ndarray
    total: int
    prior_precision: float
    sigma2: float

    @property
    def size(self) -> int:
        return self.index_map.shape[0]


def build_posterior(ggn: GgnMatrix, map_est: MapEstimate, max_jitter: float = 1e-3
                    ) -> GaussianPosterior:
    """Invert the curvature through its Cholesky factor.

    Raises NotPositiveDefinite (with the attempted jitter) if the curvature
    cannot be factored even after jitter escalation.
    """
    if ggn.kind not in ("full", "subnetwork"):
        raise ValueError("full-covariance posterior needs a full or subnetwork GGN")
    precision_factor = linalg.cholesky(ggn.data, max_jitter=max_jitter)
    cov = linalg.invert_spd(precision_factor)
    cov_factor = linalg.cholesky(cov, max_jitter=max_jitter)
    total = map_est.weights.arch.n_params
    complement = np.setdiff1d(np.arange(total), ggn.index_map)
    sigma2 = map_est.noise_variance if map_est.task == "regression" else None
    return GaussianPosterior(
        mean=map_est.weights.values[ggn.index_map].copy(),
        cov=cov,
        cov_factor=cov_factor,
        index_map=ggn.index_map.copy(),
        total=total,
        complement_indices=complement,
        complement_values=map_est.weights.values[complement].copy(),
        prior_precision=ggn.prior_precision,
        sigma2=sigma2,
        jitter=precision_factor.jitter_applied,
    )


def build_diag_posterior(ggn: GgnMatrix, map_est: MapEstimate) -> DiagonalPosterior:
    if ggn.kind != "diagonal":
        raise ValueError("diagonal posterior needs a diagonal GGN")
    variances = diag_marginal_variances(ggn)
    sigma2 = map_est.noise_variance if map_est.task == "regression" else None
    return DiagonalPosterior(
        mean=map_est.weights.values[ggn.index_map].copy(),
        variances=variances,
        index_map=ggn.index_map.copy(),
        total=map_est.weights.arch.n_params,
        prior_precision=ggn.prior_precision,
        sigma2=sigma2,
    )


def exact_marginal_variances(ggn: GgnMatrix, max_jitter: float = 1e-3) -> np.ndarray:
    """Diagonal of the explicit inverse of a full curvature matrix."""
    if ggn.kind != "full":
        raise ValueError("exact marginal variances require the full GGN")
    factor = linalg.cholesky(ggn.data, max_jitter=max_jitter)
    return np.diag(linalg.invert_spd(factor)).copy()


def diag_marginal_variances(ggn: GgnMatrix) -> np.ndarray:
    """Elementwise reciprocal of the curvature diagonal."""
    if ggn.kind != "diagonal":
        raise ValueError("diagonal marginal variances require the diagonal GGN")
    if np.any(ggn.data <= 0):
        raise NonPositiveDiagonal("curvature diagonal has non-positive entries")
    return 1.0 / ggn.data


def save_posterior(path, posterior: GaussianPosterior):
    """JSON wire format: mask indices, mean, covariance lower triangle,
    prior precision, sigma2."""
    n = posterior.size
    tril = posterior.cov[np.tril_indices(n)]
    doc = {
        "total": int(posterior.total),
        "mask_indices": posterior.index_map.tolist(),
        "mean": posterior.mean.tolist(),
        "covariance_lower": tril.tolist(),
        "prior_precision": posterior.prior_precision,
        "sigma2": posterior.sigma2,
        "jitter": posterior.jitter,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_posterior(path, map_est: MapEstimate = None) -> GaussianPosterior:
    """Rebuild a posterior from disk; complement values need the checkpoint
    weights, so they stay empty unless a MAP estimate is supplied."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    index_map = np.asarray(doc["mask_indices"], dtype=np.int64)
    n = index_map.shape[0]
    cov = np.zeros((n, n))
    cov[np.tril_indices(n)] = np.asarray(doc["covariance_lower"], dtype=np.float64)
    cov = cov + np.tril(cov, -1).T
    total = int(doc["total"])
    if map_est is not None:
        complement = np.setdiff1d(np.arange(total), index_map)
        complement_values = map_est.weights.values[complement].copy()
    else:
        complement = np.empty(0, dtype=np.int64)
        complement_values = np.empty(0)
    return GaussianPosterior(
        mean=np.asarray(doc["mean"], dtype=np.float64),
        cov=cov,
        cov_factor=linalg.cholesky(cov),
        index_map=index_map,
        total=total,
        complement_indices=complement,
        complement_values=complement_values,
        prior_precision=float(doc["prior_precision"]),
        sigma2=doc["sigma2"],
        jitter=float(doc.get("jitter", 0.0)),
    )
