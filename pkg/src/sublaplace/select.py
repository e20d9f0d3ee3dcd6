"""Subnetwork selection.

The working selection rule is greedy: score every eligible weight by its
(approximate) posterior marginal variance and keep the s largest, which
minimizes the residual-variance objective sum_d sigma_d^2 (1 - m_d) over all
masks of size s. The exact squared 2-Wasserstein distance between the full
Gaussian posterior and its masked counterpart is implemented as a small-scale
oracle for validating that reduction, never as the selection path.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import DimensionMismatch, InvalidSize, MissingCurvature, NotPSD
from .laplace import (
    GgnMatrix,
    diag_marginal_variances,
    eligible_indices,
    exact_marginal_variances,
)
from .rng import derive_rng
from .train import MapEstimate

STRATEGIES = ("wasserstein_exact", "wasserstein_diag", "random", "final_layer", "magnitude")
SCORE_STRATEGIES = ("wasserstein_exact", "wasserstein_diag", "magnitude")


@dataclass(frozen=True)
class SubnetworkMask:
    """Sorted flat parameter indices selected for inference."""

    selected: np.ndarray
    total: int

    def __post_init__(self):
        sel = np.unique(np.asarray(self.selected, dtype=np.int64))
        if sel.size != np.asarray(self.selected).size:
            raise InvalidSize("mask indices must be unique")
        if not 1 <= sel.size <= self.total:
            raise InvalidSize(f"mask size must lie in [1, {self.total}], got {sel.size}")
        if sel[0] < 0 or sel[-1] >= self.total:
            raise InvalidSize("mask indices out of range")
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)

    @property
    def size(self) -> int:
        return int(self.selected.shape[0])

    @classmethod
    def full(cls, total: int) -> "SubnetworkMask":
        return cls(selected=np.arange(total), total=total)

    @classmethod
    def over(cls, indices, total: int) -> "SubnetworkMask":
        return cls(selected=np.asarray(indices, dtype=np.int64), total=total)

    def complement(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.total), self.selected)

    def membership(self) -> np.ndarray:
        m = np.zeros(self.total, dtype=bool)
        m[self.selected] = True
        return m


@dataclass(frozen=True)
class SelectionScores:
    """Per-weight selection scores plus the candidate index set.

    Score-based strategies carry a length-``total`` score vector (entries
    outside ``eligible`` are ignored); random and final-layer carry none.
    """

    strategy: str
    total: int
    eligible: np.ndarray
    scores: np.ndarray = None
    seed: int = 0
    final_layer_indices: np.ndarray = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy in SCORE_STRATEGIES:
            if self.scores is None or np.asarray(self.scores).shape[0] != self.total:
                raise MissingCurvature(
                    f"strategy {self.strategy!r} needs a length-{self.total} score vector"
                )
            s = np.asarray(self.scores, dtype=np.float64)[np.asarray(self.eligible)]
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise ValueError("scores must be finite and non-negative")


def score_weights(
    strategy: str, map_est: MapEstimate, ggn_source: GgnMatrix = None,
    include_biases: bool = False, seed: int = 0,
) -> SelectionScores:
    """Build selection scores for a strategy.

    wasserstein_exact needs a full GGN, wasserstein_diag a diagonal one;
    magnitude uses |map weight|; random and final-layer need no curvature.
    """
    arch = map_est.weights.arch
    total = arch.n_params
    eligible = eligible_indices(arch, include_biases)

    if strategy in ("wasserstein_exact", "wasserstein_diag"):
        wanted = "full" if strategy == "wasserstein_exact" else "diagonal"
        if ggn_source is None or ggn_source.kind != wanted:
            raise MissingCurvature(f"strategy {strategy!r} requires a {wanted} GGN")
        variances = (exact_marginal_variances(ggn_source)
                     if wanted == "full" else diag_marginal_variances(ggn_source))
        scores = np.zeros(total)
        scores[ggn_source.index_map] = variances
        return SelectionScores(strategy=strategy, total=total,
                               eligible=ggn_source.index_map.copy(), scores=scores)
    if strategy == "magnitude":
        scores = np.zeros(total)
        scores[eligible] = np.abs(map_est.weights.values[eligible])
        return SelectionScores(strategy=strategy, total=total, eligible=eligible,
                               scores=scores)
    if strategy == "random":
        return SelectionScores(strategy=strategy, total=total, eligible=eligible, seed=seed)
    if strategy == "final_layer":
        final = arch.final_layer_weight_indices()
        if include_biases:
            bias_slice = arch.layer_bias_slice(arch.n_layers - 1)
            final = np.concatenate([final, np.arange(bias_slice.start, bias_slice.stop)])
        return SelectionScores(strategy=strategy, total=total, eligible=eligible,
                               final_layer_indices=final)
    raise ValueError(f"unknown strategy {strategy!r}")


def select_top_s(scores: SelectionScores, s: int = None) -> SubnetworkMask:
    """Pick the mask for a strategy.

    Score strategies keep the s highest-scoring eligible weights, ties broken
    by lowest flat index. Random draws s eligible indices without replacement
    from the seeded stream. Final-layer ignores s and returns exactly the
    last layer's indices.
    """
    eligible = np.asarray(scores.eligible, dtype=np.int64)
    if scores.strategy == "final_layer":
        return SubnetworkMask.over(scores.final_layer_indices, scores.total)
    if s is None or not 1 <= s <= eligible.shape[0]:
        raise InvalidSize(
            f"subnetwork size must lie in [1, {eligible.shape[0]}], got {s}"
        )
    if scores.strategy == "random":
        rng = derive_rng(scores.seed, "random-mask")
        chosen = rng.choice(eligible, size=s, replace=False)
        return SubnetworkMask.over(chosen, scores.total)
    values = np.asarray(scores.scores, dtype=np.float64)[eligible]
    order = np.lexsort((eligible, -values))
    return SubnetworkMask.over(eligible[order[:s]], scores.total)


def residual_variance_objective(variances: np.ndarray, mask: SubnetworkMask) -> float:
    """sum_d sigma_d^2 (1 - m_d): the diagonal selection objective."""
    variances = np.asarray(variances, dtype=np.float64)
    if variances.shape[0] != mask.total:
        raise DimensionMismatch("variance vector length must equal mask total")
    return float(variances.sum() - variances[mask.selected].sum())


def wasserstein_sq_exact(cov_full: np.ndarray, mask: SubnetworkMask) -> float:
    """Exact squared 2-Wasserstein distance between N(m, cov_full) and its
    masked counterpart N(m, M_S o cov_full) (zeroed rows and columns off the
    mask). Small-scale validation oracle; O(D^3) eigendecompositions.
    """
    cov = np.asarray(cov_full, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got {cov.shape}")
    if cov.shape[0] != mask.total:
        raise DimensionMismatch("mask total must equal covariance dimension")
    masked = np.zeros_like(cov)
    sel = mask.selected
    masked[np.ix_(sel, sel)] = cov[np.ix_(sel, sel)]
    root = linalg.matrix_sqrt_psd(masked)
    cross = linalg.matrix_sqrt_psd(root @ cov @ root)
    value = float(np.trace(cov) + np.trace(masked) - 2.0 * np.trace(cross))
    if value < -1e-8:
        raise NotPSD(f"Wasserstein objective came out at {value:.3e} < -1e-8")
    return max(value, 0.0)


def dead_weight_filter(ggn_diag_data_term: np.ndarray, threshold: float) -> np.ndarray:
    """Positions whose data-term curvature never exceeds ``threshold``.

    Zero data-term curvature means the Jacobian was zero at every training
    point (dead ReLU paths); such weights keep the prior variance and would
    crowd out informative ones under variance-based selection.
    """
    term = np.asarray(ggn_diag_data_term, dtype=np.float64)
    if threshold < 0:
        raise InvalidSize(f"threshold must be >= 0, got {threshold}")
    return np.flatnonzero(term <= threshold)


def apply_dead_filter(scores: SelectionScores, ggn: GgnMatrix, threshold: float = 0.0
                      ) -> SelectionScores:
    """Drop dead positions (per the GGN data term) from the eligible set."""
    dead_positions = dead_weight_filter(ggn.data_term_diag(), threshold)
    dead_flat = ggn.index_map[dead_positions]
    keep = np.setdiff1d(scores.eligible, dead_flat)
    if keep.size == 0:
        raise InvalidSize("dead-weight filter removed every eligible weight")
    return replace(scores, eligible=keep)


def save_mask(path, mask: SubnetworkMask):
    doc = {"total": int(mask.total), "selected": mask.selected.tolist()}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_mask(path) -> SubnetworkMask:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SubnetworkMask.over(np.asarray(doc["selected"], dtype=np.int64),
                               int(doc["total"]))
