"""Residual buffers, moment estimation, and Mahalanobis nonconformity scores.

Raw residuals are y_t - yhat_t.  In graph-aware mode they are diffused by
the averaging filter before the mean and covariance are estimated; the
nonconformity score of an observation is then the squared Mahalanobis
distance of its (filtered) residual under those estimates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from graphcp.exceptions import FactorizationError, InputError, InsufficientDataError
from graphcp.graph_core import GraphFilter, GraphTopology

__all__ = [
    "ResidualBuffer",
    "FilteredResidualModel",
    "HomophilyGap",
    "compute_residuals",
    "filter_residuals",
    "fit_model",
    "score",
    "loo_scores",
    "homophily_gap",
    "mahalanobis_sq",
]

logger = logging.getLogger(__name__)

GRAPH_AWARE = "graph-aware"
GRAPH_AGNOSTIC = "graph-agnostic"

#: Ridge escalation limit when factorizing a covariance estimate.
_MAX_RIDGE_ESCALATIONS = 8


class ResidualBuffer:
    """Time-ordered residual vectors of a common dimension.

    An optional ``capacity`` turns the buffer into a rolling window: the
    oldest entries are dropped once the capacity is exceeded.  Appends are
    single-writer; reads return copies or read-only views.
    """

    def __init__(self, residuals=None, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise InputError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._rows: list[np.ndarray] = []
        if residuals is not None:
            for r in residuals:
                self.append(r)

    def append(self, residual: np.ndarray) -> None:
        row = np.asarray(residual, dtype=float)
        if row.ndim != 1:
            raise InputError("residual must be a 1-D vector")
        if self._rows and row.shape != self._rows[0].shape:
            raise InputError(
                f"residual dimension {row.shape[0]} does not match buffer "
                f"dimension {self._rows[0].shape[0]}"
            )
        self._rows.append(row)
        if self.capacity is not None and len(self._rows) > self.capacity:
            del self._rows[: len(self._rows) - self.capacity]

    def as_matrix(self) -> np.ndarray:
        if not self._rows:
            return np.empty((0, 0))
        return np.vstack(self._rows)

    @property
    def dim(self) -> int:
        if not self._rows:
            raise InsufficientDataError("empty residual buffer has no dimension")
        return self._rows[0].shape[0]

    def __len__(self) -> int:
        return len(self._rows)

    def copy(self) -> "ResidualBuffer":
        out = ResidualBuffer(capacity=self.capacity)
        out._rows = [r.copy() for r in self._rows]
        return out


@dataclass(frozen=True)
class FilteredResidualModel:
    """Mean and factorized covariance of (filtered) residuals.

    ``regularization`` records the ridge actually added to the sample
    covariance to make the Cholesky factorization succeed.
    """

    mean: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray
    log_det_cov: float
    regularization: float
    mode: str

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_moments(
        cls, mean: np.ndarray, covariance: np.ndarray, mode: str = GRAPH_AGNOSTIC,
        ridge: float = 0.0,
    ) -> "FilteredResidualModel":
        """Build a model from explicitly supplied moments.

        Unlike :func:`fit_model` no ridge is applied up front; the given
        covariance must already be (numerically) positive definite unless a
        nonzero ``ridge`` is passed.
        """
        mean = np.asarray(mean, dtype=float)
        covariance = np.asarray(covariance, dtype=float)
        cov, chol, gamma = _factor_covariance(covariance, initial_ridge=ridge)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return cls(
            mean=mean, covariance=cov, cholesky=chol,
            log_det_cov=log_det, regularization=gamma, mode=mode,
        )


@dataclass(frozen=True)
class HomophilyGap:
    """Mean absolute residual difference over node pairs.

    ``disconnected_gap`` is None when the graph is complete and no
    disconnected pair exists.  ``gap_se`` is the standard error of
    (connected_gap - disconnected_gap) across the pairs used.
    """

    connected_gap: float
    disconnected_gap: float | None
    gap_se: float | None


def compute_residuals(targets: np.ndarray, predictions: np.ndarray) -> ResidualBuffer:
    """Per-timestep residuals target - prediction as a buffer."""
    targets = np.asarray(targets, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if targets.shape != predictions.shape:
        raise InputError(
            f"targets shape {targets.shape} != predictions shape {predictions.shape}"
        )
    if targets.ndim != 2 or targets.shape[0] < 1:
        raise InputError("expected T x N matrices with T >= 1")
    return ResidualBuffer(targets - predictions)


def filter_residuals(buf: ResidualBuffer, f: GraphFilter) -> ResidualBuffer:
    """Diffuse every residual in the buffer by the graph filter."""
    if len(buf) == 0:
        return ResidualBuffer(capacity=buf.capacity)
    if buf.dim != f.num_nodes:
        raise InputError(
            f"residual dimension {buf.dim} != filter dimension {f.num_nodes}"
        )
    filtered = buf.as_matrix() @ f.operator.T
    return ResidualBuffer(filtered, capacity=buf.capacity)


def _factor_covariance(
    cov: np.ndarray, initial_ridge: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Cholesky-factor a covariance, escalating the ridge until it succeeds."""
    n = cov.shape[0]
    eye = np.eye(n)
    gamma = initial_ridge
    for attempt in range(_MAX_RIDGE_ESCALATIONS + 1):
        candidate = cov + gamma * eye if gamma > 0.0 else cov
        try:
            chol = np.linalg.cholesky(candidate)
            return candidate, chol, gamma
        except np.linalg.LinAlgError:
            if gamma == 0.0:
                trace = float(np.trace(cov))
                gamma = max(1e-8, 1e-6 * trace / n)
            else:
                gamma *= 10.0
    raise FactorizationError(
        f"covariance not factorizable after {_MAX_RIDGE_ESCALATIONS} ridge "
        f"escalations (last ridge {gamma / 10.0})"
    )


def fit_model(buf: ResidualBuffer, mode: str = GRAPH_AGNOSTIC) -> FilteredResidualModel:
    """Sample mean and ridge-regularized sample covariance of a buffer.

    The covariance uses the m-1 denominator.  A ridge
    gamma = max(1e-8, 1e-6 * trace / N) is always added and escalated
    tenfold until the Cholesky factorization succeeds; the applied value is
    recorded on the model.
    """
    if mode not in (GRAPH_AWARE, GRAPH_AGNOSTIC):
        raise InputError(f"unknown mode {mode!r}")
    m = len(buf)
    if m < 2:
        raise InsufficientDataError(f"need at least 2 residuals to fit, got {m}")
    e = buf.as_matrix()
    mean = e.mean(axis=0)
    centered = e - mean
    cov = centered.T @ centered / (m - 1)
    n = cov.shape[0]
    gamma = max(1e-8, 1e-6 * float(np.trace(cov)) / n)
    cov_reg, chol, gamma = _factor_covariance(cov, initial_ridge=gamma)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return FilteredResidualModel(
        mean=mean, covariance=cov_reg, cholesky=chol,
        log_det_cov=log_det, regularization=gamma, mode=mode,
    )


def mahalanobis_sq(cholesky: np.ndarray, diff: np.ndarray) -> float:
    """Squared Mahalanobis norm diff' Sigma^-1 diff via a triangular solve."""
    z = scipy.linalg.solve_triangular(cholesky, diff, lower=True)
    return float(z @ z)


def score(model: FilteredResidualModel, e: np.ndarray) -> float:
    """Nonconformity score (e - mean)' Sigma^-1 (e - mean), always >= 0."""
    e = np.asarray(e, dtype=float)
    if e.shape != model.mean.shape:
        raise InputError(
            f"residual has shape {e.shape}, model expects {model.mean.shape}"
        )
    return mahalanobis_sq(model.cholesky, e - model.mean)


def loo_scores(model: FilteredResidualModel, buf: ResidualBuffer) -> np.ndarray:
    """Leave-one-out scores of the sample the model was fitted on.

    In-sample Mahalanobis distances are compressed because each residual
    shapes its own metric; calibrating on them undercovers future points.
    The exact rank-one downdate identity converts the in-sample distances
    d_i^2 to what each residual would score against moments fitted on the
    other m-1 residuals, so calibration and test scores are exchangeable.
    Requires that ``model`` came from :func:`fit_model` on exactly ``buf``.
    """
    m = len(buf)
    if m < 3:
        raise InsufficientDataError(f"leave-one-out scores need m >= 3, got {m}")
    e = buf.as_matrix()
    d2 = np.array([mahalanobis_sq(model.cholesky, row - model.mean) for row in e])
    denom = np.maximum(1.0 - m * d2 / (m - 1) ** 2, 1e-12)
    return (m - 2) * (m / (m - 1)) ** 2 * (d2 / (m - 1)) / denom


def homophily_gap(
    buf: ResidualBuffer, g: GraphTopology, seed: int = 0
) -> HomophilyGap:
    """Compare residual gaps |e_i - e_j| on connected vs disconnected pairs.

    Each pair contributes its time-averaged absolute difference.  The
    disconnected side is a uniform sample (seeded) of as many pairs as the
    graph has edges, so the two averages are comparable.  On a complete
    graph ``disconnected_gap`` is None.
    """
    if len(buf) == 0:
        raise InsufficientDataError("residual buffer is empty")
    e = buf.as_matrix()
    connected = sorted(g.edges)
    if not connected:
        raise InputError("graph has no edges to compare against")
    conn_idx = np.array(connected)
    conn_vals = np.mean(np.abs(e[:, conn_idx[:, 0]] - e[:, conn_idx[:, 1]]), axis=0)
    connected_gap = float(conn_vals.mean())

    n = g.num_nodes
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    disconnected = [p for p in all_pairs if p not in g.edges]
    if not disconnected:
        return HomophilyGap(connected_gap, None, None)
    rng = np.random.default_rng(seed)
    k = len(connected)
    chosen = rng.choice(
        len(disconnected), size=k, replace=len(disconnected) < k
    )
    disc_idx = np.array([disconnected[c] for c in chosen])
    disc_vals = np.mean(np.abs(e[:, disc_idx[:, 0]] - e[:, disc_idx[:, 1]]), axis=0)
    disconnected_gap = float(disc_vals.mean())
    se = float(
        np.sqrt(conn_vals.var(ddof=1) / k + disc_vals.var(ddof=1) / k)
        if k > 1
        else 0.0
    )
    return HomophilyGap(connected_gap, disconnected_gap, se)
