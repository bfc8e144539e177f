"""Ellipsoidal prediction regions: membership tests and log-volumes.

A region is the score sublevel set {y : score of y <= radius_sq} around a
point prediction.  Its reported volume is that of the ellipsoid
{e : (e - mean)' Sigma^-1 (e - mean) <= radius_sq} in residual space,

    log Vol = log V_N + (N/2) log(radius_sq) + (1/2) log det(Sigma),

with V_N the unit-ball volume.  Everything is kept in log space so that
dimensions in the hundreds do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from graphcp.exceptions import InputError
from graphcp.graph_core import GraphFilter
from graphcp.scoring import GRAPH_AWARE, FilteredResidualModel, mahalanobis_sq

__all__ = [
    "EllipsoidRegion",
    "VolumeStats",
    "build_region",
    "contains",
    "log_volume",
    "volume_ratio",
    "unit_ball_log_volume",
]


@dataclass(frozen=True)
class EllipsoidRegion:
    """Prediction region centered at prediction + mean residual."""

    prediction: np.ndarray
    mean: np.ndarray
    shape: np.ndarray
    shape_cholesky: np.ndarray
    shape_log_det: float
    radius_sq: float
    mode: str

    @property
    def center(self) -> np.ndarray:
        return self.prediction + self.mean

    @property
    def dim(self) -> int:
        return self.prediction.shape[0]


@dataclass(frozen=True)
class VolumeStats:
    """Log-volume and the geometric-mean semi-axis of a region.

    ``log_volume`` is -inf when the radius is zero.
    """

    log_volume: float
    per_dim_radius: float


def unit_ball_log_volume(n: int) -> float:
    """log of the volume of the N-dimensional unit ball."""
    return (n / 2.0) * math.log(math.pi) - math.lgamma(n / 2.0 + 1.0)


def build_region(
    prediction: np.ndarray, model: FilteredResidualModel, radius_sq: float
) -> EllipsoidRegion:
    """Assemble a region from a point prediction, a fitted residual model,
    and a predicted score quantile."""
    prediction = np.asarray(prediction, dtype=float)
    if radius_sq < 0.0:
        raise InputError(f"radius_sq must be >= 0, got {radius_sq}")
    if prediction.shape != model.mean.shape:
        raise InputError(
            f"prediction has shape {prediction.shape}, model expects "
            f"{model.mean.shape}"
        )
    return EllipsoidRegion(
        prediction=prediction,
        mean=model.mean,
        shape=model.covariance,
        shape_cholesky=model.cholesky,
        shape_log_det=model.log_det_cov,
        radius_sq=float(radius_sq),
        mode=model.mode,
    )


def contains(
    region: EllipsoidRegion, y: np.ndarray, filter: GraphFilter | None = None
) -> bool:
    """Score-level membership test; closed boundary (<=).

    Graph-aware regions score the filtered residual H(y - prediction) and
    therefore need the filter used at fit time.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != region.prediction.shape:
        raise InputError(
            f"y has shape {y.shape}, region expects {region.prediction.shape}"
        )
    residual = y - region.prediction
    if region.mode == GRAPH_AWARE:
        if filter is None:
            raise InputError("graph-aware region requires the fit-time filter")
        residual = filter.operator @ residual
    s = mahalanobis_sq(region.shape_cholesky, residual - region.mean)
    return bool(s <= region.radius_sq)


def log_volume(region: EllipsoidRegion) -> VolumeStats:
    """Log-volume of the region's ellipsoid; -inf sentinel at radius zero."""
    n = region.dim
    if region.radius_sq == 0.0:
        return VolumeStats(log_volume=-math.inf, per_dim_radius=0.0)
    lv = (
        unit_ball_log_volume(n)
        + (n / 2.0) * math.log(region.radius_sq)
        + 0.5 * region.shape_log_det
    )
    per_dim = math.exp((lv - unit_ball_log_volume(n)) / n)
    return VolumeStats(log_volume=lv, per_dim_radius=per_dim)


def volume_ratio(graph_aware: VolumeStats, agnostic: VolumeStats) -> float | None:
    """Shrinkage factor Vol(aware) / Vol(agnostic); None if either is empty."""
    if math.isinf(graph_aware.log_volume) or math.isinf(agnostic.log_volume):
        return None
    return math.exp(graph_aware.log_volume - agnostic.log_volume)
