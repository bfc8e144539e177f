"""Point predictors and the bootstrap ensemble around them.

Built-in baselines are persistence and a graph-filtered autoregression
whose coefficients are shared across nodes: one scalar per lag for the
node's own history and one for the neighborhood average.  Predictions from
externally trained models are ingested from files instead, so any
forecaster can feed the conformal pipeline.

Training residuals come from an out-of-bag ensemble: each member is fit on
a bootstrap resample of training steps, and a step's residual uses only
members that never saw it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from graphcp.exceptions import (
    FactorizationError,
    IngestionError,
    InputError,
    InsufficientDataError,
)
from graphcp.graph_core import GraphTopology, normalized_adjacency
from graphcp.scoring import ResidualBuffer

__all__ = [
    "PredictorSpec",
    "FittedPersistence",
    "FittedGraphAR",
    "BootstrapEnsemble",
    "PredictionTrace",
    "fit_graph_ar",
    "fit_persistence",
    "predict",
    "fit_ensemble",
    "ensemble_train_residuals",
    "ensemble_predict_paths",
    "load_external_predictions",
    "save_predictions",
]

logger = logging.getLogger(__name__)

EXTERNAL = "external"
PERSISTENCE = "persistence"
GRAPH_AR = "graph_ar"

_OOB_REDRAW_LIMIT = 50


@dataclass(frozen=True)
class PredictorSpec:
    """What point predictor to use and with which parameters."""

    kind: str = GRAPH_AR
    lags: int = 2
    diffusion: int = 1     # 0 disables the neighborhood-average terms
    ridge: float = 0.0
    horizon: int = 1

    def validate(self) -> None:
        if self.kind not in (EXTERNAL, PERSISTENCE, GRAPH_AR):
            raise InputError(f"unknown predictor kind {self.kind!r}")
        if self.lags < 1:
            raise InputError(f"lags must be >= 1, got {self.lags}")
        if self.diffusion not in (0, 1):
            raise InputError(f"diffusion must be 0 or 1, got {self.diffusion}")
        if self.ridge < 0.0:
            raise InputError(f"ridge must be >= 0, got {self.ridge}")
        if self.horizon < 1:
            raise InputError(f"horizon must be >= 1, got {self.horizon}")


@dataclass(frozen=True)
class FittedPersistence:
    """Repeats the most recent signal."""

    lags: int = 1

    def step_many(self, windows: np.ndarray) -> np.ndarray:
        return windows[:, -1, :]


@dataclass(frozen=True)
class FittedGraphAR:
    """Autoregression x_hat_{t+1} = sum_l (a_l I + b_l P) x_{t-l+1}."""

    a: np.ndarray
    b: np.ndarray
    diffusion_matrix: np.ndarray | None
    lags: int

    def step_many(self, windows: np.ndarray) -> np.ndarray:
        pred = np.zeros((windows.shape[0], windows.shape[2]))
        for lag in range(1, self.lags + 1):
            x = windows[:, self.lags - lag, :]
            pred += self.a[lag - 1] * x
            if self.diffusion_matrix is not None:
                pred += self.b[lag - 1] * (x @ self.diffusion_matrix.T)
        return pred


def _rollout(fitted, windows: np.ndarray, horizon: int) -> np.ndarray:
    """Iterated one-step rollout; returns (num_anchors, horizon, N)."""
    win = windows.copy()
    steps = []
    for _ in range(horizon):
        pred = fitted.step_many(win)
        steps.append(pred)
        win = np.concatenate([win[:, 1:, :], pred[:, None, :]], axis=1)
    return np.stack(steps, axis=1)


def _graph_ar_design(
    train: np.ndarray, g: GraphTopology, spec: PredictorSpec
) -> tuple[np.ndarray, np.ndarray, int]:
    """Stacked least-squares design over all (anchor, node) rows.

    Anchor k predicts train[p + k] from the p preceding signals; block k of
    the design holds that anchor's N node rows.
    """
    t_len, n = train.shape
    p = spec.lags
    n_design = t_len - p
    pmat = normalized_adjacency(g) if spec.diffusion else None
    cols = []
    for lag in range(1, p + 1):
        lagged = train[p - lag : p - lag + n_design]
        cols.append(lagged.reshape(-1))
        if pmat is not None:
            cols.append((lagged @ pmat.T).reshape(-1))
    features = np.column_stack(cols)
    targets = train[p:].reshape(-1)
    return features, targets, n_design


def _solve_coeffs(features: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    if ridge == 0.0:
        coef, *_ = np.linalg.lstsq(features, targets, rcond=None)
        if np.all(np.isfinite(coef)):
            return coef
        ridge = 1e-8
    for attempt in range(2):
        gram = features.T @ features + ridge * np.eye(features.shape[1])
        try:
            coef = np.linalg.solve(gram, features.T @ targets)
        except np.linalg.LinAlgError:
            coef = None
        if coef is not None and np.all(np.isfinite(coef)):
            return coef
        ridge *= 10.0
    raise FactorizationError("autoregression normal equations are singular")


def _coeffs_to_fitted(
    coef: np.ndarray, g: GraphTopology, spec: PredictorSpec
) -> FittedGraphAR:
    p = spec.lags
    if spec.diffusion:
        a = coef[0::2].copy()
        b = coef[1::2].copy()
        pmat = normalized_adjacency(g)
    else:
        a = coef.copy()
        b = np.zeros(p)
        pmat = None
    return FittedGraphAR(a=a, b=b, diffusion_matrix=pmat, lags=p)


def fit_graph_ar(
    train: np.ndarray, g: GraphTopology, spec: PredictorSpec
) -> FittedGraphAR:
    """Least-squares fit of the shared-coefficient graph autoregression.

    With ridge 0 the minimum-norm solution is used, so collinear designs
    (e.g. constant signals, where x and Px coincide) stay well posed.
    """
    train = np.asarray(train, dtype=float)
    spec.validate()
    if train.ndim != 2 or train.shape[1] != g.num_nodes:
        raise InputError(
            f"train must be T x {g.num_nodes}, got {train.shape}"
        )
    if train.shape[0] <= spec.lags:
        raise InsufficientDataError(
            f"need more than lags={spec.lags} timesteps, got {train.shape[0]}"
        )
    features, targets, _ = _graph_ar_design(train, g, spec)
    coef = _solve_coeffs(features, targets, spec.ridge)
    return _coeffs_to_fitted(coef, g, spec)


def fit_persistence() -> FittedPersistence:
    return FittedPersistence()


def predict(fitted, recent_signals: np.ndarray, horizon: int) -> np.ndarray:
    """Roll the predictor forward ``horizon`` steps from recent history.

    ``recent_signals`` is time-ascending with at least ``lags`` rows; model
    outputs are fed back for horizons beyond the first.  Returns an
    (horizon, N) array.
    """
    recent = np.asarray(recent_signals, dtype=float)
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    if recent.ndim != 2 or recent.shape[0] < fitted.lags:
        raise InsufficientDataError(
            f"need at least {fitted.lags} recent signals, got {recent.shape}"
        )
    window = recent[-fitted.lags:][None, :, :]
    return _rollout(fitted, window, horizon)[0]


@dataclass(frozen=True)
class BootstrapEnsemble:
    """Members fit on bootstrap resamples of training steps, plus the
    in-bag bookkeeping needed for out-of-bag residuals."""

    members: tuple
    in_bag: np.ndarray  # (num_models, num_design_steps) booleans
    spec: PredictorSpec
    lags: int
    seed: int

    @property
    def num_models(self) -> int:
        return len(self.members)

    @property
    def num_design_steps(self) -> int:
        return self.in_bag.shape[1]

    def oob_map(self) -> list[np.ndarray]:
        """Member indices that did NOT train on each design step."""
        return [np.nonzero(~self.in_bag[:, k])[0] for k in range(self.num_design_steps)]


def fit_ensemble(
    train: np.ndarray,
    g: GraphTopology,
    spec: PredictorSpec,
    num_models: int = 15,
    seed: int = 0,
) -> BootstrapEnsemble:
    """Fit ``num_models`` members on seeded bootstrap resamples.

    Resample sets are redrawn (up to a fixed limit) until every training
    step is out-of-bag for at least one member; with very small ensembles
    that may be unattainable and the loop falls back to the best draw.
    """
    train = np.asarray(train, dtype=float)
    spec.validate()
    if num_models < 1:
        raise InputError(f"num_models must be >= 1, got {num_models}")
    if spec.kind == EXTERNAL:
        raise InputError("external predictions cannot be fit as an ensemble")
    if train.shape[0] <= spec.lags:
        raise InsufficientDataError(
            f"need more than lags={spec.lags} timesteps, got {train.shape[0]}"
        )
    p = spec.lags if spec.kind == GRAPH_AR else 1
    n_design = train.shape[0] - p
    if n_design < 1:
        raise InsufficientDataError("no design steps available")

    rng = np.random.default_rng(seed)
    in_bag = None
    for _ in range(_OOB_REDRAW_LIMIT):
        draws = rng.integers(0, n_design, size=(num_models, n_design))
        candidate = np.zeros((num_models, n_design), dtype=bool)
        for b in range(num_models):
            candidate[b, draws[b]] = True
        in_bag = candidate
        resamples = draws
        if not np.all(candidate, axis=0).any():
            break

    members = []
    if spec.kind == PERSISTENCE:
        members = [FittedPersistence() for _ in range(num_models)]
    else:
        features, targets, _ = _graph_ar_design(train, g, spec)
        n = train.shape[1]
        for b in range(num_models):
            rows = (resamples[b][:, None] * n + np.arange(n)[None, :]).reshape(-1)
            try:
                coef = _solve_coeffs(features[rows], targets[rows], spec.ridge)
            except FactorizationError as exc:
                raise FactorizationError(
                    f"ensemble member {b} failed to fit: {exc}"
                ) from exc
            members.append(_coeffs_to_fitted(coef, g, spec))
    return BootstrapEnsemble(
        members=tuple(members), in_bag=in_bag, spec=spec, lags=p, seed=seed
    )


def _anchor_windows(signals: np.ndarray, anchors: np.ndarray, lags: int) -> np.ndarray:
    """(num_anchors, lags, N) history windows ending at each anchor time."""
    return np.stack([signals[t - lags + 1 : t + 1] for t in anchors], axis=0)


def ensemble_train_residuals(
    ens: BootstrapEnsemble, train: np.ndarray, horizon: int = 1
) -> ResidualBuffer:
    """Out-of-bag training residuals at the given horizon.

    A step's prediction averages only members whose resample skipped it;
    steps with no out-of-bag member are excluded (and logged).
    """
    train = np.asarray(train, dtype=float)
    p = ens.lags
    n_design = ens.num_design_steps
    if train.shape[0] != n_design + p:
        raise InputError("ensemble was fit on a different training length")
    n_valid = n_design - horizon + 1
    if n_valid < 1:
        raise InsufficientDataError(
            f"horizon {horizon} leaves no usable training steps"
        )
    anchors = np.arange(p - 1, p - 1 + n_valid)
    windows = _anchor_windows(train, anchors, p)
    member_preds = np.stack(
        [_rollout(m, windows, horizon)[:, horizon - 1, :] for m in ens.members],
        axis=0,
    )
    oob = ~ens.in_bag[:, :n_valid]  # (B, n_valid)
    counts = oob.sum(axis=0)
    buf = ResidualBuffer()
    skipped = []
    for k in range(n_valid):
        if counts[k] == 0:
            skipped.append(k)
            continue
        pred = member_preds[oob[:, k], k, :].mean(axis=0)
        buf.append(train[anchors[k] + horizon] - pred)
    if skipped:
        logger.info(
            "excluded %d training steps with no out-of-bag member: %s",
            len(skipped), skipped[:10],
        )
    return buf


def ensemble_predict_paths(
    ens: BootstrapEnsemble, signals: np.ndarray, anchors: np.ndarray, horizon: int
) -> np.ndarray:
    """Full-ensemble-mean rollouts; returns (num_anchors, horizon, N)."""
    signals = np.asarray(signals, dtype=float)
    anchors = np.asarray(anchors, dtype=int)
    if anchors.size and anchors.min() < ens.lags - 1:
        raise InsufficientDataError("anchor precedes available history")
    windows = _anchor_windows(signals, anchors, ens.lags)
    paths = np.stack([_rollout(m, windows, horizon) for m in ens.members], axis=0)
    return paths.mean(axis=0)


@dataclass(frozen=True)
class PredictionTrace:
    """Externally produced point predictions, aligned by timestep index.

    ``predictions[k, j]`` is the horizon-(j+1) prediction issued at
    timestep ``timestamps[k]``.
    """

    horizon: int
    timestamps: np.ndarray          # (T_e,) ints, strictly increasing
    predictions: np.ndarray         # (T_e, horizon, N)
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {int(t): k for k, t in enumerate(self.timestamps)}
        )

    @property
    def num_nodes(self) -> int:
        return self.predictions.shape[2]

    def lookup(self, t: int) -> np.ndarray:
        """(horizon, N) predictions issued at timestep t."""
        k = self._index.get(int(t))
        if k is None:
            raise IngestionError(f"prediction trace has no timestep {t}")
        return self.predictions[k]


def save_predictions(trace: PredictionTrace, path) -> None:
    doc = {
        "horizon": int(trace.horizon),
        "timestamps": [int(t) for t in trace.timestamps],
        "predictions": trace.predictions.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_external_predictions(path, dataset=None) -> PredictionTrace:
    """Load a prediction trace, optionally validating it against a dataset.

    The file must carry ``horizon``, strictly increasing integer
    ``timestamps``, and a rectangular ``predictions`` array of shape
    (len(timestamps), horizon, N).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read predictions file {path}: {exc}") from exc
    for key in ("horizon", "timestamps", "predictions"):
        if key not in doc:
            raise IngestionError(f"predictions file missing field {key!r}")
    horizon = int(doc["horizon"])
    if horizon < 1:
        raise IngestionError(f"horizon must be >= 1, got {horizon}")
    timestamps = np.asarray(doc["timestamps"], dtype=int)
    if timestamps.ndim != 1 or len(timestamps) == 0:
        raise IngestionError("timestamps must be a nonempty list of integers")
    if np.any(np.diff(timestamps) <= 0):
        bad = int(np.nonzero(np.diff(timestamps) <= 0)[0][0])
        raise IngestionError(
            f"timestamps not strictly increasing at position {bad + 1} "
            f"(value {int(timestamps[bad + 1])})"
        )
    try:
        predictions = np.asarray(doc["predictions"], dtype=float)
    except ValueError as exc:
        raise IngestionError(f"predictions array is ragged: {exc}") from exc
    if predictions.ndim != 3 or predictions.shape[:2] != (len(timestamps), horizon):
        raise IngestionError(
            f"predictions must have shape ({len(timestamps)}, {horizon}, N), "
            f"got {predictions.shape}"
        )
    if not np.all(np.isfinite(predictions)):
        k, j, nidx = np.argwhere(~np.isfinite(predictions))[0]
        raise IngestionError(
            f"non-finite prediction at timestamp {int(timestamps[k])}, "
            f"horizon {int(j) + 1}, node {int(nidx)}"
        )
    trace = PredictionTrace(
        horizon=horizon, timestamps=timestamps, predictions=predictions
    )
    if dataset is not None:
        if trace.num_nodes != dataset.topology.num_nodes:
            raise IngestionError(
                f"trace has {trace.num_nodes} nodes, dataset has "
                f"{dataset.topology.num_nodes}"
            )
        t_max = dataset.signals.shape[0] - 1
        out = timestamps[(timestamps < 0) | (timestamps > t_max)]
        if out.size:
            raise IngestionError(
                f"trace timestep {int(out[0])} outside dataset range [0, {t_max}]"
            )
    return trace
