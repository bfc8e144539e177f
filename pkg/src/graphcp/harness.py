"""Sequential evaluation loop: scores, quantiles, regions, coverage.

For each run the point predictor is fit on the training span, training
scores are built from out-of-bag residuals, and then the test span is
walked one step at a time: predict a score quantile from the trailing
window, build the ellipsoidal region, record whether the realized target
fell inside it and how large the region was, then release the realized
score into the history once it becomes observable.  Regions constructed at
time t therefore never depend on data after t.

Graph-aware and graph-agnostic pipelines share predictors, residuals and
quantile-regressor seeds, so with tau = 0 the two produce identical
reports.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from graphcp.base_models import (
    EXTERNAL,
    BootstrapEnsemble,
    PredictionTrace,
    PredictorSpec,
    ensemble_predict_paths,
    ensemble_train_residuals,
    fit_ensemble,
)
from graphcp.data_io import GraphTimeSeriesDataset, SplitConfig, split
from graphcp.exceptions import IngestionError, InputError
from graphcp.graph_core import GraphFilter, build_filter
from graphcp.quantile import (
    EMPIRICAL,
    FOREST,
    ForestConfig,
    ScoreSeries,
    fit_empirical,
    fit_forest,
    make_windows,
    predict_quantile,
)
from graphcp.region import build_region, contains, log_volume, unit_ball_log_volume
from graphcp.scoring import (
    GRAPH_AGNOSTIC,
    GRAPH_AWARE,
    ResidualBuffer,
    filter_residuals,
    fit_model,
    loo_scores,
    score,
)

__all__ = [
    "ExperimentConfig",
    "HorizonStats",
    "RatioStats",
    "EvaluationReport",
    "GridResult",
    "CoverageVolumeSummary",
    "run_experiment",
    "run_grid",
    "coverage_and_volume",
    "report_rows",
    "CSV_COLUMNS",
]

MODE_BOTH = "both"
_MODES = (GRAPH_AWARE, GRAPH_AGNOSTIC)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sequential evaluation needs, with reproducible seeds."""

    alpha: float = 0.1
    window: int = 10
    tau: float = 0.25
    horizon: int = 1
    mode: str = MODE_BOTH
    num_runs: int = 5
    refit_interval: int = 1
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    num_bootstrap: int = 15
    quantile_kind: str = FOREST
    forest: ForestConfig = field(default_factory=ForestConfig)
    seed: int = 0
    train_fraction: float = 0.7
    zscore: bool = False

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise InputError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.window < 1:
            raise InputError(f"window must be >= 1, got {self.window}")
        if not (0.0 <= self.tau <= 1.0):
            raise InputError(f"tau must be in [0, 1], got {self.tau}")
        if self.horizon < 1:
            raise InputError(f"horizon must be >= 1, got {self.horizon}")
        if self.mode not in (GRAPH_AWARE, GRAPH_AGNOSTIC, MODE_BOTH):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.num_runs < 1:
            raise InputError(f"num_runs must be >= 1, got {self.num_runs}")
        if self.refit_interval < 1:
            raise InputError(
                f"refit_interval must be >= 1, got {self.refit_interval}"
            )
        if self.num_bootstrap < 1:
            raise InputError(
                f"num_bootstrap must be >= 1, got {self.num_bootstrap}"
            )
        if self.quantile_kind not in (FOREST, EMPIRICAL):
            raise InputError(f"unknown quantile kind {self.quantile_kind!r}")
        if not (0.0 < self.train_fraction < 1.0):
            raise InputError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )
        if self.seed < 0:
            raise InputError(f"seed must be >= 0, got {self.seed}")
        self.predictor.validate()

    @property
    def modes(self) -> tuple[str, ...]:
        return _MODES if self.mode == MODE_BOTH else (self.mode,)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        predictor = doc.pop("predictor", None)
        forest = doc.pop("forest", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if predictor is not None:
            bad = set(predictor) - set(PredictorSpec.__dataclass_fields__)
            if bad:
                raise InputError(f"unknown predictor keys: {sorted(bad)}")
            cfg = replace(cfg, predictor=PredictorSpec(**predictor))
        if forest is not None:
            bad = set(forest) - set(ForestConfig.__dataclass_fields__)
            if bad:
                raise InputError(f"unknown forest keys: {sorted(bad)}")
            cfg = replace(cfg, forest=ForestConfig(**forest))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CoverageVolumeSummary:
    """Aggregate of one run: empirical coverage and log-volume statistics."""

    num_steps: int
    coverage: float
    log_volume_mean: float
    log_volume_std: float
    per_dim_radius: float | None = None


def coverage_and_volume(
    memberships, log_volumes, num_nodes: int | None = None
) -> CoverageVolumeSummary:
    """Empirical coverage plus mean/std of log-volumes.

    With ``num_nodes`` given, also reports the geometric-mean per-dimension
    radius implied by the mean log-volume.
    """
    memberships = list(memberships)
    log_volumes = list(log_volumes)
    if len(memberships) != len(log_volumes) or not memberships:
        raise InputError("memberships and log_volumes must be equal-length, nonempty")
    coverage = float(np.mean([1.0 if m else 0.0 for m in memberships]))
    lv = np.asarray(log_volumes, dtype=float)
    per_dim = None
    if num_nodes is not None and np.all(np.isfinite(lv)):
        per_dim = math.exp(
            (float(lv.mean()) - unit_ball_log_volume(num_nodes)) / num_nodes
        )
    return CoverageVolumeSummary(
        num_steps=len(memberships),
        coverage=coverage,
        log_volume_mean=float(lv.mean()),
        log_volume_std=float(lv.std(ddof=0)),
        per_dim_radius=per_dim,
    )


@dataclass(frozen=True)
class HorizonStats:
    """Per-mode, per-horizon aggregation across runs."""

    num_steps: int
    coverage_runs: list[float]
    coverage_mean: float
    coverage_std: float
    log_volume_runs: list[float]
    log_volume_mean: float
    log_volume_std: float
    per_dim_radius: float
    ridge_gamma_mean: float


@dataclass(frozen=True)
class RatioStats:
    """Volume shrinkage aware/agnostic, per run and averaged in log space."""

    runs: list[float]
    mean: float


@dataclass(frozen=True)
class EvaluationReport:
    config: ExperimentConfig
    dataset_name: str
    num_nodes: int
    num_steps: int
    n_train: int
    modes: dict
    volume_ratio: dict
    runtime_seconds: float

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "dataset": {
                "name": self.dataset_name,
                "num_nodes": self.num_nodes,
                "num_steps": self.num_steps,
                "n_train": self.n_train,
            },
            "modes": {
                mode: {str(h): asdict(stats) for h, stats in horizons.items()}
                for mode, horizons in self.modes.items()
            },
            "volume_ratio": {
                str(h): asdict(r) for h, r in self.volume_ratio.items()
            },
            "runtime_seconds": self.runtime_seconds,
        }


@dataclass(frozen=True)
class GridResult:
    config: ExperimentConfig
    report: EvaluationReport | None
    error: str | None


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class _Pipeline:
    """Rolling state of one (mode, horizon) stream within a run."""

    def __init__(
        self,
        raw_residuals: ResidualBuffer,
        mode: str,
        filt: GraphFilter | None,
        cfg: ExperimentConfig,
        qrf_seed: int,
    ):
        self.mode = mode
        self.filter = filt if mode == GRAPH_AWARE else None
        self.cfg = cfg
        self.raw = raw_residuals.copy()
        self.pending: deque = deque()
        self.memberships: list[bool] = []
        self.log_volumes: list[float] = []
        self.gammas: list[float] = []
        self.model = self._fit_model()
        # Training scores are leave-one-out so they are exchangeable with
        # the out-of-sample scores realized during the test span.
        self.scores = ScoreSeries(
            loo_scores(self.model, self._working_buffer()), window=cfg.window
        )
        self.quantile = self._fit_quantile(qrf_seed)

    def _working_buffer(self) -> ResidualBuffer:
        if self.filter is not None:
            return filter_residuals(self.raw, self.filter)
        return self.raw

    def _fit_model(self):
        model = fit_model(self._working_buffer(), self.mode)
        self.gammas.append(model.regularization)
        return model

    def _fit_quantile(self, seed: int):
        if (
            self.cfg.quantile_kind == FOREST
            and len(self.scores) >= self.cfg.window + 1
        ):
            forest_cfg = replace(self.cfg.forest, seed=seed)
            return fit_forest(make_windows(self.scores), self.cfg.alpha, forest_cfg)
        return fit_empirical(self.scores, self.cfg.alpha)

    def release_until(self, t: int) -> None:
        while self.pending and self.pending[0][0] <= t:
            _, raw_residual, realized_score = self.pending.popleft()
            self.raw.append(raw_residual)
            self.scores.append(realized_score)

    def refit(self, qrf_seed: int) -> None:
        self.model = self._fit_model()
        self.quantile = self._fit_quantile(qrf_seed)

    def predict_radius(self) -> float:
        window = None
        if self.quantile.kind == FOREST:
            window = self.scores.tail_window()
        return predict_quantile(self.quantile, window)

    def observe(self, anchor: int, horizon: int, prediction, target) -> dict:
        radius_sq = self.predict_radius()
        region = build_region(prediction, self.model, radius_sq)
        member = contains(region, target, self.filter)
        stats = log_volume(region)
        self.memberships.append(member)
        self.log_volumes.append(stats.log_volume)
        raw_residual = target - prediction
        e = (
            self.filter.operator @ raw_residual
            if self.filter is not None
            else raw_residual
        )
        self.pending.append((anchor + horizon, raw_residual, score(self.model, e)))
        return {
            "t": anchor,
            "horizon": horizon,
            "mode": self.mode,
            "center": region.center.tolist(),
            "radius_sq": region.radius_sq,
            "log_volume": stats.log_volume,
            "shape_log_det": region.shape_log_det,
            "contained": member,
        }


def _zscored(signals: np.ndarray, n_train: int) -> np.ndarray:
    mu = signals[:n_train].mean(axis=0)
    sd = signals[:n_train].std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (signals - mu) / sd


def _validate_experiment(ds: GraphTimeSeriesDataset, cfg: ExperimentConfig) -> int:
    cfg.validate()
    n_train = int(np.floor(ds.num_steps * cfg.train_fraction))
    p = cfg.predictor.lags if cfg.predictor.kind != EXTERNAL else 1
    if n_train < cfg.window + 2:
        raise InputError(
            f"train span {n_train} too short: need at least window + 2 = "
            f"{cfg.window + 2} training timesteps"
        )
    if n_train <= p + cfg.horizon:
        raise InputError(
            f"train span {n_train} too short for lags {p} and horizon "
            f"{cfg.horizon}"
        )
    if ds.num_steps - n_train < cfg.horizon:
        raise InputError(
            f"test span {ds.num_steps - n_train} shorter than horizon "
            f"{cfg.horizon}"
        )
    return n_train


def _external_train_residuals(
    trace: PredictionTrace, signals: np.ndarray, n_train: int, horizon: int
) -> ResidualBuffer:
    buf = ResidualBuffer()
    for t in trace.timestamps:
        t = int(t)
        if t + horizon <= n_train - 1:
            buf.append(signals[t + horizon] - trace.lookup(t)[horizon - 1])
    if len(buf) < 2:
        raise IngestionError(
            f"prediction trace covers {len(buf)} training steps at horizon "
            f"{horizon}; need at least 2"
        )
    return buf


def run_experiment(
    ds: GraphTimeSeriesDataset,
    cfg: ExperimentConfig,
    external_trace: PredictionTrace | None = None,
    region_sink=None,
) -> EvaluationReport:
    """Run the sequential evaluation and aggregate it across seeded runs.

    ``external_trace`` supplies point predictions when the configured
    predictor kind is "external".  ``region_sink``, if given, receives one
    record per constructed region (used for region dumps and audits).
    """
    started = time.perf_counter()
    n_train = _validate_experiment(ds, cfg)
    if cfg.predictor.kind == EXTERNAL and external_trace is None:
        raise InputError("external predictor requires a prediction trace")
    split_result = split(
        ds,
        SplitConfig(train_fraction=cfg.train_fraction, min_train=cfg.window + 2),
    )
    assert split_result.n_train == n_train
    signals = ds.signals
    if cfg.zscore:
        signals = _zscored(signals, n_train)
    train_signals = signals[:n_train]
    t_total = signals.shape[0]
    r = cfg.horizon
    filt = build_filter(ds.topology, cfg.tau)
    anchors = np.arange(n_train - 1, t_total - 1)

    if external_trace is not None and cfg.predictor.kind == EXTERNAL:
        if external_trace.horizon < r:
            raise IngestionError(
                f"prediction trace has horizon {external_trace.horizon}, "
                f"config needs {r}"
            )
        if external_trace.num_nodes != ds.num_nodes:
            raise IngestionError(
                f"trace has {external_trace.num_nodes} nodes, dataset has "
                f"{ds.num_nodes}"
            )

    per_run: dict[tuple[str, int], list[CoverageVolumeSummary]] = {}
    gamma_means: dict[tuple[str, int], list[float]] = {}

    for run_idx in range(cfg.num_runs):
        if cfg.predictor.kind == EXTERNAL:
            ensemble = None
            train_residuals = {
                j: _external_train_residuals(external_trace, signals, n_train, j)
                for j in range(1, r + 1)
            }
            test_paths = np.stack(
                [external_trace.lookup(int(t))[:r] for t in anchors], axis=0
            )
        else:
            ens_seed = _derived_seed(cfg.seed, run_idx, 1000003)
            ensemble = fit_ensemble(
                train_signals,
                ds.topology,
                cfg.predictor,
                num_models=cfg.num_bootstrap,
                seed=ens_seed,
            )
            train_residuals = {
                j: ensemble_train_residuals(ensemble, train_signals, horizon=j)
                for j in range(1, r + 1)
            }
            test_paths = ensemble_predict_paths(ensemble, signals, anchors, r)

        for mode in cfg.modes:
            pipelines = {
                j: _Pipeline(
                    train_residuals[j],
                    mode,
                    filt,
                    cfg,
                    qrf_seed=_derived_seed(cfg.seed, run_idx, j, 0),
                )
                for j in range(1, r + 1)
            }
            for i, t in enumerate(anchors):
                t = int(t)
                for j in range(1, r + 1):
                    if t + j > t_total - 1:
                        continue
                    pipe = pipelines[j]
                    pipe.release_until(t)
                    if i > 0 and i % cfg.refit_interval == 0:
                        pipe.refit(_derived_seed(cfg.seed, run_idx, j, i))
                    record = pipe.observe(
                        t, j, test_paths[i, j - 1], signals[t + j]
                    )
                    if region_sink is not None:
                        record["run"] = run_idx
                        region_sink(record)
            for j, pipe in pipelines.items():
                summary = coverage_and_volume(
                    pipe.memberships, pipe.log_volumes, num_nodes=ds.num_nodes
                )
                per_run.setdefault((mode, j), []).append(summary)
                gamma_means.setdefault((mode, j), []).append(
                    float(np.mean(pipe.gammas))
                )

    modes_out: dict[str, dict[int, HorizonStats]] = {}
    for (mode, j), summaries in per_run.items():
        cov = np.array([s.coverage for s in summaries])
        lvm = np.array([s.log_volume_mean for s in summaries])
        stats = HorizonStats(
            num_steps=summaries[0].num_steps,
            coverage_runs=cov.tolist(),
            coverage_mean=float(cov.mean()),
            coverage_std=float(cov.std(ddof=1)) if len(cov) > 1 else 0.0,
            log_volume_runs=lvm.tolist(),
            log_volume_mean=float(lvm.mean()),
            log_volume_std=float(lvm.std(ddof=1)) if len(lvm) > 1 else 0.0,
            per_dim_radius=math.exp(
                (float(lvm.mean()) - unit_ball_log_volume(ds.num_nodes))
                / ds.num_nodes
            ),
            ridge_gamma_mean=float(np.mean(gamma_means[(mode, j)])),
        )
        modes_out.setdefault(mode, {})[j] = stats

    ratio: dict[int, RatioStats] = {}
    if GRAPH_AWARE in modes_out and GRAPH_AGNOSTIC in modes_out:
        for j in modes_out[GRAPH_AWARE]:
            aware = np.array(modes_out[GRAPH_AWARE][j].log_volume_runs)
            agnostic = np.array(modes_out[GRAPH_AGNOSTIC][j].log_volume_runs)
            diffs = aware - agnostic
            ratio[j] = RatioStats(
                runs=[math.exp(d) for d in diffs],
                mean=math.exp(float(diffs.mean())),
            )

    return EvaluationReport(
        config=cfg,
        dataset_name=ds.name,
        num_nodes=ds.num_nodes,
        num_steps=ds.num_steps,
        n_train=n_train,
        modes=modes_out,
        volume_ratio=ratio,
        runtime_seconds=time.perf_counter() - started,
    )


def run_grid(
    ds: GraphTimeSeriesDataset,
    configs: list[ExperimentConfig],
    external_trace: PredictionTrace | None = None,
) -> list[GridResult]:
    """Run each config independently; failures are isolated per config.

    Configs are independent and could run in parallel; this implementation
    is sequential and preserves input order in the output.
    """
    if not configs:
        raise InputError("grid requires at least one config")
    results = []
    for cfg in configs:
        try:
            report = run_experiment(ds, cfg, external_trace=external_trace)
            results.append(GridResult(config=cfg, report=report, error=None))
        except Exception as exc:  # noqa: BLE001 - isolate per-config failures
            results.append(GridResult(config=cfg, report=None, error=str(exc)))
    return results


CSV_COLUMNS = [
    "dataset",
    "alpha",
    "window",
    "tau",
    "horizon",
    "mode",
    "num_runs",
    "seed",
    "coverage_mean",
    "coverage_std",
    "log_volume_mean",
    "log_volume_std",
    "per_dim_radius",
    "ridge_gamma_mean",
    "volume_ratio_mean",
    "runtime_seconds",
]


def report_rows(report: EvaluationReport) -> list[dict]:
    """Flatten a report to one CSV row per mode x horizon."""
    rows = []
    for mode, horizons in report.modes.items():
        for j, stats in horizons.items():
            ratio = report.volume_ratio.get(j)
            rows.append(
                {
                    "dataset": report.dataset_name,
                    "alpha": report.config.alpha,
                    "window": report.config.window,
                    "tau": report.config.tau,
                    "horizon": j,
                    "mode": mode,
                    "num_runs": report.config.num_runs,
                    "seed": report.config.seed,
                    "coverage_mean": stats.coverage_mean,
                    "coverage_std": stats.coverage_std,
                    "log_volume_mean": stats.log_volume_mean,
                    "log_volume_std": stats.log_volume_std,
                    "per_dim_radius": stats.per_dim_radius,
                    "ridge_gamma_mean": stats.ridge_gamma_mean,
                    "volume_ratio_mean": (
                        ratio.mean if ratio is not None and mode == GRAPH_AWARE else ""
                    ),
                    "runtime_seconds": round(report.runtime_seconds, 3),
                }
            )
    return rows
