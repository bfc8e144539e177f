"""Sequential graph-aware ellipsoidal prediction regions for graph time series.

Wraps any point forecaster for signals on a static graph with conformal
prediction regions: residuals are diffused along the edges, scored by
their Mahalanobis distance, and a windowed quantile regressor sets the
ellipsoid radius at each step.  Exploiting residual homophily this way
provably shrinks the region volume relative to the graph-agnostic
construction, at the same target coverage.
"""

from graphcp.base_models import (
    BootstrapEnsemble,
    PredictionTrace,
    PredictorSpec,
    ensemble_predict_paths,
    ensemble_train_residuals,
    fit_ensemble,
    fit_graph_ar,
    load_external_predictions,
    predict,
    save_predictions,
)
from graphcp.data_io import (
    GraphTimeSeriesDataset,
    SplitConfig,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split,
)
from graphcp.exceptions import (
    FactorizationError,
    FilterSingularError,
    GraphCPError,
    IngestionError,
    InputError,
    InsufficientDataError,
)
from graphcp.graph_core import (
    GraphFilter,
    GraphTopology,
    SpectralSummary,
    apply_filter,
    build_filter,
    build_topology,
    normalized_adjacency,
    shrinkage_bound_check,
    spectral_summary,
)
from graphcp.harness import (
    EvaluationReport,
    ExperimentConfig,
    coverage_and_volume,
    run_experiment,
    run_grid,
)
from graphcp.quantile import (
    ForestConfig,
    QuantilePredictor,
    ScoreSeries,
    WindowedPairs,
    conformal_quantile,
    fit_empirical,
    fit_forest,
    make_windows,
    predict_quantile,
)
from graphcp.region import (
    EllipsoidRegion,
    VolumeStats,
    build_region,
    contains,
    log_volume,
    volume_ratio,
)
from graphcp.scoring import (
    FilteredResidualModel,
    ResidualBuffer,
    compute_residuals,
    filter_residuals,
    fit_model,
    homophily_gap,
    score,
)

__version__ = "0.1.0"
