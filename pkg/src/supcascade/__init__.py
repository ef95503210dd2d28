"""Supervised local/remote inference cascades replayed over prediction traces."""

from .calibration import (
    CalibrationError,
    CalibrationResult,
    calibrate_second_level,
    nominal_quantile_threshold,
    separation_threshold,
    threshold_for_fpr,
    threshold_for_remote_fraction,
)
from .cascade import (
    CascadeOutcome,
    Decision,
    LatencyCostDefaults,
    Thresholds,
    TraceReplayPredictor,
    decide,
    remote_fraction,
    run_cascade,
    run_local_only,
)
from .metrics import (
    CostModel,
    LatencyModel,
    RacCurve,
    RacSummary,
    SupervisedReport,
    acceptance_rate,
    auc_rac,
    break_even_fraction,
    cost_report,
    false_positive_rate,
    mean_latency,
    rac_curve,
    rac_curve_for,
    rac_summary,
    random_auc_baseline,
    s_beta,
    supervised_accuracy,
    supervised_report,
    system_accuracy_at,
)
from .quantifiers import (
    MdsaModel,
    TokenEquivalence,
    aggregate_equivalent_tokens,
    fit_mdsa,
    make_quantifier,
    max_softmax,
    mdsa_score,
    negative_entropy,
    negative_gini,
    prediction_confidence_score,
    sequence_confidence_min,
    sequence_confidence_product,
)
from .trace import (
    ModelObservation,
    PredictionTarget,
    TraceDataset,
    TraceError,
    TraceRecord,
    exact_match,
    load_trace,
    resolve_correctness,
    save_trace,
    synthesize_trace,
)

__version__ = "0.1.0"
