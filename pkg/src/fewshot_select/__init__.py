"""Few-shot model selection from a handful of labelled examples.

Criteria (cross-validation, online-coding MDL and their variants) are computed
from per-candidate score tables; the harness measures how often each
selection rule actually picks a good candidate.
"""

from .criteria import (
    CRITERIA,
    CriterionEstimate,
    bayes_posterior_weights,
    compute_bayes_cv,
    compute_criterion,
    compute_cv,
    compute_mdl,
    compute_mdl_beta,
    mdl_beta_weights,
)
from .errors import (
    BackendError,
    BudgetExhausted,
    ConfigError,
    ContextLengthError,
    DatasetError,
    DigestMismatchError,
    FewShotError,
    IncompleteTableError,
    MissingRecordingError,
    RenderError,
    TransportError,
)
from .harness import (
    AccuracyEstimate,
    Protocol,
    ReliabilityReport,
    RunRecord,
    StudyTemplate,
    Task,
    aggregate_runs,
    estimate_test_accuracy,
    run_once,
    run_study,
    sweep,
)
from .plans import FoldPlan, PermutationPlan, make_folds, plan_permutations
from .reports import best_selection_rate, gain_cdf, gain_statistics, mean_stderr, transfer_matrix
from .selection import SelectionReport, select_argmin, select_conservative
from .table import ScoreTable, build_score_table, load_table, save_table, subsample_table
from .task import (
    Dataset,
    Example,
    LabelSpace,
    PromptCandidate,
    RenderedSequence,
    TrainSet,
    enumerate_grid,
    load_candidates,
    load_dataset,
    render_sequence,
    sample_train_set,
)

__version__ = "0.1.0"

__all__ = [
    "CRITERIA",
    "CriterionEstimate",
    "bayes_posterior_weights",
    "compute_bayes_cv",
    "compute_criterion",
    "compute_cv",
    "compute_mdl",
    "compute_mdl_beta",
    "mdl_beta_weights",
    "BackendError",
    "BudgetExhausted",
    "ConfigError",
    "ContextLengthError",
    "DatasetError",
    "DigestMismatchError",
    "FewShotError",
    "IncompleteTableError",
    "MissingRecordingError",
    "RenderError",
    "TransportError",
    "AccuracyEstimate",
    "Protocol",
    "ReliabilityReport",
    "RunRecord",
    "StudyTemplate",
    "Task",
    "aggregate_runs",
    "estimate_test_accuracy",
    "run_once",
    "run_study",
    "sweep",
    "FoldPlan",
    "PermutationPlan",
    "make_folds",
    "plan_permutations",
    "best_selection_rate",
    "gain_cdf",
    "gain_statistics",
    "mean_stderr",
    "transfer_matrix",
    "SelectionReport",
    "select_argmin",
    "select_conservative",
    "ScoreTable",
    "build_score_table",
    "load_table",
    "save_table",
    "subsample_table",
    "Dataset",
    "Example",
    "LabelSpace",
    "PromptCandidate",
    "RenderedSequence",
    "TrainSet",
    "enumerate_grid",
    "load_candidates",
    "load_dataset",
    "render_sequence",
    "sample_train_set",
    "__version__",
]
