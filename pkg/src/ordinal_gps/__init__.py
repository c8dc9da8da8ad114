"""Pairwise effects of an ordinal exposure via balancing-score subclassification."""

from .balance import (
    BalanceMatrix,
    TauResult,
    balance_audit,
    emit_plot_data,
    kendall_tau_b,
    significant_proportion,
)
from .config import RunConfig, load_config
from .data import Dataset
from .design import (
    EliminationRule,
    PartitionCheck,
    SubclassPartition,
    SupportReport,
    max_feasible_K,
    subclassify,
    subclassify_dataset,
    trim_common_support,
    validate_partition,
)
from .errors import (
    ConfigError,
    ConstantVector,
    EmptyAfterFiltering,
    EmptyCell,
    EmptyLevel,
    EmptySupport,
    InsufficientRows,
    ModelError,
    NonConvergence,
    OrdinalGPSError,
    RankDeficientDesign,
    SchemaMismatch,
    SeparationDetected,
    UnparseableValue,
    ZeroProbability,
)
from .estimation import (
    EffectTable,
    GlobalTest,
    SubclassEffect,
    estimate_iptw,
    estimate_naive,
    estimate_standard_regression,
    estimate_subclass_means,
    estimate_subclass_regression,
    global_test,
)
from .models import (
    MultinomialFit,
    OlsFit,
    OrdinalFit,
    fit_multinomial_logit,
    fit_ols,
    fit_ordered_logit,
    linear_predictor,
    multinomial_negloglik_grad,
    ordered_logit_negloglik_grad,
    predict_category_probs,
)
from .pipeline import RunReport, ingest, run_analysis, run_simulation
from .simulation import (
    FullPotentialData,
    ReplicationResult,
    SimulationSummary,
    StudyConfig,
    impute_set1,
    impute_set2,
    run_study,
    simulate_replication,
)

__version__ = "0.1.0"
