"""Matching-based evaluation and test-time matching for grouped similarity data."""

from .assignment import (
    ENUMERATION_CAP,
    EnumerationCapError,
    best_two_matchings,
    enumerate_matchings,
    hungarian_max,
    matching_total,
)
from .core import (
    EmbeddingTable,
    FlatDataset,
    Group,
    GroupedDataset,
    GroupShape,
    ValidationError,
    compose_matchings,
    identity_matching,
    invert_matching,
    validate_dataset,
)
from .metrics import (
    canonical_matrix,
    closed_form_random_group_match,
    closed_form_random_group_score,
    dataset_metrics,
    group_match,
    group_score,
    individual_match_score,
    margin,
    text_score,
)
from .scorer import (
    AdapterParams,
    DegenerateEmbeddingError,
    DivergenceError,
    OptimizerState,
    TrainConfig,
    finetune,
    pseudo_label_loss,
    score_group,
    score_pair,
)
from .synth import SynthConfig, calibrate_noise, flatten, generate
from .ttm import (
    CapacityError,
    IterationStats,
    RunReport,
    ThresholdSchedule,
    TtmConfig,
    calibrate_tau,
    global_matching,
    induce_matching,
    run_global_ttm,
    run_simple_match,
    run_ttm,
    schedule_value,
    select_pseudolabels,
)
from .validate import check_propositions, monte_carlo_metric

__version__ = "0.1.0"
