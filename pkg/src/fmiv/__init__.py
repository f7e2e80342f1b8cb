"""Full-matching instrumental-variables estimation.

Pipeline: validate a cohort, fit the instrumental propensity score, build a
rank-based Mahalanobis distance with a soft caliper, compute an optimal full
match, check balance, then estimate and test the effect ratio.
"""

__version__ = "0.1.0"

from .balance import BalanceReport, balance_gate, standardized_differences
from .data import Cohort, FullMatch, Stratum, Subject, validate_cohort, validate_full_match
from .distance import DistanceMatrix, apply_caliper, rank_mahalanobis
from .exceptions import (
    DegenerateVarianceError,
    FmivError,
    InfeasibleMatchError,
    ValidationError,
    WeakInstrumentError,
)
from .fullmatch import MatchConstraints, MatchResult, match_cohort, optimal_full_match, strata_histogram
from .inference import (
    EffectRatioInference,
    PotentialOutcomeTable,
    confidence_interval,
    effect_ratio_estimate,
    effect_ratio_oracle,
    first_stage_test,
    infer,
    p_value,
    test_statistic,
)
from .propensity import PropensityModel, expand_design, fit_propensity
from .sensitivity import Amplification, SensitivityResult, amplify, sensitivity_bounds
from .tsls import TslsFit, fit_tsls

__all__ = [
    "Amplification",
    "BalanceReport",
    "Cohort",
    "DegenerateVarianceError",
    "DistanceMatrix",
    "EffectRatioInference",
    "FmivError",
    "FullMatch",
    "InfeasibleMatchError",
    "MatchConstraints",
    "MatchResult",
    "PotentialOutcomeTable",
    "PropensityModel",
    "SensitivityResult",
    "Stratum",
    "Subject",
    "TslsFit",
    "ValidationError",
    "WeakInstrumentError",
    "amplify",
    "apply_caliper",
    "balance_gate",
    "confidence_interval",
    "effect_ratio_estimate",
    "effect_ratio_oracle",
    "expand_design",
    "first_stage_test",
    "fit_propensity",
    "fit_tsls",
    "infer",
    "match_cohort",
    "optimal_full_match",
    "p_value",
    "rank_mahalanobis",
    "sensitivity_bounds",
    "standardized_differences",
    "strata_histogram",
    "test_statistic",
    "validate_cohort",
    "validate_full_match",
]
