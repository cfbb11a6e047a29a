"""Two-stage adaptive multiple contrast tests for dose-response
proof-of-concept studies.

The package provides the full pipeline: dose-response model catalog
and fitting (:mod:`adaptmct.models`), optimal contrasts
(:mod:`adaptmct.contrasts`), multivariate normal/t kernels
(:mod:`adaptmct.mvprob`), stage-wise generalized multiple contrast
tests with p-value combination (:mod:`adaptmct.gmct`), interim
adaptation rules (:mod:`adaptmct.adapt`), the adaptive multiple
contrast test under the conditional rejection probability principle
(:mod:`adaptmct.amct`), and a reproducible simulation harness
(:mod:`adaptmct.simulate`).
"""

from .models import (
    ConvergenceFailure,
    DegenerateDesign,
    DoseResponseModel,
    ModelFamily,
    StageSummary,
    UnderdeterminedFit,
    default_candidates,
    evaluate,
    fit,
    isotonic_means,
    true_model,
)
from .contrasts import (
    ContrastSet,
    DegenerateContrast,
    build_contrast_set,
    contrasts_for_models,
    correlation_matrix,
    optimal_contrast,
)
from .mvprob import (
    EquiProbQuery,
    NumericalDomainError,
    conditional_t_orthant,
    gaussian_box_prob,
    mv_cdf_upper_tail,
    mv_equicoordinate_quantile,
    t_box_prob,
)
from .gmct import (
    CombinationMethod,
    DegenerateVariance,
    GmctResult,
    combine_across,
    contrast_t_stats,
    contrast_z_stats,
    run_gmct_stage,
    stage_p_value,
)
from .adapt import (
    AdaptationConfig,
    AdaptationOutcome,
    ModelPolicy,
    Provenance,
    adapt_doses,
    adapt_models,
    run_interim,
    stage2_group_sizes,
)
from .amct import (
    AmctResult,
    BaseTestSpec,
    CrpState,
    amct_known_variance,
    amct_unknown_variance,
)

__version__ = "0.1.0"
