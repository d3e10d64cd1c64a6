"""Random-effects network meta-analysis with closed-form confidence intervals,
analytic small-sample (Bartlett-type) adjustment, and parametric-bootstrap
calibration, plus a Monte-Carlo coverage harness."""

from .model import (
    CovarianceStructure,
    MarginalModel,
    ModelError,
    NullSpec,
    StructureKind,
    Study,
    assemble,
    sigma,
    study_from_arms,
    within_cov_from_arms,
)
from .likelihood import (
    LikelihoodKind,
    ProfileObjective,
    gls_mu_hat,
    h_squared,
    mu_tilde,
    objective,
    objective_gradient,
)
from .estimation import FitConfig, FitResult, FitError, delta, fit
from .intervals import (
    Adjustment,
    ConfidenceInterval,
    DegenerateIntervalError,
    StatisticKind,
    critical_z,
    lr_statistic,
    naive_ci,
    score_statistic,
    wald_statistic,
)
from .bartlett import (
    AdjustmentFactors,
    BiasTerms,
    OracleBiasTerms,
    adjusted_ci,
    adjustment_factors,
    bias_terms,
    mc_bias_oracle,
)
from .bootstrap import (
    BootstrapConfig,
    BootstrapError,
    BootstrapQuantiles,
    bootstrap_adjusted_ci,
    bootstrap_quantiles,
    quantile_index,
)
from .simulation import (
    CoverageReport,
    CoverageRow,
    MethodSpec,
    ScenarioSpec,
    coverage_study,
    generate_dataset,
    simulation_one,
    simulation_two,
)

__version__ = "0.1.0"
