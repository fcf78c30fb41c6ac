"""Weighted (retargeted) policy learning and covariate-shift policy
evaluation: variance- and curvature-optimal retargeting weights, threshold
policy learning with cross-fitting, efficient value estimators under
covariate shift, L^k-ball distributional robustness, and a desk-scale
simulation harness."""

from .model import (
    DiscretizedDistribution,
    LabeledDataset,
    NuisanceSet,
    Policy,
    ThresholdPolicy,
    WeightFn,
    dataset_from_csv,
    dataset_to_csv,
    derive_M,
    empirical_distribution,
    normalize_weight,
    uniform_weight,
)
from .retarget import (
    curvature_vpp_threshold,
    omega,
    optimal_reference,
    regret_bound_esssup,
    regret_ratio_firstorder,
    weight_global_curvature,
    weight_l1,
    weight_local_curvature,
    weight_retargeting,
)
from .estimators import (
    ValueEstimate,
    centered_value_plugin,
    evaluate_value,
    fit_boosted_stumps,
    fit_density_ratio,
    fit_sieve,
    value_aipw,
    value_eff,
    value_ipw,
    value_onlyx,
)
from .dro import (
    UncertaintySet,
    dro_learn_threshold,
    lk_norm,
    minimal_c,
    select_c_calibrated,
    select_c_multisite,
    worst_case_mean,
)
from .policylearn import (
    CrossfitPlan,
    crossfit_learn,
    learn_threshold,
    regret_eval,
    weighted_value_estimate,
)
from .harness import ScenarioSpec, generate, run_table1, run_table2

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
