"""Robust empirical Bayes small-area estimation under the Fay-Herriot model.

The robust predictor replaces the Bayes shrinkage ``D/(A+D) (y - x'beta)``
by the same quantity multiplied by a density-power weight ``s_i`` that decays
for outlying areas, with parameters estimated by minimising a density power
divergence. ``alpha = 0`` recovers classical maximum likelihood and EB.
"""
from .fitting import (
    AsymptoticBlocks,
    FitConfig,
    FitResult,
    NonConvergenceError,
    asymptotic_blocks,
    bias_bA_bootstrap,
    estimating_equations,
    fit_dpd,
    fit_many,
    fit_ml,
)
from .model import (
    AreaObservation,
    Dataset,
    ModelParams,
    log_marginal_likelihood,
    moment_u2j_sk,
    robust_likelihood,
    s_weight,
    s_weights,
    v_factor,
)
from .mse import (
    MseComponents,
    MseReport,
    c_jk,
    classical_mse,
    excess_mse,
    g1,
    g2,
    g3_g4,
    g5,
    g5_bootstrap,
    mse_bootstrap,
    mse_components,
    mse_naive,
    mse_plugin,
    select_alpha,
)
from .predictors import (
    HUBER_K,
    Prediction,
    bayes_estimate,
    geb_estimate,
    huber_psi,
    predict,
    robust_bayes_estimate,
    sreb_estimate,
)
from .simulation import Scenario, SimReport, generate_scenario, run_mse_estimator_study, run_prediction_study

__version__ = "0.1.0"
