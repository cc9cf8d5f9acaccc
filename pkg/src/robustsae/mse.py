"""Mean squared error of the robust empirical Bayes predictor.

The exact MSE of the robust Bayes rule at known parameters is ``g1 + g2``.
Estimating the parameters adds ``(g3 + g4 + 2 g5) / m`` to second order, where
``g3`` and ``g4`` come from the variability of ``beta_hat`` and ``A_hat`` and
``g5`` is the cross term between the robustness excess and the estimation
error. All second-order terms are written through the weighted Gaussian moments
``C_jk = E[u^{2j} s^k (1 - s)]``.

Three estimators are provided: the naive plug-in ``g1 + g2``, the plug-in of
the second-order formula, and a parametric-bootstrap bias-corrected version.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize

from .fitting import (
    AsymptoticBlocks,
    FitResult,
    _check_failures,
    asymptotic_blocks,
    bootstrap_refits,
    fit_ml,
)
from .model import Dataset, ModelParams, _weights, check_alpha, double_factorial, moment_u2j_sk

logger = logging.getLogger(__name__)

__all__ = [
    "MseComponents",
    "MseReport",
    "AlphaSelection",
    "g1",
    "g2",
    "c_jk",
    "g3_g4",
    "g5",
    "g5_bootstrap",
    "mse_components",
    "mse_naive",
    "mse_plugin",
    "classical_mse",
    "mse_bootstrap",
    "excess_mse",
    "select_alpha",
    "solve_alpha",
    "ALPHA_CEILING",
]

ALPHA_CEILING = 1.0 - 1e-6


def g1(a, d):
    """MSE of the Bayes rule, ``A D / (A + D)``."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    out = a * d / (a + d)
    return float(out) if out.ndim == 0 else out


def g2(a, d, alpha):
    """Excess MSE of the robust rule over the Bayes rule at known parameters.

    ``D^2/(A+D) {V^{2a}/(2a+1)^{3/2} - 2 V^a/(a+1)^{3/2} + 1}``; zero at
    ``alpha = 0`` and non-decreasing in ``alpha``.
    """
    alpha = check_alpha(alpha)
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    b = a + d
    va = np.exp(-0.5 * alpha * np.log(2.0 * np.pi * b))
    bracket = va * va / (2.0 * alpha + 1.0) ** 1.5 - 2.0 * va / (alpha + 1.0) ** 1.5 + 1.0
    out = d * d / b * bracket
    return float(out) if out.ndim == 0 else out


def c_jk(j: int, k: int, a, d, alpha):
    """``E[u^{2j} s^k] - E[u^{2j} s^{k+1}]`` in closed form."""
    alpha = check_alpha(alpha)
    b = np.asarray(a, dtype=float) + np.asarray(d, dtype=float)
    lv = -0.5 * alpha * np.log(2.0 * np.pi * b)
    ka, k1a = k * alpha, (k + 1) * alpha
    out = double_factorial(2 * j - 1) * b**j * (
        np.exp(k * lv) * (ka + 1.0) ** (-j - 0.5) - np.exp((k + 1) * lv) * (k1a + 1.0) ** (-j - 0.5)
    )
    return float(out) if out.ndim == 0 else out


def _quad_forms(data, blocks):
    jinv = np.linalg.inv(blocks.j_beta)
    q_sand = np.einsum("ij,jk,ik->i", data.x, blocks.sandwich_beta, data.x)
    q_jinv = np.einsum("ij,jk,ik->i", data.x, jinv, data.x)
    return q_sand, q_jinv


def g3_g4(data: Dataset, params: ModelParams, alpha, blocks: Optional[AsymptoticBlocks] = None, display: bool = False):
    """Contributions of ``beta_hat`` and ``A_hat`` variability, per area.

    Both are ``m`` times the respective second-order MSE terms. ``display=True``
    gives the commonly quoted moment factors, ``(2a+1)^{-3/2}`` for ``g3`` and
    ``(a^4 - a^2/2 + 1)`` for ``g4``; the defaults below are the quadrature-checked
    values ``(3a^2+2a+1)/(2a+1)^{5/2}`` and ``a^4 + 2a^3 + 9a^2/2 + 2a + 1``.
    Both versions agree at ``alpha = 0``.
    """
    alpha = check_alpha(alpha)
    if blocks is None:
        blocks = asymptotic_blocks(data, params, alpha, display=display)
    d = data.d
    b = params.a + d
    v2a = np.exp(-alpha * np.log(2.0 * np.pi * b))
    q_sand, _ = _quad_forms(data, blocks)
    if display:
        f3 = (2.0 * alpha + 1.0) ** -1.5
        f4 = alpha**4 - 0.5 * alpha**2 + 1.0
    else:
        f3 = (3.0 * alpha**2 + 2.0 * alpha + 1.0) / (2.0 * alpha + 1.0) ** 2.5
        f4 = alpha**4 + 2.0 * alpha**3 + 4.5 * alpha**2 + 2.0 * alpha + 1.0
    g3 = d * d * v2a / (b * b) * f3 * q_sand
    g4 = d * d * v2a / b**3 * blocks.sandwich_a / (2.0 * alpha + 1.0) ** 3.5 * f4
    return g3, g4


def g5(
    data: Dataset,
    params: ModelParams,
    alpha,
    blocks: Optional[AsymptoticBlocks] = None,
    b_a: float = 0.0,
    display: bool = False,
):
    """Cross term ``m E[(theta_R - theta_B)(theta_R_hat - theta_R)]``, per area.

    ``b_a`` is the first-order bias ``m E[A_hat - A]``. ``display=True`` uses the
    commonly quoted five-term expression; that expression is not
    dimensionally homogeneous in two of its terms and is kept only for
    comparison.
    """
    alpha = check_alpha(alpha)
    if blocks is None:
        blocks = asymptotic_blocks(data, params, alpha, display=display)
    d = data.d
    a = params.a
    b = a + d
    va = np.exp(-0.5 * alpha * np.log(2.0 * np.pi * b))
    c11, c21, c31 = (c_jk(j, 1, a, d, alpha) for j in (1, 2, 3))
    c12, c22, c32 = (c_jk(j, 2, a, d, alpha) for j in (1, 2, 3))
    q_sand, q_jinv = _quad_forms(data, blocks)
    ja, sand_a = blocks.j_a, blocks.sandwich_a
    d2 = d * d
    infl = alpha * va / ((alpha + 1.0) ** 1.5 * b * ja)
    if display:
        return (
            alpha * d2 * q_sand / (2 * b**4) * (3 * b * c11 - alpha * c21)
            + d2 * sand_a / (24 * b**6) * (3 * alpha * b * b * c21 + (alpha - 2) * (3 * alpha + 8) * c11)
            + d2 * q_jinv / b**4 * (b * c12 - alpha * c22)
            + d2 / (2 * b**6 * ja) * (alpha * c32 - 2 * b * c22 + (2 - alpha) * b * b * c12)
            + d2 / (2 * b**4) * (b_a - infl) * ((2 - alpha) * b * c11 - alpha * c21)
        )
    return (
        alpha * d2 * q_sand / (2 * b**4) * (3 * b * c11 - alpha * c21)
        - d2 * sand_a / (8 * b**6)
        * (alpha**2 * c31 - 2 * alpha * (alpha + 4) * b * c21 + (alpha + 2) * (alpha + 4) * b * b * c11)
        + d2 * q_jinv / b**4 * (b * c12 - alpha * c22)
        - d2 / (2 * b**6 * ja) * (alpha * c32 - 2 * (1 + alpha) * b * c22 + (2 + alpha) * b * b * c12)
        + d2 / (2 * b**4) * (b_a + infl) * ((2 + alpha) * b * c11 - alpha * c21)
    )


@dataclass(frozen=True)
class MseComponents:
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray
    g5: np.ndarray


def mse_components(data: Dataset, params: ModelParams, alpha, b_a: float = 0.0, display: bool = False) -> MseComponents:
    alpha = check_alpha(alpha)
    blocks = asymptotic_blocks(data, params, alpha, display=display)
    t3, t4 = g3_g4(data, params, alpha, blocks, display=display)
    t5 = g5(data, params, alpha, blocks, b_a, display=display)
    return MseComponents(g1(params.a, data.d), g2(params.a, data.d, alpha), t3, t4, t5)


def mse_naive(comp: MseComponents) -> np.ndarray:
    return comp.g1 + comp.g2


def mse_plugin(comp: MseComponents, m: int) -> np.ndarray:
    return comp.g1 + comp.g2 + (comp.g3 + comp.g4 + 2.0 * comp.g5) / m


def classical_mse(data: Dataset, params: ModelParams) -> np.ndarray:
    """Second-order MSE of the ML-based empirical Bayes predictor.

    ``g1 + D^2/B^2 x'(sum x x'/B)^{-1} x + 2 D^2/B^3 (sum B^{-2})^{-1}``, coded
    independently of :func:`mse_plugin` so the two can be compared.
    """
    b = params.a + data.d
    info = (data.x.T / b) @ data.x
    lev = np.einsum("ij,ij->i", data.x, np.linalg.solve(info, data.x.T).T)
    return params.a * data.d / b + data.d**2 / b**2 * lev + 2.0 * data.d**2 / b**3 / np.sum(b**-2.0)


def g5_bootstrap(data: Dataset, params: ModelParams, alpha, y_star, beta_star, a_star) -> np.ndarray:
    """Bootstrap version of ``g5``: ``m`` times the bootstrap mean of
    ``(theta_R(y*, phi*) - theta_R(y*, phi)) (theta_R(y*, phi) - theta_B(y*, phi))``.
    """
    alpha = check_alpha(alpha)
    d = data.d
    b_hat = params.a + d
    u_hat = y_star - data.x @ params.beta
    shrink = d / b_hat * u_hat
    rob_hat = y_star - shrink * _weights(u_hat, b_hat, alpha)
    classical = y_star - shrink
    b_st = a_star[:, None] + d
    u_st = y_star - beta_star @ data.x.T
    rob_st = y_star - d / b_st * u_st * _weights(u_st, b_st, alpha)
    return data.m * np.mean((rob_st - rob_hat) * (rob_hat - classical), axis=0)


@dataclass(frozen=True)
class MseReport:
    """Per-area MSE estimates of the robust EB predictor."""

    area_ids: tuple
    naive: np.ndarray
    plugin: np.ndarray
    bootstrap: np.ndarray
    components: MseComponents
    bootstrap_correction: np.ndarray  # E*[g1(A*) + g2(A*)]
    b_a: float
    replicates_used: int
    failures: int
    seed: object
    clamped: np.ndarray


def mse_bootstrap(
    data: Dataset,
    fitted: FitResult,
    alpha=None,
    b: int = 500,
    seed=0,
    g5_method: str = "analytic",
) -> MseReport:
    """Second-order unbiased MSE estimate with a parametric-bootstrap correction.

    ``2 g12(A_hat) - E*[g12(A*)] + (g3 + g4 + 2 g5)/m`` with ``g12 = g1 + g2``.
    ``g5`` uses the bias ``b_A`` estimated from the same bootstrap replicates, or
    with ``g5_method="bootstrap"`` the direct bootstrap cross-moment. Estimates
    below ``1e-3`` times the naive value are clamped there and flagged.
    """
    alpha = fitted.alpha if alpha is None else check_alpha(alpha)
    if g5_method not in ("analytic", "bootstrap"):
        raise ValueError("g5_method must be 'analytic' or 'bootstrap'")
    params = fitted.params
    y_star, res = bootstrap_refits(data, params, alpha, b, seed, fitted.config)
    n_fail = _check_failures(res.converged)
    ok = res.converged
    a_star = res.a[ok]
    g12_star = g1(a_star[:, None], data.d) + g2(a_star[:, None], data.d, alpha)
    correction = g12_star.mean(axis=0)
    b_a = float(data.m * np.mean(a_star - params.a))
    comp = mse_components(data, params, alpha, b_a)
    if g5_method == "bootstrap":
        comp = MseComponents(
            comp.g1, comp.g2, comp.g3, comp.g4, g5_bootstrap(data, params, alpha, y_star[ok], res.beta[ok], a_star)
        )
    naive = mse_naive(comp)
    plugin = mse_plugin(comp, data.m)
    boot = 2.0 * naive - correction + (comp.g3 + comp.g4 + 2.0 * comp.g5) / data.m
    floor = 1e-3 * naive
    clamped = boot < floor
    if np.any(clamped):
        logger.info("%d bootstrap MSE estimates clamped", int(clamped.sum()))
        boot = np.where(clamped, floor, boot)
    return MseReport(
        area_ids=data.area_ids,
        naive=naive,
        plugin=plugin,
        bootstrap=boot,
        components=comp,
        bootstrap_correction=correction,
        b_a=b_a,
        replicates_used=int(ok.sum()),
        failures=n_fail,
        seed=seed,
        clamped=clamped,
    )


def excess_mse(d, a: float, alpha) -> float:
    """Total relative excess ``sum g2 / sum g1`` at variance ``a``."""
    d = getattr(d, "d", d)
    return float(np.sum(g2(a, d, alpha)) / np.sum(g1(a, d)))


class AlphaSelection(NamedTuple):
    alpha: float
    excess: float
    a_hat: float
    iterations: int
    attained: bool


def select_alpha(data: Dataset, c_percent: float, a_hat: Optional[float] = None, tol: float = 1e-10, full_output: bool = False):
    """Smallest-robustness-cost ``alpha`` whose total excess MSE is ``c`` percent.

    ``a_hat`` defaults to the ML estimate. Solved by bisection on
    ``[0, 1 - 1e-6]``; when even the ceiling does not reach ``c`` percent the
    ceiling is returned with a warning.
    """
    if not c_percent > 0:
        raise ValueError("c_percent must be positive")
    if a_hat is None:
        a_hat = fit_ml(data).params.a
    if not a_hat > 0:
        raise ValueError("a_hat must be positive")
    alpha, excess, iterations = solve_alpha(data.d, a_hat, c_percent)
    attained = abs(excess - c_percent / 100.0) < tol
    if iterations == 0:
        warnings.warn(
            f"excess MSE of {c_percent}% is not attainable (max {100 * excess:.4g}%); using alpha = {ALPHA_CEILING}",
            RuntimeWarning,
            stacklevel=2,
        )
    sel = AlphaSelection(alpha, excess, float(a_hat), iterations, attained)
    return sel if full_output else sel.alpha


def solve_alpha(d, a_hat: float, c_percent: float):
    """Bisection core of :func:`select_alpha`: ``(alpha, excess, iterations)``.

    ``iterations == 0`` signals that the ceiling was returned.
    """
    target = c_percent / 100.0

    def gap(al):
        return excess_mse(d, a_hat, al) - target

    top = gap(ALPHA_CEILING)
    if top < 0:
        return ALPHA_CEILING, top + target, 0
    root, info = optimize.bisect(gap, 0.0, ALPHA_CEILING, xtol=1e-16, maxiter=200, full_output=True, disp=False)
    return float(root), gap(root) + target, info.iterations
