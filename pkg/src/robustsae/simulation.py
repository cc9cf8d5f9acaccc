"""Monte-Carlo studies of prediction error and of MSE estimators.

Scenarios follow the standard design for this model: ``m`` areas in five
equal groups with sampling variances ``d_pattern``, one uniform covariate drawn
once and held fixed, ``theta_i = b0 + b1 x_i + sqrt(A) u_i`` and
``y_i = theta_i + e_i``. The standardised effect ``u_i`` is normal in scenario
I and a two-component mixture with a heavy contaminating component otherwise.

Every replicate draws from its own generator keyed by ``(seed, replicate)`` and
replicates are reduced in index order, so reports are bit-identical whatever
``n_jobs`` is.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .fitting import FitConfig, NonConvergenceError, _result, fit_many, replicate_rng
from .model import Dataset, ModelParams, check_alpha
from .mse import (
    mse_bootstrap,
    mse_components,
    mse_naive,
    mse_plugin,
    solve_alpha,
)
from .predictors import HUBER_K, geb_estimate, robust_bayes_estimate, sreb_estimate

logger = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "SimReport",
    "StudyError",
    "draw_effects",
    "generate_scenario",
    "generate_batch",
    "run_prediction_study",
    "run_mse_estimator_study",
    "PREDICTION_ESTIMATORS",
    "NOT_IMPLEMENTED",
]

# contamination share and kind per scenario
_MIXTURES = {
    "I": (0.0, None),
    "II": (0.15, "normal"),
    "III": (0.30, "normal"),
    "IV": (0.15, "t"),
    "V": (0.15, "chi2"),
}
_CONTAM_VAR = 49.0

PREDICTION_ESTIMATORS = ("DPEB1", "DPEB2", "EB", "REB1", "REB2", "GEB")
# parameter equations for REB1 are not available; the column is reported empty
NOT_IMPLEMENTED = ("REB1",)


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    tag: str = "I"
    m: int = 30
    beta: tuple = (0.0, 2.0)
    a: float = 0.5
    d_pattern: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    covariate_seed: int = 2017

    def __post_init__(self):
        object.__setattr__(self, "tag", str(self.tag).upper())
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "d_pattern", tuple(float(v) for v in self.d_pattern))
        if self.tag not in _MIXTURES:
            raise ValueError(f"unknown scenario {self.tag!r}")
        if len(self.d_pattern) != 5:
            raise ValueError("d_pattern must have five entries")
        if self.m % 5 != 0 or self.m < 10:
            raise ValueError("m must be a multiple of 5 and at least 10")
        if len(self.beta) != 2:
            raise ValueError("beta must be (intercept, slope)")

    @property
    def x(self) -> np.ndarray:
        cov = np.random.default_rng(self.covariate_seed).uniform(size=self.m)
        return np.column_stack([np.ones(self.m), cov])

    @property
    def d(self) -> np.ndarray:
        return np.repeat(self.d_pattern, self.m // 5)

    @property
    def groups(self) -> np.ndarray:
        return np.repeat(np.arange(1, 6), self.m // 5)

    def key(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def draw_effects(tag: str, size, rng: np.random.Generator, return_mask: bool = False):
    """Standardised random effects for scenario ``tag``.

    Contaminating components have variance 49 (t5 rescaled, chi-square 5
    centred and rescaled) or 100 (normal). With ``return_mask`` the indicator
    of the contaminating component is returned as well.
    """
    frac, kind = _MIXTURES[str(tag).upper()]
    u = rng.standard_normal(size)
    if kind is None:
        return (u, np.zeros(np.shape(u), dtype=bool)) if return_mask else u
    outlier = rng.uniform(size=size) < frac
    if kind == "normal":
        heavy = 10.0 * rng.standard_normal(size)
    elif kind == "t":
        heavy = rng.standard_t(5, size) * np.sqrt(_CONTAM_VAR / (5.0 / 3.0))
    else:
        heavy = (rng.chisquare(5, size) - 5.0) * np.sqrt(_CONTAM_VAR / 10.0)
    u = np.where(outlier, heavy, u)
    return (u, outlier) if return_mask else u


def _draw(s: Scenario, x, d, rng):
    u, mask = draw_effects(s.tag, s.m, rng, return_mask=True)
    theta = x @ np.asarray(s.beta) + np.sqrt(s.a) * u
    y = theta + np.sqrt(d) * rng.standard_normal(s.m)
    return y, theta, mask


def generate_scenario(s: Scenario, replicate: int, seed, return_mask: bool = False):
    """One simulated data set and its true area means.

    ``return_mask`` adds a boolean vector marking areas whose effect came from
    the contaminating component.
    """
    x, d = s.x, s.d
    y, theta, mask = _draw(s, x, d, replicate_rng(seed, replicate))
    data = Dataset(y, x, d, groups=s.groups)
    return (data, theta, mask) if return_mask else (data, theta)


def generate_batch(s: Scenario, replicates: Sequence[int], seed):
    """Stacked ``(y, theta)`` arrays, row ``k`` equal to ``generate_scenario(s, replicates[k], seed)``."""
    x, d = s.x, s.d
    out = [_draw(s, x, d, replicate_rng(seed, r)) for r in replicates]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


@dataclass
class SimReport:
    """Long-format study results: one row per (scenario, group, estimator, metric)."""

    frame: pd.DataFrame
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")

    def value(self, estimator: str, metric: str = "MSE") -> np.ndarray:
        """Group values, ordered by group, for one estimator and metric."""
        sub = self.frame[(self.frame.estimator == estimator) & (self.frame.metric == metric)]
        return sub.sort_values("group")["value"].to_numpy()

    def table(self, metrics: Optional[Sequence[str]] = None) -> str:
        """Fixed-width text table, one row per (scenario, group)."""
        f = self.frame
        if metrics is not None:
            f = f[f.metric.isin(metrics)]
        wide = f.pivot_table(
            index=["scenario", "group"], columns=["metric", "estimator"], values="value", dropna=False, sort=False
        )
        wide.columns = [f"{est}" if len(set(f.metric)) == 1 else f"{met}:{est}" for met, est in wide.columns]
        return wide.to_string(float_format=lambda v: f"{v:.3f}", na_rep="n/a")


def _rows(tag, groups, values: dict, metric: str):
    rows = []
    for est, per_area in values.items():
        for g in range(1, 6):
            val = float("nan") if per_area is None else float(np.mean(per_area[groups == g]))
            rows.append({"scenario": tag, "group": g, "estimator": est, "metric": metric, "value": val})
    return rows


def _select_alphas(d, a_hat, c_percent):
    return np.array([solve_alpha(d, a, c_percent)[0] for a in a_hat])


def _prediction_chunk(s: Scenario, reps, seed, c_values, k, config):
    x, d = s.x, s.d
    y, theta = generate_batch(s, reps, seed)
    ml = fit_many(y, x, d, 0.0, config)
    n = len(reps)
    ok = ml.converged.copy()
    dpd = {}
    for c in c_values:
        al = np.zeros(n)
        al[ok] = _select_alphas(d, ml.a[ok], c)
        fit = fit_many(y, x, d, al, config, start=(ml.beta, ml.a))
        ok &= fit.converged
        dpd[c] = (al, fit)
    names = [f"DPEB{i + 1}" for i in range(len(c_values))] + ["EB", "REB2", "GEB"]
    sq = {name: np.full((n, s.m), np.nan) for name in names}
    for r in np.flatnonzero(ok):
        data = Dataset(y[r], x, d)
        ml_p = ModelParams(ml.beta[r], ml.a[r])
        for i, c in enumerate(c_values):
            al, fit = dpd[c]
            est = robust_bayes_estimate(data, ModelParams(fit.beta[r], fit.a[r]), al[r])
            sq[f"DPEB{i + 1}"][r] = (est - theta[r]) ** 2
        sq["EB"][r] = (robust_bayes_estimate(data, ml_p, 0.0) - theta[r]) ** 2
        sq["REB2"][r] = (sreb_estimate(data, ml_p, k) - theta[r]) ** 2
        sq["GEB"][r] = (geb_estimate(data, ml_p.a, k) - theta[r]) ** 2
    return ok, sq


def _chunks(n, size):
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def run_prediction_study(
    s: Scenario,
    r: int = 1000,
    seed=0,
    c_values: Sequence[float] = (1.0, 5.0),
    k: float = HUBER_K,
    config: FitConfig = FitConfig(),
    n_jobs: int = 1,
    chunk: int = 250,
    max_fail: float = 0.05,
) -> SimReport:
    """Group-averaged prediction MSE of the robust and classical predictors.

    Pairings: ``DPEB<j>`` is the DPD fit and robust predictor with ``alpha``
    chosen per replicate for ``c_values[j]`` percent excess MSE, ``EB`` the ML fit
    with the Bayes predictor, ``REB2`` the ML fit with the Huberised
    posterior-mode predictor and ``GEB`` the ML variance with the Huberised
    GLS-residual predictor. ``REB1`` is listed with missing values.
    """
    if r < 1:
        raise ValueError("need at least one replicate")
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_prediction_chunk)(s, reps, seed, tuple(c_values), k, config) for reps in _chunks(r, chunk)
    )
    ok = np.concatenate([p[0] for p in parts])
    n_fail = int(np.sum(~ok))
    if n_fail > max_fail * r:
        raise StudyError(f"{n_fail} of {r} replicates failed to fit")
    names = list(parts[0][1])
    mse = {name: np.concatenate([p[1][name] for p in parts])[ok].mean(axis=0) for name in names}
    order = [f"DPEB{i + 1}" for i in range(len(c_values))] + ["EB", "REB1", "REB2", "GEB"]
    values = {name: mse.get(name) for name in order}
    frame = pd.DataFrame(_rows(s.tag, s.groups, values, "MSE"))
    meta = {
        "scenario": asdict(s),
        "replicates": r,
        "failures": n_fail,
        "seed": seed,
        "c_values": list(c_values),
        "huber_k": k,
        "not_implemented": list(NOT_IMPLEMENTED),
        "per_area_mse": {name: v.tolist() for name, v in mse.items()},
    }
    return SimReport(frame, meta)


def _robust_predictions(y, x, d, c_percent, config):
    # ML fit, per-row alpha selection and DPD refit; returns predictions and fit state
    ml = fit_many(y, x, d, 0.0, config)
    al = np.zeros(y.shape[0])
    al[ml.converged] = _select_alphas(d, ml.a[ml.converged], c_percent)
    fit = fit_many(y, x, d, al, config, start=(ml.beta, ml.a))
    ok = ml.converged & fit.converged
    b = fit.a[:, None] + d
    u = y - fit.beta @ x.T
    theta = y - d / b * u * np.exp(-al[:, None] * (0.5 * np.log(2 * np.pi * b) + u * u / (2 * b)))
    return theta, fit, al, ok


def _truth_chunk(s, reps, seed, c_percent, config):
    x, d = s.x, s.d
    y, theta = generate_batch(s, reps, seed)
    est, _, _, ok = _robust_predictions(y, x, d, c_percent, config)
    return ok, (est - theta) ** 2


def _true_mse(s, truth_r, seed, c_percent, config, n_jobs, chunk, cache_dir, max_fail):
    cache = None
    if cache_dir is not None:
        key = hashlib.sha256(
            json.dumps([s.key(), truth_r, repr(seed), c_percent, asdict(config)], sort_keys=True, default=str).encode()
        ).hexdigest()[:20]
        cache = Path(cache_dir) / f"truth_{key}.npz"
        if cache.exists():
            with np.load(cache) as z:
                return z["mse"], int(z["failures"])
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_truth_chunk)(s, reps, seed, c_percent, config) for reps in _chunks(truth_r, chunk)
    )
    ok = np.concatenate([p[0] for p in parts])
    n_fail = int(np.sum(~ok))
    if n_fail > max_fail * truth_r:
        raise StudyError(f"{n_fail} of {truth_r} truth replicates failed")
    mse = np.concatenate([p[1] for p in parts])[ok].mean(axis=0)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, mse=mse, failures=n_fail)
    return mse, n_fail


def _estimator_chunk(s, reps, seed, c_percent, b, config, variants):
    x, d = s.x, s.d
    m = s.m
    y, _ = generate_batch(s, reps, seed)
    _, fit, al, ok = _robust_predictions(y, x, d, c_percent, config)
    out = {v: np.full((len(reps), m), np.nan) for v in variants}
    for i, rep in enumerate(reps):
        if not ok[i]:
            continue
        data = Dataset(y[i], x, d)
        params = ModelParams(fit.beta[i], fit.a[i])
        comp = mse_components(data, params, al[i])
        if "nMSE" in out:
            out["nMSE"][i] = mse_naive(comp)
        if "pMSE" in out:
            out["pMSE"][i] = mse_plugin(comp, m)
        if "bMSE" in out:
            boot = _bootstrap_mse(data, params, al[i], b, [seed, 7, rep], config)
            if boot is None:
                ok[i] = False
            else:
                out["bMSE"][i] = boot
    return ok, out


def _bootstrap_mse(data, params, alpha, b, seed, config):
    fitted = _result(data, alpha, params.beta, params.a, True, 0, config)
    try:
        return mse_bootstrap(data, fitted, alpha, b, seed).bootstrap
    except NonConvergenceError:
        return None


def run_mse_estimator_study(
    s: Scenario,
    variants: Sequence[str] = ("nMSE", "pMSE", "bMSE"),
    outer: int = 500,
    truth_r: int = 2000,
    seed=0,
    c_percent: float = 5.0,
    b: int = 500,
    config: FitConfig = FitConfig(),
    n_jobs: int = 1,
    chunk: int = 50,
    cache_dir=None,
    max_fail: float = 0.05,
) -> SimReport:
    """Relative bias and coefficient of variation (both in percent) of MSE estimators.

    The true MSE of the robust EB predictor is first computed from ``truth_r``
    independent replicates. Each of ``outer`` further replicates selects
    ``alpha`` for ``c_percent`` excess MSE, fits, and evaluates the requested
    variants: ``nMSE`` (g1 + g2 plug-in), ``pMSE`` (second-order plug-in with
    zero bias term), ``bMSE`` (bootstrap-corrected, ``b`` replicates at the
    selected ``alpha``) and ``oracle`` (the true MSE itself, a harness check).
    """
    if s.tag not in ("I", "II", "III"):
        raise ValueError("the MSE-estimator study covers scenarios I-III")
    unknown = set(variants) - {"nMSE", "pMSE", "bMSE", "oracle"}
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    truth, truth_fail = _true_mse(s, truth_r, [seed, 1], c_percent, config, n_jobs, 250, cache_dir, max_fail)
    est_variants = tuple(v for v in variants if v != "oracle")
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_estimator_chunk)(s, reps, [seed, 2], c_percent, b, config, est_variants)
        for reps in _chunks(outer, chunk)
    )
    ok = np.concatenate([p[0] for p in parts])
    n_fail = int(np.sum(~ok))
    if n_fail > max_fail * outer:
        raise StudyError(f"{n_fail} of {outer} outer replicates failed")
    rb, cv = {}, {}
    for v in variants:
        if v == "oracle":
            est = np.tile(truth, (int(ok.sum()), 1))
        else:
            est = np.concatenate([p[1][v] for p in parts])[ok]
        rel = (est - truth) / truth
        rb[v] = 100.0 * rel.mean(axis=0)
        cv[v] = 100.0 * np.sqrt((rel * rel).mean(axis=0))
    frame = pd.DataFrame(_rows(s.tag, s.groups, rb, "RB") + _rows(s.tag, s.groups, cv, "CV"))
    meta = {
        "scenario": asdict(s),
        "outer": outer,
        "truth_r": truth_r,
        "bootstrap": b,
        "c_percent": c_percent,
        "seed": seed,
        "failures": n_fail,
        "truth_failures": truth_fail,
        "true_mse": truth.tolist(),
    }
    return SimReport(frame, meta)
