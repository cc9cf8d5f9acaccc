"""Point predictors of the small-area means.

Every function accepts either a single :class:`~robustsae.model.AreaObservation`
(returning a float) or a whole :class:`~robustsae.model.Dataset` (returning one
value per area); the arithmetic is identical in both cases.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .model import Dataset, ModelParams, _weights, check_alpha

__all__ = [
    "HUBER_K",
    "Prediction",
    "GlsSolution",
    "bayes_estimate",
    "robust_bayes_estimate",
    "huber_psi",
    "gls_solution",
    "geb_estimate",
    "sreb_estimate",
    "predict",
]

HUBER_K = 1.345


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


@dataclass(frozen=True)
class Prediction:
    """Predicted means and the multiplier applied to ``y - x'beta``."""

    theta_hat: np.ndarray
    shrink_weight: np.ndarray
    flags: Optional[np.ndarray] = None


def bayes_estimate(obs, params: ModelParams):
    """Classical shrinkage ``y - D/(A+D) (y - x'beta)``."""
    u = obs.y - obs.x @ params.beta
    return _out(obs.y - obs.d / (params.a + obs.d) * u)


def robust_bayes_estimate(obs, params: ModelParams, alpha):
    """Shrinkage damped by the density-power weight ``s_i``.

    ``y - s_i D/(A+D) (y - x'beta)``; identical to :func:`bayes_estimate` at
    ``alpha = 0`` and tends to ``y`` for outlying areas.
    """
    alpha = check_alpha(alpha)
    b = params.a + obs.d
    u = obs.y - obs.x @ params.beta
    if alpha == 0.0:
        return _out(obs.y - obs.d / b * u)
    return _out(obs.y - obs.d / b * u * _weights(u, b, alpha))


def huber_psi(u, k: float = HUBER_K):
    """Huber's psi, ``u * min(1, k / |u|)``."""
    if not k > 0:
        raise ValueError("Huber constant must be positive")
    return _out(np.clip(u, -k, k))


class GlsSolution(NamedTuple):
    beta: np.ndarray
    info_inv: np.ndarray  # (sum x x' / (A + D))^{-1}
    a: float

    def v(self, data) -> np.ndarray:
        """``A + D_i - x_i' info_inv x_i``."""
        q = np.einsum("...i,ij,...j->...", data.x, self.info_inv, data.x)
        return self.a + data.d - q


def gls_solution(data: Dataset, a: float) -> GlsSolution:
    """GLS coefficients at a fixed random-effect variance ``a``."""
    if a < 0:
        raise ValueError("random-effect variance must be non-negative")
    w = 1.0 / (a + data.d)
    info = (data.x.T * w) @ data.x
    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("GLS information matrix is singular") from exc
    beta = info_inv @ (data.x.T @ (w * data.y))
    return GlsSolution(beta, info_inv, float(a))


def geb_estimate(data: Dataset, a: float, k: float = HUBER_K, i: Optional[int] = None, gls: Optional[GlsSolution] = None):
    """Huberised shrinkage on the GLS-standardised residual.

    ``y_i - D_i sqrt(v_i)/(A+D_i) psi_k((y_i - x_i' beta(A)) / sqrt(v_i))``
    with ``beta(A)`` the GLS estimate. Pass ``gls`` to reuse a factorisation
    across calls; ``i`` selects a single area.
    """
    gls = gls_solution(data, a) if gls is None else gls
    v = gls.v(data)
    if np.any(v <= 0):
        raise ValueError("non-positive residual variance v_i(A)")
    sv = np.sqrt(v)
    u = data.y - data.x @ gls.beta
    est = data.y - data.d * sv / (a + data.d) * huber_psi(u / sv, k)
    return float(est[i]) if i is not None else est


def _sr_lhs(theta, y, mu, sd, sa, k):
    return np.clip((y - theta) / sd, -k, k) / sd - np.clip((theta - mu) / sa, -k, k) / sa


def sreb_estimate(obs, params: ModelParams, k: float = HUBER_K, max_iter: int = 200, return_flags: bool = False):
    """Root of the Huberised posterior-mode equation, by bisection.

    Solves ``psi_k((y - t)/sqrt(D))/sqrt(D) = psi_k((t - x'beta)/sqrt(A))/sqrt(A)``
    on ``[min(y, x'beta) - delta, max(y, x'beta) + delta]`` with
    ``delta = k max(sqrt(A), sqrt(D))``. The left side is non-increasing in
    ``t``. If no sign change exists the classical Bayes estimate, clamped to the
    bracket, is returned and the area is flagged.
    """
    if not params.a > 0:
        raise ValueError("SR estimator needs A > 0")
    y = np.asarray(obs.y, dtype=float)
    mu = np.asarray(obs.x @ params.beta, dtype=float)
    d = np.asarray(obs.d, dtype=float)
    sd, sa = np.sqrt(d), np.sqrt(params.a)
    delta = k * np.maximum(sa, sd)
    lo = np.minimum(y, mu) - delta
    hi = np.maximum(y, mu) + delta
    f_lo = _sr_lhs(lo, y, mu, sd, sa, k)
    f_hi = _sr_lhs(hi, y, mu, sd, sa, k)
    degenerate = (f_lo < 0) | (f_hi > 0)
    lo, hi = np.broadcast_arrays(lo, hi)
    lo, hi = lo.copy(), hi.copy()
    # stop at a few ulps of the problem scale rather than of the root itself
    width = 4.0 * np.finfo(float).eps * np.maximum(np.maximum(np.abs(lo), np.abs(hi)), delta)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if np.all((hi - lo <= width) | (mid == lo) | (mid == hi)):
            break
        f_mid = _sr_lhs(mid, y, mu, sd, sa, k)
        go_right = f_mid > 0
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    else:
        raise RuntimeError("bisection did not reach machine precision")
    root = 0.5 * (lo + hi)
    # pick whichever bracket end has the smaller residual
    r_lo = np.abs(_sr_lhs(lo, y, mu, sd, sa, k))
    r_hi = np.abs(_sr_lhs(hi, y, mu, sd, sa, k))
    r_mid = np.abs(_sr_lhs(root, y, mu, sd, sa, k))
    root = np.where(r_lo < r_mid, lo, root)
    root = np.where(r_hi < np.minimum(r_lo, r_mid), hi, root)
    if np.any(degenerate):
        fallback = y - d / (params.a + d) * (y - mu)
        root = np.where(degenerate, np.clip(fallback, lo, hi), root)
    root = _out(root)
    if return_flags:
        return root, degenerate
    return root


def predict(
    data: Dataset,
    params: ModelParams,
    method: str = "eb",
    alpha: float = 0.0,
    k: float = HUBER_K,
) -> Prediction:
    """Predictions for every area with one of ``eb``, ``dpeb``, ``geb``, ``sreb``.

    For ``geb`` only ``params.a`` is used (the GLS coefficients are recomputed).
    ``shrink_weight`` is the effective factor ``(y - theta_hat) / (y - x'beta)``,
    reported as ``D/(A+D)`` where the residual is exactly zero.
    """
    method = method.lower()
    b = params.a + data.d
    u = data.y - data.x @ params.beta
    flags = None
    if method == "eb":
        theta = bayes_estimate(data, params)
        return Prediction(theta, data.d / b)
    if method == "dpeb":
        alpha = check_alpha(alpha)
        theta = robust_bayes_estimate(data, params, alpha)
        return Prediction(theta, data.d / b * _weights(u, b, alpha))
    if method == "geb":
        gls = gls_solution(data, params.a)
        theta = geb_estimate(data, params.a, k, gls=gls)
        u = data.y - data.x @ gls.beta
    elif method == "sreb":
        theta, flags = sreb_estimate(data, params, k, return_flags=True)
    else:
        raise ValueError(f"unknown method {method!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(u != 0, (data.y - theta) / u, data.d / b)
    return Prediction(theta, weight, flags)
