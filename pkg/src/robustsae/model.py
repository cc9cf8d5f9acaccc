"""Fay-Herriot model primitives.

Domain types for the area-level model ``y_i ~ N(theta_i, D_i)``,
``theta_i ~ N(x_i' beta, A)``, the density-power weight ``s_i``, the robust
likelihood and the closed-form Gaussian moment identities that the fitting
and MSE code is built on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "AreaObservation",
    "Dataset",
    "ModelParams",
    "check_alpha",
    "double_factorial",
    "v_factor",
    "s_weight",
    "s_weights",
    "robust_likelihood",
    "log_marginal_likelihood",
    "moment_u2j_sk",
]


def _frozen(a, ndim):
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AreaObservation:
    """One area: direct estimate ``y``, covariates ``x`` and sampling variance ``d``."""

    y: float
    x: np.ndarray
    d: float

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, 1))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "d", float(self.d))
        if not self.d > 0:
            raise ValueError(f"sampling variance must be positive, got {self.d}")
        if not (np.isfinite(self.y) and np.all(np.isfinite(self.x))):
            raise ValueError("observation contains non-finite values")


@dataclass(frozen=True)
class Dataset:
    """Area-level data set.

    Parameters
    ----------
    y : (m,) array_like
        Direct estimates.
    x : (m, p) array_like
        Design matrix, one row per area.
    d : (m,) array_like
        Known sampling variances, strictly positive.
    area_ids : sequence of str, optional
        Labels used in reports. Defaults to ``"1".."m"``.
    groups : (m,) array_like, optional
        Integer group labels used only for aggregated reporting.
    """

    y: np.ndarray
    x: np.ndarray
    d: np.ndarray
    area_ids: Optional[tuple] = None
    groups: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        y = _frozen(self.y, 1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = _frozen(x, 2)
        d = _frozen(self.d, 1)
        m, p = x.shape
        if y.shape != (m,) or d.shape != (m,):
            raise ValueError("y, x and d must describe the same number of areas")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise ValueError("data contain non-finite values")
        if np.any(d <= 0):
            raise ValueError("sampling variances must be strictly positive")
        if m < p + 2:
            raise ValueError(f"need at least p + 2 = {p + 2} areas, got {m}")
        if np.linalg.matrix_rank(x) < p:
            raise ValueError("design matrix does not have full column rank")
        ids = self.area_ids
        ids = tuple(str(i) for i in range(1, m + 1)) if ids is None else tuple(str(i) for i in ids)
        if len(ids) != m:
            raise ValueError("area_ids has the wrong length")
        groups = self.groups
        if groups is not None:
            groups = np.array(groups)
            if groups.shape != (m,):
                raise ValueError("groups has the wrong length")
            groups.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "area_ids", ids)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def from_areas(cls, areas: Sequence[AreaObservation], **kwargs) -> "Dataset":
        return cls(
            y=[a.y for a in areas],
            x=np.vstack([a.x for a in areas]),
            d=[a.d for a in areas],
            **kwargs,
        )

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def areas(self) -> list:
        return [AreaObservation(self.y[i], self.x[i], self.d[i]) for i in range(self.m)]

    def leverage(self) -> np.ndarray:
        """Diagonal of ``X (X'X)^{-1} X'``; its maximum should be O(1/m)."""
        q = np.linalg.solve(self.x.T @ self.x, self.x.T)
        return np.einsum("ij,ji->i", self.x, q)

    def with_y(self, y) -> "Dataset":
        """Copy with the direct estimates replaced (bootstrap and simulation use)."""
        return Dataset(y, self.x, self.d, self.area_ids, self.groups)


@dataclass(frozen=True)
class ModelParams:
    """Regression coefficients ``beta`` and random-effect variance ``a``."""

    beta: np.ndarray
    a: float

    def __post_init__(self):
        beta = _frozen(np.atleast_1d(self.beta), 1)
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        a = float(self.a)
        if not (a >= 0 and np.isfinite(a)):
            raise ValueError(f"random-effect variance must be finite and >= 0, got {a}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "a", a)


def check_alpha(alpha) -> float:
    """Validate a divergence tuning constant, ``0 <= alpha < 1``."""
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return alpha


def double_factorial(n: int) -> int:
    """``n!!`` with the convention ``(-1)!! = 0!! = 1``."""
    if n < -1:
        raise ValueError("double factorial is defined here for n >= -1")
    return math.prod(range(n, 0, -2))


def v_factor(a, d):
    """Peak height ``1 / sqrt(2 pi (a + d))`` of the marginal density of ``y_i``."""
    b = np.asarray(a, dtype=float) + np.asarray(d, dtype=float)
    if np.any(b <= 0):
        raise ValueError("a + d must be positive")
    out = 1.0 / np.sqrt(2.0 * np.pi * b)
    return float(out) if out.ndim == 0 else out


def _log_s(u, b, alpha):
    # log of V^alpha exp(-alpha u^2 / (2 b)); evaluated in log space so that
    # far tails underflow to exactly 0 instead of overflowing
    return -alpha * (0.5 * np.log(2.0 * np.pi * b) + u * u / (2.0 * b))


def _weights(u, b, alpha):
    return np.exp(_log_s(u, b, alpha))


def s_weight(obs, params: ModelParams, alpha) -> float:
    """Density-power weight ``s_i = f_i(y_i)^alpha`` for one area.

    Equal to ``V_i^alpha`` at a zero residual and decreasing in ``|y_i - x_i'beta|``.
    Accepts a :class:`Dataset` as well, in which case an array is returned.
    """
    alpha = check_alpha(alpha)
    u = obs.y - obs.x @ params.beta
    out = _weights(u, params.a + obs.d, alpha)
    return float(out) if np.ndim(out) == 0 else out


def s_weights(data: Dataset, params: ModelParams, alpha) -> np.ndarray:
    return s_weight(data, params, alpha)


def robust_likelihood(data: Dataset, params: ModelParams, alpha) -> float:
    """Density power divergence objective (summed over areas, no 1/m factor).

    ``sum_i s_i / alpha - V_i^alpha / (1 + alpha)^{3/2}``. As ``alpha -> 0``,
    subtracting ``m (1/alpha - 1)`` recovers the Gaussian log-likelihood.
    """
    alpha = check_alpha(alpha)
    if alpha == 0.0:
        raise ValueError("robust likelihood is undefined at alpha = 0; use log_marginal_likelihood")
    b = params.a + data.d
    u = data.y - data.x @ params.beta
    s = _weights(u, b, alpha)
    va = np.exp(-0.5 * alpha * np.log(2.0 * np.pi * b))
    return float(np.sum(s / alpha - va / (1.0 + alpha) ** 1.5))


def log_marginal_likelihood(data: Dataset, params: ModelParams) -> float:
    b = params.a + data.d
    if np.any(b <= 0):
        raise ValueError("a + d must be positive for every area")
    u = data.y - data.x @ params.beta
    return float(-0.5 * data.m * np.log(2.0 * np.pi) - 0.5 * np.sum(np.log(b)) - 0.5 * np.sum(u * u / b))


def moment_u2j_sk(j: int, k: int, a, d, alpha):
    """``E[u^{2j} s^k]`` for ``u = y - x'beta ~ N(0, a + d)``.

    Closed form ``V^{k alpha} (k alpha + 1)^{-j-1/2} (2j-1)!! (a+d)^j``.
    Odd powers of ``u`` have zero expectation and need no function.
    """
    if j < 0 or k < 0:
        raise ValueError("j and k must be non-negative")
    alpha = check_alpha(alpha)
    b = np.asarray(a, dtype=float) + np.asarray(d, dtype=float)
    ka = k * alpha
    out = (
        np.exp(-0.5 * ka * np.log(2.0 * np.pi * b))
        * (ka + 1.0) ** (-j - 0.5)
        * double_factorial(2 * j - 1)
        * b**j
    )
    return float(out) if out.ndim == 0 else out
