"""Comparator estimators: difference-in-differences under parallel trends
and the rank-preserving one-shot / grid-search calibration estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .data import Dataset
from .exceptions import DimensionMismatch, RankDeficientDesign, ValidationError

NEAR_ZERO_SLOPE = 1e-8


@dataclass
class DidResult:
    psi_hat: float
    se: float
    ci: tuple

    def to_dict(self) -> dict:
        return {"psi_hat": self.psi_hat, "se": self.se, "ci": list(self.ci)}


def _select_pre_period(data: Dataset, selector) -> np.ndarray:
    if selector == "latest":
        return data.w[:, -1]
    if selector == "average":
        return data.w.mean(axis=1)
    if isinstance(selector, (int, np.integer)):
        if not 0 <= selector < data.d_w:
            raise ValidationError(f"proxy column {selector} out of range")
        return data.w[:, int(selector)]
    raise ValidationError(f"unknown pre-period selector {selector!r}")


def did_estimate(data: Dataset, pre_period="latest",
                 alpha: float = 0.05) -> DidResult:
    """Two-arm contrast of outcome-minus-baseline with a two-sample SE.

    ``pre_period`` picks the baseline column: "latest" (last proxy column,
    the default), "average", or an integer column index.
    """
    w_tilde = _select_pre_period(data, pre_period)
    d = data.y - w_tilde
    treated = data.a == 1
    d1, d0 = d[treated], d[~treated]
    psi = float(d1.mean() - d0.mean())
    se = float(np.sqrt(d1.var(ddof=1) / d1.size + d0.var(ddof=1) / d0.size))
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return DidResult(psi_hat=psi, se=se, ci=(psi - z * se, psi + z * se))


@dataclass
class CocaOlsFit:
    """One-shot calibrated regression fit: proxy on (1, A, Y, X)."""

    beta: np.ndarray
    vhat: np.ndarray
    psi_hat: float
    se: float
    unstable: bool

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "psi_hat": self.psi_hat,
                "se": self.se, "unstable": self.unstable}


def _ols(design: np.ndarray, target: np.ndarray):
    n, p = design.shape
    if np.linalg.matrix_rank(design) < p:
        raise RankDeficientDesign("regressor matrix is rank deficient")
    beta, _, _, _ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ beta
    sigma2 = float(resid @ resid) / (n - p)
    vhat = sigma2 * np.linalg.inv(design.T @ design)
    return beta, vhat


def coca_ols_oneshot(data: Dataset) -> CocaOlsFit:
    """Single regression of the proxy on (1, A, Y, X); the effect estimate is
    minus the ratio of the A and Y coefficients, with a delta-method SE."""
    if data.d_w != 1:
        raise DimensionMismatch("one-shot estimator requires a single proxy column")
    design = np.column_stack([np.ones(data.n), data.a.astype(float),
                              data.y, data.x])
    beta, vhat = _ols(design, data.w[:, 0])
    b2, b3 = float(beta[1]), float(beta[2])
    unstable = abs(b3) < NEAR_ZERO_SLOPE
    if unstable:
        psi = float("inf") if b2 != 0 else 0.0
        se = float("inf")
    else:
        ratio = b2 / b3
        psi = -ratio
        var = (vhat[1, 1] - 2.0 * ratio * vhat[1, 2] + ratio ** 2 * vhat[2, 2]) / b3 ** 2
        se = float(np.sqrt(max(var, 0.0)))
    return CocaOlsFit(beta=beta, vhat=vhat, psi_hat=psi, se=se, unstable=unstable)


def coca_grid_search(data: Dataset, psi_grid, alpha: float = 0.05) -> np.ndarray:
    """Confidence set from inverting the no-treatment-coefficient test.

    For each candidate effect, regress the proxy on (1, A, Y - psi*A, X) and
    keep candidates where the Wald test of a zero A-coefficient fails to
    reject at level alpha.
    """
    psi_grid = np.asarray(psi_grid, dtype=float).reshape(-1)
    if psi_grid.size == 0:
        raise ValidationError("psi grid must be nonempty")
    if data.d_w != 1:
        raise DimensionMismatch("grid-search estimator requires a single proxy column")
    z_crit = float(stats.norm.ppf(1.0 - alpha / 2.0))
    a = data.a.astype(float)
    accepted = []
    for psi in psi_grid:
        design = np.column_stack([np.ones(data.n), a, data.y - psi * a, data.x])
        beta, vhat = _ols(design, data.w[:, 0])
        se_b2 = float(np.sqrt(max(vhat[1, 1], 0.0)))
        t = abs(float(beta[1])) / se_b2 if se_b2 > 0 else np.inf
        if t <= z_crit:
            accepted.append(psi)
    return np.asarray(accepted)


class DidEstimator(BaseEstimator):
    """Difference-in-differences baseline with a selectable pre-period."""

    def __init__(self, pre_period="latest", alpha=0.05):
        self.pre_period = pre_period
        self.alpha = alpha

    def fit(self, y, a, w, x=None):
        data = Dataset.from_arrays(y, a, w, x)
        res = did_estimate(data, self.pre_period, self.alpha)
        self.result_ = res
        self.psi_hat_ = res.psi_hat
        self.se_ = res.se
        self.ci_ = res.ci
        return self


class CocaOls(BaseEstimator):
    """One-shot rank-preserving calibration estimator."""

    def __init__(self, alpha=0.05):
        self.alpha = alpha

    def fit(self, y, a, w, x=None):
        data = Dataset.from_arrays(y, a, w, x)
        fit = coca_ols_oneshot(data)
        z = float(stats.norm.ppf(1.0 - self.alpha / 2.0))
        self.result_ = fit
        self.psi_hat_ = fit.psi_hat
        self.se_ = fit.se
        self.ci_ = (fit.psi_hat - z * fit.se, fit.psi_hat + z * fit.se)
        return self
