"""Closed-form kernel minimax estimation of conditional-moment functions.

The estimators here solve problems of the form: find f minimizing the
worst-case penalized violation of E[{S - D f(V_f)} g(V_g)] = 0 over an
adversary g in a Gaussian RKHS. The treatment-odds and outcome-bridge fits
are instances obtained by the role assignments in :func:`fit_odds_weight`
and :func:`fit_bridge`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .exceptions import CocaError, DimensionMismatch, NonPositivePilot
from .kernels import (
    ColumnStandardizer,
    GaussianKernelParams,
    cross_gram,
    gram_matrix,
    median_heuristic_bandwidth,
    regularized_pinv_solve,
)

ODDS_CLIP = (1e-3, 1e3)
RATIO_REMEDY_THRESHOLD = 10.0

DEFAULT_LAMBDA_GRID = (1e-6, 1e-4, 1e-2, 1e-1)
DEFAULT_KAPPA_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class MinimaxProblem:
    """Arrays of one adversarial moment problem plus its hyperparameters.

    ``s`` and ``d`` are the target and multiplier per unit; ``v_f`` holds the
    arguments of the learned function and ``v_g`` those of the adversary.
    """

    s: np.ndarray
    d: np.ndarray
    v_f: np.ndarray
    v_g: np.ndarray
    lambda_f: float
    lambda_g: float
    kappa_f: float
    kappa_g: float

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        self.v_f = np.atleast_2d(np.asarray(self.v_f, dtype=float))
        self.v_g = np.atleast_2d(np.asarray(self.v_g, dtype=float))
        m = self.s.shape[0]
        if not (self.d.shape[0] == self.v_f.shape[0] == self.v_g.shape[0] == m):
            raise DimensionMismatch("s, d, v_f, v_g must share length")
        for name in ("lambda_f", "lambda_g", "kappa_f", "kappa_g"):
            if not getattr(self, name) > 0:
                raise CocaError(f"{name} must be positive")


@dataclass
class KernelFunctionEstimate:
    """Fitted function as a kernel expansion over its training rows.

    Evaluation is exactly sum_i gamma_i * K(anchor_i, v) computed on
    standardized coordinates, so a serialized estimate reproduces values
    bit for bit.
    """

    anchors: np.ndarray
    gamma: np.ndarray
    bandwidth: float
    standardization: ColumnStandardizer

    def __post_init__(self):
        self._z_anchors = None

    def __call__(self, v_new) -> np.ndarray:
        if self._z_anchors is None:
            self._z_anchors = self.standardization.transform(self.anchors)
        z_new = self.standardization.transform(v_new)
        k = cross_gram(self._z_anchors, z_new, GaussianKernelParams(self.bandwidth))
        return self.gamma @ k

    def to_dict(self) -> dict:
        return {
            "anchors": self.anchors.tolist(),
            "gamma": self.gamma.tolist(),
            "bandwidth": self.bandwidth,
            "standardization": self.standardization.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "KernelFunctionEstimate":
        return KernelFunctionEstimate(
            anchors=np.asarray(d["anchors"], dtype=float),
            gamma=np.asarray(d["gamma"], dtype=float),
            bandwidth=float(d["bandwidth"]),
            standardization=ColumnStandardizer.from_dict(d["standardization"]),
        )


def _gamma_operator(g: np.ndarray, m: int, lambda_g: float) -> np.ndarray:
    """0.25 * G (G/m + lambda_g I)^{-1}, symmetrized."""
    b = g / m + lambda_g * np.eye(g.shape[0])
    gam = 0.25 * np.linalg.solve(b, g).T
    return 0.5 * (gam + gam.T)


def solve_minimax(problem: MinimaxProblem) -> KernelFunctionEstimate:
    """Representer-theorem solution of the penalized saddle problem.

    Computes Gram matrices F and G on standardized inputs, the adversary
    operator Gamma = 0.25 G (G/M + lambda_g I)^{-1}, and the coefficients
    gamma = (F D Gamma D F + M^2 lambda_f F)^+ F D Gamma s via the
    regularized pseudo-inverse.
    """
    m = problem.s.shape[0]
    std_f = ColumnStandardizer.fit(problem.v_f)
    std_g = ColumnStandardizer.fit(problem.v_g)
    z_f = std_f.transform(problem.v_f)
    z_g = std_g.transform(problem.v_g)
    f = gram_matrix(z_f, GaussianKernelParams(problem.kappa_f))
    g = gram_matrix(z_g, GaussianKernelParams(problem.kappa_g))
    gam = _gamma_operator(g, m, problem.lambda_g)
    dgd = gam * problem.d[:, None] * problem.d[None, :]
    lhs = f @ dgd @ f + (m * m * problem.lambda_f) * f
    lhs = 0.5 * (lhs + lhs.T)
    rhs = f @ (problem.d * (gam @ problem.s))
    gamma = regularized_pinv_solve(lhs, rhs)
    return KernelFunctionEstimate(
        anchors=np.array(problem.v_f, copy=True),
        gamma=gamma,
        bandwidth=problem.kappa_f,
        standardization=std_f,
    )


# --- role assignments -------------------------------------------------------

def _odds_arrays(data: Dataset):
    v_f = np.column_stack([data.y.reshape(-1, 1), data.x])
    v_g = np.column_stack([data.w, data.x])
    return data.a.astype(float), 1.0 - data.a, v_f, v_g


def _bridge_arrays(data: Dataset):
    v_f = np.column_stack([data.w, data.x])
    v_g = np.column_stack([data.y.reshape(-1, 1), data.x])
    untreated = 1.0 - data.a
    return untreated * data.y, untreated, v_f, v_g


@dataclass
class OddsFunction:
    """Treatment-odds estimate, clipped to a positive range on evaluation.

    With a parametric ``pilot``, the kernel part estimates the ratio to the
    pilot and the composite is pilot * ratio.
    """

    estimate: KernelFunctionEstimate
    pilot: Optional[Callable] = None
    clip: tuple = ODDS_CLIP

    def raw(self, y, x) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(len(y), -1)
        vals = self.estimate(np.column_stack([y.reshape(-1, 1), x]))
        if self.pilot is not None:
            vals = vals * self.pilot(y, x)
        return vals

    def __call__(self, y, x) -> np.ndarray:
        return np.clip(self.raw(y, x), self.clip[0], self.clip[1])


@dataclass
class BridgeFunction:
    """Outcome-bridge estimate evaluated at (w, x)."""

    estimate: KernelFunctionEstimate

    def __call__(self, w, x) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        x = np.asarray(x, dtype=float).reshape(w.shape[0], -1)
        return self.estimate(np.column_stack([w, x]))


def fit_odds_weight(data: Dataset, hyper: Sequence[float]) -> OddsFunction:
    """Minimax fit of the treatment-odds function evaluable at any (y, x)."""
    s, d, v_f, v_g = _odds_arrays(data)
    est = solve_minimax(MinimaxProblem(s, d, v_f, v_g, *hyper))
    return OddsFunction(estimate=est)


def fit_bridge(data: Dataset, hyper: Sequence[float]) -> BridgeFunction:
    """Minimax fit of the outcome bridge evaluable at any (w, x)."""
    s, d, v_f, v_g = _bridge_arrays(data)
    est = solve_minimax(MinimaxProblem(s, d, v_f, v_g, *hyper))
    return BridgeFunction(estimate=est)


def fit_odds_with_ratio_remedy(
    data: Dataset,
    pilot: Callable,
    hyper: Sequence[float],
    threshold: float = RATIO_REMEDY_THRESHOLD,
) -> OddsFunction:
    """Odds fit with the wide-range remedy.

    When the pilot odds vary by more than ``threshold`` (max over min) on the
    fold, the kernel part targets the ratio to the pilot and the returned
    function is the composite; otherwise this is a plain odds fit.
    """
    pilot_vals = np.asarray(pilot(data.y, data.x), dtype=float).reshape(-1)
    if np.any(pilot_vals <= 0) or not np.all(np.isfinite(pilot_vals)):
        raise NonPositivePilot("pilot odds must be positive and finite on the fold")
    if float(pilot_vals.max() / pilot_vals.min()) > threshold:
        _, _, v_f, v_g = _odds_arrays(data)
        s = data.a.astype(float)
        d = (1.0 - data.a) * pilot_vals
        est = solve_minimax(MinimaxProblem(s, d, v_f, v_g, *hyper))
        return OddsFunction(estimate=est, pilot=pilot)
    return fit_odds_weight(data, hyper)


# --- hyperparameter selection ----------------------------------------------

def projected_risk(est, s, d, v_f, v_g, lambda_g: float, kappa_g: float) -> float:
    """Validation projected risk: eps' Gamma_V eps with eps = s - d * f(v_f)."""
    s = np.asarray(s, dtype=float).reshape(-1)
    d = np.asarray(d, dtype=float).reshape(-1)
    eps = s - d * np.asarray(est(v_f), dtype=float)
    std = ColumnStandardizer.fit(v_g)
    g = gram_matrix(std.transform(v_g), GaussianKernelParams(kappa_g))
    gam = _gamma_operator(g, s.shape[0], lambda_g)
    return float(eps @ gam @ eps)


def v_statistic_risk(est, s, d, v_f, v_g, kappa_g: float) -> float:
    """Validation V-statistic: sum_{j,j'} eps_j eps_j' K(v_g_j, v_g_j')."""
    s = np.asarray(s, dtype=float).reshape(-1)
    d = np.asarray(d, dtype=float).reshape(-1)
    eps = s - d * np.asarray(est(v_f), dtype=float)
    std = ColumnStandardizer.fit(v_g)
    g = gram_matrix(std.transform(v_g), GaussianKernelParams(kappa_g))
    return float(eps @ g @ eps)


def cv_select_hyperparams(
    s,
    d,
    v_f,
    v_g,
    candidates: Sequence[Sequence[float]],
    inner_folds: int = 5,
    risk: str = "v_statistic",
    seed: int = 0,
) -> tuple:
    """Pick the candidate (lambda_f, lambda_g, kappa_f, kappa_g) minimizing
    the average validation risk over seeded inner folds.

    A candidate whose fit fails on any inner fold receives +inf risk; ties
    break to the smallest candidate index.
    """
    if len(candidates) == 0:
        raise CocaError("candidate list must be nonempty")
    s = np.asarray(s, dtype=float).reshape(-1)
    d = np.asarray(d, dtype=float).reshape(-1)
    v_f = np.atleast_2d(np.asarray(v_f, dtype=float))
    v_g = np.atleast_2d(np.asarray(v_g, dtype=float))
    m = s.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    fold_id = np.empty(m, dtype=np.int64)
    fold_id[perm] = np.arange(m) % inner_folds

    mean_risks = np.full(len(candidates), np.inf)
    for idx, cand in enumerate(candidates):
        lam_f, lam_g, kap_f, kap_g = cand
        risks = []
        try:
            for c in range(inner_folds):
                train = fold_id != c
                val = fold_id == c
                if train.sum() == 0 or val.sum() == 0:
                    continue
                est = solve_minimax(MinimaxProblem(
                    s[train], d[train], v_f[train], v_g[train],
                    lam_f, lam_g, kap_f, kap_g))
                if risk == "projected":
                    risks.append(projected_risk(
                        est, s[val], d[val], v_f[val], v_g[val], lam_g, kap_g))
                else:
                    risks.append(v_statistic_risk(
                        est, s[val], d[val], v_f[val], v_g[val], kap_g))
        except (CocaError, np.linalg.LinAlgError):
            continue
        if risks:
            mean_risks[idx] = float(np.mean(risks))
    best = int(np.argmin(mean_risks))
    return tuple(candidates[best])


def _safe_median_bandwidth(rows, seed: int) -> float:
    std = ColumnStandardizer.fit(rows)
    z = std.transform(rows)
    if z.shape[1] == 0 or z.shape[0] < 2:
        return 1.0
    try:
        return median_heuristic_bandwidth(z, seed=seed)
    except CocaError:
        return 1.0


def select_default_hyperparams(
    s,
    d,
    v_f,
    v_g,
    inner_folds: int = 5,
    risk: str = "v_statistic",
    seed: int = 0,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    kappa_multipliers: Sequence[float] = DEFAULT_KAPPA_MULTIPLIERS,
) -> tuple:
    """Coordinate-wise search over the default grid.

    Stage 1 ties lambda_f = lambda_g and kappa_f = kappa_g (as multiples of
    the per-side median-heuristic bandwidths); stage 2 refines the two
    lambdas separately at the stage-1 bandwidths.
    """
    mh_f = _safe_median_bandwidth(v_f, seed)
    mh_g = _safe_median_bandwidth(v_g, seed)
    stage1 = [(lam, lam, mult * mh_f, mult * mh_g)
              for lam in lambda_grid for mult in kappa_multipliers]
    best1 = cv_select_hyperparams(s, d, v_f, v_g, stage1, inner_folds, risk, seed)
    kap_f, kap_g = best1[2], best1[3]
    stage2 = [(lam_f, lam_g, kap_f, kap_g)
              for lam_f in lambda_grid for lam_g in lambda_grid]
    return cv_select_hyperparams(s, d, v_f, v_g, stage2, inner_folds, risk, seed)
