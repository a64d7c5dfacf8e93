"""Cross-fitted doubly robust estimation of the treated-effect with
influence-function inference, multiplier bootstrap and median adjustment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .data import Dataset, split_folds
from .exceptions import EmptyInput, NoTreatedUnits, ZeroDenominator
from .gmm import MomentSpec, default_basis, fit_gmm, parametric_odds
from .minimax import (
    RATIO_REMEDY_THRESHOLD,
    _bridge_arrays,
    _odds_arrays,
    _safe_median_bandwidth,
    fit_bridge,
    fit_odds_weight,
    fit_odds_with_ratio_remedy,
    select_default_hyperparams,
)


def plugin_psi0_eps(data: Dataset, omega: Callable) -> float:
    """Odds-weighted untreated mean: the plug-in counterfactual mean."""
    untreated = 1.0 - data.a
    weights = untreated * np.asarray(omega(data.y, data.x), dtype=float)
    denom = float(weights.sum())
    if denom <= 0.0:
        raise ZeroDenominator("no untreated weight mass")
    return float((weights * data.y).sum() / denom)


def plugin_psi0_bridge(data: Dataset, bridge: Callable) -> float:
    """Mean of the bridge over treated units."""
    treated = data.a == 1
    if not np.any(treated):
        raise NoTreatedUnits("no treated units in evaluation set")
    vals = np.asarray(bridge(data.w, data.x), dtype=float)
    return float(vals[treated].mean())


def influence_values(data: Dataset, omega: Callable, bridge: Callable,
                     psi: float) -> np.ndarray:
    """Per-unit influence contributions at the supplied nuisances and psi."""
    a = data.a.astype(float)
    a_bar = float(a.mean())
    b_vals = np.asarray(bridge(data.w, data.x), dtype=float)
    om_vals = np.asarray(omega(data.y, data.x), dtype=float)
    resid = data.y - b_vals
    return (a * (resid - psi) - (1.0 - a) * om_vals * resid) / a_bar


@dataclass
class CrossFitResult:
    """One cross-fitting pass: per-fold estimates, pooled estimate, variance,
    per-unit influence values and the normal-theory confidence interval."""

    per_fold_psi: np.ndarray
    psi_hat: float
    sigma2_hat: float
    influence_values: np.ndarray
    ci: tuple
    n_treated: int
    k: int
    seed: int
    alpha_level: float
    fold_info: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.influence_values.shape[0]

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2_hat / self.n))

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "sigma2_hat": self.sigma2_hat,
            "se": self.se,
            "ci": list(self.ci),
            "per_fold_psi": self.per_fold_psi.tolist(),
            "n_treated": self.n_treated,
            "k": self.k,
            "seed": self.seed,
            "alpha_level": self.alpha_level,
            "fold_info": self.fold_info,
        }


@dataclass
class MedianAdjusted:
    """Median-aggregated repeated cross-fitting estimates."""

    psi_median: float
    sigma2_median: float
    reps: list

    def to_dict(self) -> dict:
        return {
            "psi_median": self.psi_median,
            "sigma2_median": self.sigma2_median,
            "reps": [list(r) for r in self.reps],
        }


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def crossfit_estimate(data: Dataset, k: int, nuisance_fitter: Callable,
                      seed: int, alpha_level: float = 0.05) -> CrossFitResult:
    """K-fold cross-fitted estimate with influence-function variance.

    ``nuisance_fitter(train, seed)`` must return (odds, bridge) callables,
    optionally followed by a provenance dict. The treated-mean and treated
    share averages run over the full sample; fold averages cover only the
    evaluation fold.
    """
    part = split_folds(data.n, k, data.a, seed)
    a = data.a.astype(float)
    full_ay = float((a * data.y).mean())
    a_bar = float(a.mean())

    per_fold_psi = np.empty(k)
    if_vals = np.empty(data.n)
    fold_sigma2 = np.empty(k)
    fold_info = []
    for fold in range(1, k + 1):
        train = data.subset(part.complement_indices(fold))
        fitted = nuisance_fitter(train, _fold_seed(seed, fold))
        omega, bridge = fitted[0], fitted[1]
        fold_info.append(fitted[2] if len(fitted) > 2 else None)

        idx = part.fold_indices(fold)
        ev = data.subset(idx)
        a_ev = ev.a.astype(float)
        om = np.asarray(omega(ev.y, ev.x), dtype=float)
        bv = np.asarray(bridge(ev.w, ev.x), dtype=float)
        resid = ev.y - bv
        term = float(((1.0 - a_ev) * om * resid + a_ev * bv).mean())
        psi_k = (full_ay - term) / a_bar
        per_fold_psi[fold - 1] = psi_k
        contrib = (a_ev * (resid - psi_k) - (1.0 - a_ev) * om * resid) / a_bar
        if_vals[idx] = contrib
        fold_sigma2[fold - 1] = float((contrib ** 2).mean())

    psi_hat = float(per_fold_psi.mean())
    sigma2_hat = float(fold_sigma2.mean())
    z = float(stats.norm.ppf(1.0 - alpha_level / 2.0))
    half = z * np.sqrt(sigma2_hat / data.n)
    return CrossFitResult(
        per_fold_psi=per_fold_psi, psi_hat=psi_hat, sigma2_hat=sigma2_hat,
        influence_values=if_vals, ci=(psi_hat - half, psi_hat + half),
        n_treated=int(data.a.sum()), k=k, seed=seed, alpha_level=alpha_level,
        fold_info=fold_info,
    )


def multiplier_bootstrap(influence_vals, b: int, seed: int,
                         alpha_level: float = 0.05, center: float = 0.0):
    """Gaussian-multiplier bootstrap of the influence-value average.

    Returns the empirical variance of the bootstrap draws and the interval
    ``center`` + (alpha/2, 1 - alpha/2) percentiles of the draws.
    """
    if b < 2:
        raise EmptyInput("need at least 2 bootstrap draws")
    if_vals = np.asarray(influence_vals, dtype=float).reshape(-1)
    n = if_vals.shape[0]
    rng = np.random.default_rng(seed)
    draws = np.empty(b)
    chunk = max(1, int(2e7 // max(n, 1)))
    start = 0
    while start < b:
        stop = min(start + chunk, b)
        eps = rng.standard_normal((stop - start, n))
        draws[start:stop] = eps @ if_vals / n
        start = stop
    variance = float(np.var(draws, ddof=1))
    q_lo, q_hi = np.quantile(draws, [alpha_level / 2.0, 1.0 - alpha_level / 2.0])
    return variance, (center + float(q_lo), center + float(q_hi))


def median_adjust(reps: Sequence) -> MedianAdjusted:
    """Median estimate with variance inflated by the squared deviation from
    the median, each taken across repetitions."""
    reps = [(float(p), float(s2)) for p, s2 in reps]
    if len(reps) == 0:
        raise EmptyInput("no repetitions supplied")
    psis = np.asarray([r[0] for r in reps])
    sig2 = np.asarray([r[1] for r in reps])
    psi_med = float(np.median(psis))
    sigma2_med = float(np.median(sig2 + (psis - psi_med) ** 2))
    return MedianAdjusted(psi_median=psi_med, sigma2_median=sigma2_med, reps=reps)


# --- default nuisance fitter --------------------------------------------------

def _resolve_hyper(hyper, v_f, v_g, seed: int):
    if isinstance(hyper, dict):
        return (
            float(hyper["lambda_f"]),
            float(hyper["lambda_g"]),
            float(hyper.get("kappa_f_scale", 1.0)) * _safe_median_bandwidth(v_f, seed),
            float(hyper.get("kappa_g_scale", 1.0)) * _safe_median_bandwidth(v_g, seed),
        )
    return tuple(float(h) for h in hyper)


@dataclass
class MinimaxNuisanceFitter:
    """Production nuisance fitter: kernel minimax fits of the treatment odds
    and the outcome bridge, with hyperparameter cross-validation and the
    wide-range pilot-ratio remedy for the odds.

    ``hyper_odds`` / ``hyper_bridge`` may be None (cross-validate), a
    4-tuple (lambda_f, lambda_g, kappa_f, kappa_g) of absolute values, or a
    dict with ``lambda_f``, ``lambda_g`` and median-heuristic multipliers
    ``kappa_f_scale`` / ``kappa_g_scale``.
    """

    risk: str = "v_statistic"
    inner_folds: int = 5
    hyper_odds: object = None
    hyper_bridge: object = None
    use_ratio_remedy: bool = True
    pilot_lambda: float = 1e-3
    remedy_threshold: float = RATIO_REMEDY_THRESHOLD

    def __call__(self, train: Dataset, seed: int):
        info = {}

        s_b, d_b, vf_b, vg_b = _bridge_arrays(train)
        if self.hyper_bridge is None:
            hyper_b = select_default_hyperparams(
                s_b, d_b, vf_b, vg_b, inner_folds=self.inner_folds,
                risk=self.risk, seed=seed)
        else:
            hyper_b = _resolve_hyper(self.hyper_bridge, vf_b, vg_b, seed)
        bridge = fit_bridge(train, hyper_b)
        info["bridge_hyper"] = tuple(hyper_b)

        pilot = None
        remedy_active = False
        if self.use_ratio_remedy:
            pilot_fit = fit_gmm(train, MomentSpec("eps", default_basis()),
                                lam=self.pilot_lambda, seed=seed)
            pilot = parametric_odds(pilot_fit, default_basis())
            pilot_vals = pilot(train.y, train.x)
            remedy_active = bool(
                np.all(pilot_vals > 0)
                and float(pilot_vals.max() / pilot_vals.min()) > self.remedy_threshold)

        s_o, d_o, vf_o, vg_o = _odds_arrays(train)
        if remedy_active:
            d_o = d_o * pilot(train.y, train.x)
        if self.hyper_odds is None:
            hyper_o = select_default_hyperparams(
                s_o, d_o, vf_o, vg_o, inner_folds=self.inner_folds,
                risk=self.risk, seed=seed + 1)
        else:
            hyper_o = _resolve_hyper(self.hyper_odds, vf_o, vg_o, seed + 1)
        if remedy_active:
            omega = fit_odds_with_ratio_remedy(
                train, pilot, hyper_o, threshold=self.remedy_threshold)
        else:
            omega = fit_odds_weight(train, hyper_o)
        info["odds_hyper"] = tuple(hyper_o)
        info["remedy_active"] = remedy_active
        return omega, bridge, info


class SemiparametricCoca(BaseEstimator):
    """Cross-fitted doubly robust treated-effect estimator.

    Parameters mirror the run configuration: ``k_folds`` cross-fitting folds,
    ``n_reps`` repeated splits aggregated by median adjustment, normal-theory
    intervals at level ``1 - alpha``, and an optional multiplier bootstrap
    with ``bootstrap_b`` draws. The nuisance functions are fitted by
    :class:`MinimaxNuisanceFitter` unless a custom ``nuisance_fitter``
    callable is supplied.
    """

    def __init__(self, k_folds=2, n_reps=1, alpha=0.05, seed=20231,
                 nuisance_fitter=None, hyper_odds=None, hyper_bridge=None,
                 risk="v_statistic", inner_folds=5, use_ratio_remedy=True,
                 pilot_lambda=1e-3, bootstrap_b=0):
        self.k_folds = k_folds
        self.n_reps = n_reps
        self.alpha = alpha
        self.seed = seed
        self.nuisance_fitter = nuisance_fitter
        self.hyper_odds = hyper_odds
        self.hyper_bridge = hyper_bridge
        self.risk = risk
        self.inner_folds = inner_folds
        self.use_ratio_remedy = use_ratio_remedy
        self.pilot_lambda = pilot_lambda
        self.bootstrap_b = bootstrap_b

    def _fitter(self):
        if self.nuisance_fitter is not None:
            return self.nuisance_fitter
        return MinimaxNuisanceFitter(
            risk=self.risk, inner_folds=self.inner_folds,
            hyper_odds=self.hyper_odds, hyper_bridge=self.hyper_bridge,
            use_ratio_remedy=self.use_ratio_remedy,
            pilot_lambda=self.pilot_lambda)

    def fit(self, y, a, w, x=None):
        data = Dataset.from_arrays(y, a, w, x)
        fitter = self._fitter()
        z = float(stats.norm.ppf(1.0 - self.alpha / 2.0))

        if self.n_reps <= 1:
            result = crossfit_estimate(data, self.k_folds, fitter,
                                       seed=self.seed, alpha_level=self.alpha)
            self.reps_ = [result]
            self.median_ = None
            psi, sigma2 = result.psi_hat, result.sigma2_hat
        else:
            self.reps_ = [
                crossfit_estimate(data, self.k_folds, fitter,
                                  seed=self.seed + 1000 + s,
                                  alpha_level=self.alpha)
                for s in range(1, self.n_reps + 1)
            ]
            self.median_ = median_adjust(
                [(r.psi_hat, r.sigma2_hat) for r in self.reps_])
            psi, sigma2 = self.median_.psi_median, self.median_.sigma2_median

        self.result_ = self.reps_[0]
        self.influence_values_ = self.result_.influence_values
        self.psi_hat_ = float(psi)
        self.sigma2_hat_ = float(sigma2)
        self.se_ = float(np.sqrt(sigma2 / data.n))
        half = z * self.se_
        self.ci_ = (self.psi_hat_ - half, self.psi_hat_ + half)
        if self.bootstrap_b:
            var, ci = multiplier_bootstrap(
                self.influence_values_, self.bootstrap_b,
                seed=self.seed + 1, alpha_level=self.alpha,
                center=self.psi_hat_)
            self.bootstrap_ = {"variance": var, "ci": ci}
        else:
            self.bootstrap_ = None
        self.n_ = data.n
        return self
