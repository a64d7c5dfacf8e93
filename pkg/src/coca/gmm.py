"""Parametric estimation of the treated-effect via stacked moment systems.

Three moment systems are supported: treatment-odds weighting ("eps"),
outcome bridge ("bridge"), and their doubly robust combination ("dr").
Estimation is two-step penalized GMM with a sandwich variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .data import Dataset
from .exceptions import (
    AllCandidatesFailed,
    CocaError,
    DimensionMismatch,
    ValidationError,
)
from .kernels import regularized_pinv_solve

_LOG_ODDS_CAP = 700.0  # keeps exp finite so 0 * omega stays 0 for treated units
_OPT_MAX_ITER = 500
_OPT_DECREASE_TOL = 1e-10
_JAC_STEP = 1e-5

DEFAULT_LAMBDA_CANDIDATES = tuple(10.0 ** e for e in
                                  (-5.0, -4.5, -4.0, -3.5, -3.0, -2.5, -2.0))


# --- bases -------------------------------------------------------------------

@dataclass
class BasisSpec:
    """Feature maps for the log-odds model, the bridge model and their
    instrument vectors.

    ``s_y(y, x)`` and ``r_w(w, x)`` parameterize and instrument the odds;
    ``s_w(w, x)`` and ``r_y(y, x)`` do the same for the bridge. Instrument
    dimension must weakly exceed the matching parameter dimension.
    """

    s_y: Callable
    s_w: Callable
    r_y: Callable
    r_w: Callable
    alpha_y_index: Optional[int] = 1  # column of s_y linear in y, for reporting


def _ones(n):
    return np.ones((n, 1))


def default_basis() -> BasisSpec:
    """Linear odds/bridge bases with interaction instruments."""
    def s_y(y, x):
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return np.column_stack([_ones(len(y)), y, x])

    def r_y(y, x):
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return np.column_stack([_ones(len(y)), y, x, y * np.asarray(x, dtype=float)])

    def s_w(w, x):
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return np.column_stack([_ones(w.shape[0]), w, x])

    def r_w(w, x):
        w = np.atleast_2d(np.asarray(w, dtype=float))
        x = np.asarray(x, dtype=float)
        prods = [w[:, i:i + 1] * x for i in range(w.shape[1])]
        return np.column_stack([_ones(w.shape[0]), w, x] + prods)

    return BasisSpec(s_y=s_y, s_w=s_w, r_y=r_y, r_w=r_w, alpha_y_index=1)


def empty_odds_basis(base: Optional[BasisSpec] = None) -> BasisSpec:
    """No odds parameters and no odds instruments: odds fixed at one.

    With the eps moment system this yields the crude arm-mean contrast.
    """
    base = base or default_basis()

    def s_y(y, x):
        return np.empty((np.asarray(y).reshape(-1).shape[0], 0))

    def r_w(w, x):
        return np.empty((np.atleast_2d(np.asarray(w)).shape[0], 0))

    return replace(base, s_y=s_y, r_w=r_w, alpha_y_index=None)


def mean_proxy_feature(w) -> np.ndarray:
    """Default sensitivity direction: the mean of the proxy columns."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return w.mean(axis=1)


@dataclass
class MomentSpec:
    """Which moment system to stack, with which bases, and an optional
    proxy-in-odds sensitivity offset."""

    kind: str
    basis: BasisSpec = field(default_factory=default_basis)
    sensitivity_alpha_w: float = 0.0
    sensitivity_feature: Callable = mean_proxy_feature

    def __post_init__(self):
        if self.kind not in ("eps", "bridge", "dr"):
            raise ValidationError(f"unknown moment kind {self.kind!r}")
        if self.sensitivity_alpha_w != 0.0 and self.kind == "bridge":
            raise ValidationError("sensitivity offset requires an odds model")


class _Design:
    """Basis matrices evaluated once per dataset."""

    def __init__(self, data: Dataset, spec: MomentSpec):
        self.s_y = np.atleast_2d(np.asarray(spec.basis.s_y(data.y, data.x), dtype=float))
        self.s_w = np.atleast_2d(np.asarray(spec.basis.s_w(data.w, data.x), dtype=float))
        self.r_y = np.atleast_2d(np.asarray(spec.basis.r_y(data.y, data.x), dtype=float))
        self.r_w = np.atleast_2d(np.asarray(spec.basis.r_w(data.w, data.x), dtype=float))
        self.sens = np.asarray(spec.sensitivity_feature(data.w), dtype=float).reshape(-1)
        self.p_a = self.s_y.shape[1]
        self.p_e = self.s_w.shape[1]
        if spec.kind in ("eps", "dr") and self.r_w.shape[1] < self.p_a:
            raise DimensionMismatch("dim(r_w) must be >= dim(s_y)")
        if spec.kind in ("bridge", "dr") and self.r_y.shape[1] < self.p_e:
            raise DimensionMismatch("dim(r_y) must be >= dim(s_w)")

    def theta_dim(self, kind: str) -> int:
        if kind == "eps":
            return 2 + self.p_a
        if kind == "bridge":
            return 2 + self.p_e
        return 2 + self.p_a + self.p_e

    def unpack(self, theta: np.ndarray, kind: str):
        psi1, psi0 = theta[0], theta[1]
        if kind == "eps":
            return psi1, psi0, theta[2:2 + self.p_a], None
        if kind == "bridge":
            return psi1, psi0, None, theta[2:2 + self.p_e]
        return (psi1, psi0, theta[2:2 + self.p_a],
                theta[2 + self.p_a:2 + self.p_a + self.p_e])


def _odds_values(design: _Design, alpha, alpha_w: float) -> np.ndarray:
    z = design.s_y @ alpha if design.p_a else np.zeros(design.s_y.shape[0])
    z = z + alpha_w * design.sens
    return np.exp(np.minimum(z, _LOG_ODDS_CAP))


def moment_matrix(data: Dataset, theta, spec: MomentSpec,
                  design: Optional[_Design] = None) -> np.ndarray:
    """Per-unit stacked moment rows g(O_i; theta), shape (n, dim_g)."""
    design = design or _Design(data, spec)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    a = data.a.astype(float)
    y = data.y
    psi1, psi0, alpha, eta = design.unpack(theta, spec.kind)
    blocks = [a * (y - psi1)]
    if spec.kind == "eps":
        omega = _odds_values(design, alpha, spec.sensitivity_alpha_w)
        blocks.append((1.0 - a) * omega * (y - psi0))
        blocks.append((((1.0 - a) * omega - a))[:, None] * design.r_w)
    elif spec.kind == "bridge":
        b = design.s_w @ eta
        blocks.append(a * (b - psi0))
        blocks.append(((1.0 - a) * (b - y))[:, None] * design.r_y)
    else:
        omega = _odds_values(design, alpha, spec.sensitivity_alpha_w)
        b = design.s_w @ eta
        blocks.append((1.0 - a) * omega * (y - b) + a * (b - psi0))
        blocks.append((((1.0 - a) * omega - a))[:, None] * design.r_w)
        blocks.append(((1.0 - a) * (b - y))[:, None] * design.r_y)
    cols = [blk[:, None] if blk.ndim == 1 else blk for blk in blocks]
    return np.column_stack(cols)


def moment_ps(data: Dataset, theta, spec: MomentSpec) -> np.ndarray:
    if spec.kind != "eps":
        raise ValidationError("moment_ps requires an eps spec")
    return moment_matrix(data, theta, spec)


def moment_or(data: Dataset, theta, spec: MomentSpec) -> np.ndarray:
    if spec.kind != "bridge":
        raise ValidationError("moment_or requires a bridge spec")
    return moment_matrix(data, theta, spec)


def moment_dr(data: Dataset, theta, spec: MomentSpec) -> np.ndarray:
    if spec.kind != "dr":
        raise ValidationError("moment_dr requires a dr spec")
    return moment_matrix(data, theta, spec)


# --- fitting -----------------------------------------------------------------

@dataclass
class GmmFit:
    """Fitted parameters with weighting matrix and sandwich variance."""

    theta: np.ndarray
    omega_weight: np.ndarray
    sigma: np.ndarray
    jacobian: np.ndarray
    variance: np.ndarray
    psi_hat: float
    psi_se: float
    objective: float
    lam: float
    kind: str
    n: int
    flags: dict

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "psi_hat": self.psi_hat,
            "psi_se": self.psi_se,
            "objective": self.objective,
            "lambda": self.lam,
            "kind": self.kind,
            "n": self.n,
            "flags": dict(self.flags),
        }


def _central_grad(fun, x, rel=1e-6):
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        h = rel * (1.0 + abs(x[j]))
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        grad[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


def _minimize(fun, x0):
    """Deterministic quasi-Newton descent with central-difference gradients.

    Stops when the objective decrease between iterations falls below
    _OPT_DECREASE_TOL or after _OPT_MAX_ITER iterations.
    """
    state = {"prev": np.inf, "stopped": False}

    def callback(xk):
        val = fun(xk)
        if state["prev"] - val < _OPT_DECREASE_TOL:
            state["stopped"] = True
            raise StopIteration
        state["prev"] = val

    res = optimize.minimize(
        fun, np.asarray(x0, dtype=float), method="BFGS",
        jac=lambda t: _central_grad(fun, t),
        callback=callback,
        options={"maxiter": _OPT_MAX_ITER, "gtol": 1e-10},
    )
    converged = bool(res.success or state["stopped"])
    return np.asarray(res.x, dtype=float), converged


def _penalty(theta, design: _Design, kind: str) -> float:
    _, _, alpha, eta = design.unpack(np.asarray(theta, dtype=float), kind)
    pen = 0.0
    if alpha is not None and alpha.size > 1:
        pen += float(alpha[1:] @ alpha[1:])
    if eta is not None and eta.size > 1:
        pen += float(eta[1:] @ eta[1:])
    return pen


def _closed_form_eta(data: Dataset, design: _Design, basis: BasisSpec):
    """Just-identified linear bridge coefficients, available with one proxy."""
    if data.d_w != 1:
        return None
    untreated = data.a == 0
    swy = np.atleast_2d(np.asarray(
        basis.s_w(data.y.reshape(-1, 1), data.x), dtype=float))
    sww = design.s_w
    lhs = (swy[untreated].T @ sww[untreated]) / untreated.sum()
    rhs = (swy[untreated].T @ data.y[untreated]) / untreated.sum()
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return None


def _starts(data: Dataset, design: _Design, spec: MomentSpec):
    a = data.a
    psi1 = float(data.y[a == 1].mean())
    psi0 = float(data.y[a == 0].mean())
    dim = design.theta_dim(spec.kind)
    start_a = np.zeros(dim)
    start_a[0], start_a[1] = psi1, psi0
    starts = [start_a]
    if spec.kind in ("bridge", "dr"):
        eta = _closed_form_eta(data, design, spec.basis)
        if eta is not None:
            start_b = start_a.copy()
            start_b[dim - design.p_e:] = eta
            b_vals = design.s_w @ eta
            if a.sum() > 0:
                start_b[1] = float(b_vals[a == 1].mean())
            starts.append(start_b)
    return starts


def fit_gmm(data: Dataset, spec: MomentSpec, lam: float = 0.0,
            seed: int = 0) -> GmmFit:
    """Two-step penalized GMM fit of the selected moment system.

    Step one minimizes the identity-weighted objective from multiple starts;
    step two re-minimizes under the inverse moment covariance of the step-one
    solution. The sandwich variance uses a numerical Jacobian.
    """
    design = _Design(data, spec)
    n = data.n

    def make_objective(weight):
        def obj(theta):
            g = moment_matrix(data, theta, spec, design)
            gbar = g.mean(axis=0)
            return float(gbar @ weight @ gbar + lam * _penalty(theta, design, spec.kind))
        return obj

    starts = _starts(data, design, spec)
    flags = {"weight_singular": False, "nonconvergence": False,
             "jacobian_singular": False}

    def best_of(obj, start_list):
        sols = []
        for x0 in start_list:
            x, conv = _minimize(obj, x0)
            sols.append((obj(x), x, conv))
        vals = np.asarray([s[0] for s in sols])
        idx = int(np.argmin(vals))
        return sols[idx]

    dim_g = moment_matrix(data, starts[0], spec, design).shape[1]
    obj1 = make_objective(np.eye(dim_g))
    val1, theta1, conv1 = best_of(obj1, starts)

    g1 = moment_matrix(data, theta1, spec, design)
    sigma1 = (g1.T @ g1) / n
    omega2, singular = _pinv_psd(sigma1)
    flags["weight_singular"] = singular

    obj2 = make_objective(omega2)
    val2, theta2, conv2 = best_of(obj2, [theta1] + starts)
    flags["nonconvergence"] = not (conv1 and conv2)

    g2 = moment_matrix(data, theta2, spec, design)
    sigma = (g2.T @ g2) / n
    variance, psi_se, jac, jac_flag = gmm_variance(
        data, spec, theta2, omega2, design=design)
    flags["jacobian_singular"] = jac_flag
    return GmmFit(
        theta=theta2, omega_weight=omega2, sigma=sigma, jacobian=jac,
        variance=variance, psi_hat=float(theta2[0] - theta2[1]),
        psi_se=psi_se, objective=val2, lam=lam, kind=spec.kind, n=n,
        flags=flags,
    )


def _pinv_psd(mat: np.ndarray, rtol: float = 1e-12):
    """Pseudo-inverse of a symmetric PSD matrix plus a rank-deficiency flag."""
    sym = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    cutoff = rtol * float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    keep = np.abs(eigvals) > cutoff
    inv = np.where(keep, 1.0 / np.where(eigvals == 0, 1.0, eigvals), 0.0)
    return eigvecs @ (inv[:, None] * eigvecs.T), bool(np.any(~keep))


def gmm_variance(data: Dataset, spec: MomentSpec, theta, omega_weight,
                 design: Optional[_Design] = None):
    """Sandwich variance of theta and the delta-method SE of psi1 - psi0."""
    design = design or _Design(data, spec)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    n = data.n

    def gbar(t):
        return moment_matrix(data, t, spec, design).mean(axis=0)

    dim_g = gbar(theta).shape[0]
    jac = np.empty((dim_g, theta.size))
    for j in range(theta.size):
        h = _JAC_STEP * (1.0 + abs(theta[j]))
        tp = theta.copy(); tp[j] += h
        tm = theta.copy(); tm[j] -= h
        jac[:, j] = (gbar(tp) - gbar(tm)) / (2.0 * h)

    g = moment_matrix(data, theta, spec, design)
    sigma = (g.T @ g) / n
    bread = jac.T @ omega_weight @ jac
    bread_inv, singular = _pinv_psd(0.5 * (bread + bread.T))
    meat = jac.T @ omega_weight @ sigma @ omega_weight.T @ jac
    var = bread_inv @ meat @ bread_inv
    var = 0.5 * (var + var.T)
    v = np.zeros(theta.size)
    v[0], v[1] = 1.0, -1.0
    psi_var = float(v @ var @ v) / n
    return var, float(np.sqrt(max(psi_var, 0.0))), jac, singular


def cv_select_lambda(data: Dataset, spec: MomentSpec,
                     candidates: Sequence[float], seed: int = 0,
                     cv_folds: int = 10, loo: bool = False) -> float:
    """Held-out moment-norm cross-validation for the penalty weight.

    Fits on each group complement, evaluates held-out moment rows at the
    fitted parameters, and scores a candidate by the squared norm of the
    average held-out moment. Leave-one-out is available via ``loo``; the
    default batches units into ``cv_folds`` groups. Ties break to the
    smaller candidate.
    """
    if len(candidates) == 0:
        raise AllCandidatesFailed("no lambda candidates supplied")
    n = data.n
    n_groups = n if loo else min(cv_folds, n)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    group = np.empty(n, dtype=np.int64)
    group[perm] = np.arange(n) % n_groups

    design = _Design(data, spec)
    dim_g = moment_matrix(data, np.zeros(design.theta_dim(spec.kind)),
                          spec, design).shape[1]
    scores = []
    for lam in candidates:
        held = np.empty((n, dim_g))
        try:
            for c in range(n_groups):
                mask = group == c
                fit = fit_gmm(data.subset(~mask), spec, lam=lam, seed=seed)
                held[mask] = moment_matrix(data.subset(mask), fit.theta, spec)
            gbar = held.mean(axis=0)
            scores.append(float(gbar @ gbar))
        except (CocaError, np.linalg.LinAlgError):
            scores.append(np.inf)
    if not np.any(np.isfinite(scores)):
        raise AllCandidatesFailed("every lambda candidate failed to fit")
    order = sorted(range(len(candidates)), key=lambda i: (scores[i], candidates[i]))
    return float(candidates[order[0]])


def parametric_odds(fit: GmmFit, basis: BasisSpec) -> Callable:
    """Odds function (y, x) -> exp(alpha' s_y(y, x)) from an eps fit."""
    if fit.kind != "eps":
        raise ValidationError("pilot odds require an eps fit")
    alpha = fit.theta[2:]

    def odds(y, x):
        feats = np.atleast_2d(np.asarray(basis.s_y(y, x), dtype=float))
        z = feats @ alpha if alpha.size else np.zeros(feats.shape[0])
        return np.exp(np.minimum(z, _LOG_ODDS_CAP))

    return odds


def gmm_psi_influence(fit: GmmFit, data: Dataset, spec: MomentSpec) -> np.ndarray:
    """Per-unit influence values of psi_hat implied by the fitted system."""
    design = _Design(data, spec)
    g = moment_matrix(data, fit.theta, spec, design)
    bread = fit.jacobian.T @ fit.omega_weight @ fit.jacobian
    bread_inv, _ = _pinv_psd(0.5 * (bread + bread.T))
    proj = bread_inv @ fit.jacobian.T @ fit.omega_weight
    v = np.zeros(fit.theta.size)
    v[0], v[1] = 1.0, -1.0
    return -(g @ proj.T) @ v
