"""Synthetic data generators with analytically known ground truth, plus
exact small-instance solvers for the discrete bridge function."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .data import Dataset
from .exceptions import Infeasible, RelevanceViolation, ValidationError

_HET_PSI_DRAWS = 10_000_000
_HET_PSI_SEED = 12345
_BRIDGE_RESIDUAL_TOL = 1e-10


@dataclass
class DgpSpec:
    """Generator configuration; ``params`` carries kind-specific settings."""

    kind: str
    n: int
    tau: float = 0.0
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class TrueDgpFunctions:
    """Analytic nuisances implied by a generator: treatment odds given the
    treatment-free outcome, the bridge, treatment probability given proxies,
    the untreated conditional outcome density, and the true means."""

    omega_star: Callable
    bridge_star: Callable
    p_star: Callable
    cond_density: Callable
    psi0_star: float
    psi_star: float
    extras: dict = field(default_factory=dict)


def generate(spec: DgpSpec):
    if spec.kind == "gaussian":
        return gen_gaussian(n=spec.n, tau=spec.tau, seed=spec.seed,
                            **spec.params)
    if spec.kind == "binary":
        return gen_binary_discrete(n=spec.n, seed=spec.seed, **spec.params)
    if spec.kind == "rank-preserving":
        return gen_rank_preserving(n=spec.n, tau=spec.tau, seed=spec.seed,
                                   **spec.params)
    raise ValidationError(f"unknown DGP kind {spec.kind!r}")


def gen_gaussian(n: int, tau: float = 0.0, seed: int = 0,
                 tau_fn: Optional[Callable] = None):
    """Confounded Gaussian design: treatment flips a fair coin, the
    treatment-free outcome is N(0.25 * A, 1), and the proxy adds unit
    Gaussian measurement error.

    The implied odds of treatment given the treatment-free outcome are
    exp(0.25 y - 0.03125); the bridge is the identity; the untreated
    conditional law of the outcome given the proxy is N(w/2, 1/2).

    ``tau_fn`` makes the treated effect vary with the treatment-free outcome
    (the true effect is then a Monte Carlo average over the treated arm).
    """
    rng = np.random.default_rng(seed)
    a = rng.binomial(1, 0.5, size=n)
    y0 = 0.25 * a + rng.standard_normal(n)
    w = y0 + rng.standard_normal(n)
    if tau_fn is None:
        y = y0 + tau * a
        psi_star = float(tau)
    else:
        y = y0 + a * np.asarray(tau_fn(y0), dtype=float)
        draw_rng = np.random.default_rng(_HET_PSI_SEED)
        y0_treated = 0.25 + draw_rng.standard_normal(_HET_PSI_DRAWS)
        psi_star = float(np.mean(tau_fn(y0_treated)))
    data = Dataset.from_arrays(y, a, w.reshape(-1, 1))

    def omega_star(y_vals, x=None):
        y_vals = np.asarray(y_vals, dtype=float).reshape(-1)
        return np.exp(0.25 * y_vals - 0.03125)

    def w_odds(w_vals):
        w_vals = np.asarray(w_vals, dtype=float).reshape(-1)
        return np.exp(0.125 * w_vals - 0.015625)

    def p_star(w_vals, x=None):
        odds = w_odds(np.asarray(w_vals, dtype=float).reshape(-1))
        return odds / (1.0 + odds)

    def bridge_star(w_vals, x=None):
        w_vals = np.asarray(w_vals, dtype=float)
        return w_vals.reshape(-1) if w_vals.ndim == 1 else w_vals[:, 0]

    def cond_density(y_vals, w_val, x=None):
        return stats.norm.pdf(np.asarray(y_vals, dtype=float),
                              loc=0.5 * float(w_val), scale=np.sqrt(0.5))

    fns = TrueDgpFunctions(
        omega_star=omega_star, bridge_star=bridge_star, p_star=p_star,
        cond_density=cond_density, psi0_star=0.25, psi_star=psi_star,
        extras={"w_odds": w_odds, "cond_mean": lambda w_val: 0.5 * w_val,
                "cond_var": 0.5},
    )
    return data, fns


def binary_bridge_closed_form(p_w1_y1: float, p_w1_y0: float):
    """Bridge values (b(0), b(1)) for binary proxy and outcome."""
    delta = p_w1_y1 - p_w1_y0
    if abs(delta) < 1e-12:
        raise RelevanceViolation("proxy conditionals coincide; no bridge exists")
    b0 = -p_w1_y0 / delta
    b1 = (1.0 - p_w1_y0) / delta
    return b0, b1


def gen_binary_discrete(n: int, p_a: float = 0.5, p_y1_a1: float = 0.5,
                        p_y1_a0: float = 0.4, p_w1_y1: float = 0.8,
                        p_w1_y0: float = 0.3, seed: int = 0,
                        p_y1_treated: Optional[float] = None):
    """Finite-support joint with the proxy independent of treatment given
    the treatment-free outcome (by construction).

    ``p_y1_treated`` sets Pr(Y=1 | A=1) for the observed treated outcome;
    the default leaves the treated outcome at its treatment-free law.
    """
    for name, p in (("p_a", p_a), ("p_y1_a1", p_y1_a1), ("p_y1_a0", p_y1_a0),
                    ("p_w1_y1", p_w1_y1), ("p_w1_y0", p_w1_y0)):
        if not 0.0 < p < 1.0:
            raise ValidationError(f"{name} must lie strictly inside (0, 1)")
    b0, b1 = binary_bridge_closed_form(p_w1_y1, p_w1_y0)
    if p_y1_treated is None:
        p_y1_treated = p_y1_a1

    rng = np.random.default_rng(seed)
    a = rng.binomial(1, p_a, size=n)
    y0 = rng.binomial(1, np.where(a == 1, p_y1_a1, p_y1_a0))
    w = rng.binomial(1, np.where(y0 == 1, p_w1_y1, p_w1_y0))
    y1 = rng.binomial(1, p_y1_treated, size=n)
    y = np.where(a == 1, y1, y0).astype(float)
    data = Dataset.from_arrays(y, a, w.astype(float).reshape(-1, 1))

    def pr_y0_given_a(y_val, a_val):
        p1 = p_y1_a1 if a_val == 1 else p_y1_a0
        return p1 if y_val == 1 else 1.0 - p1

    def omega_star(y_vals, x=None):
        y_vals = np.asarray(y_vals, dtype=float).reshape(-1)
        num = np.where(y_vals == 1, p_a * p_y1_a1, p_a * (1.0 - p_y1_a1))
        den = np.where(y_vals == 1, (1.0 - p_a) * p_y1_a0,
                       (1.0 - p_a) * (1.0 - p_y1_a0))
        return num / den

    def pr_w1_given_a(a_val):
        p1 = pr_y0_given_a(1, a_val)
        return p1 * p_w1_y1 + (1.0 - p1) * p_w1_y0

    def p_star(w_vals, x=None):
        w_vals = np.asarray(w_vals, dtype=float).reshape(-1)
        pw1_a1, pw1_a0 = pr_w1_given_a(1), pr_w1_given_a(0)
        num = np.where(w_vals == 1, p_a * pw1_a1, p_a * (1.0 - pw1_a1))
        den = num + np.where(w_vals == 1, (1.0 - p_a) * pw1_a0,
                             (1.0 - p_a) * (1.0 - pw1_a0))
        return num / den

    def bridge_star(w_vals, x=None):
        w_vals = np.asarray(w_vals, dtype=float)
        flat = w_vals.reshape(-1) if w_vals.ndim == 1 else w_vals[:, 0]
        return np.where(flat == 1, b1, b0)

    def cond_density(y_vals, w_val, x=None):
        # Pr(Y = y | W = w, A = 0) via Bayes within the untreated arm
        y_vals = np.asarray(y_vals, dtype=float).reshape(-1)
        py1 = p_y1_a0
        pw = p_w1_y1 if w_val == 1 else 1.0 - p_w1_y1
        pw0 = p_w1_y0 if w_val == 1 else 1.0 - p_w1_y0
        joint1, joint0 = py1 * pw, (1.0 - py1) * pw0
        total = joint1 + joint0
        return np.where(y_vals == 1, joint1 / total, joint0 / total)

    # exact joint over (A, Y0, W): table[a, y0, w]
    table = np.empty((2, 2, 2))
    for a_val in (0, 1):
        pa = p_a if a_val == 1 else 1.0 - p_a
        for y_val in (0, 1):
            py = pr_y0_given_a(y_val, a_val)
            for w_val in (0, 1):
                pw = (p_w1_y1 if y_val == 1 else p_w1_y0)
                pw = pw if w_val == 1 else 1.0 - pw
                table[a_val, y_val, w_val] = pa * py * pw

    fns = TrueDgpFunctions(
        omega_star=omega_star, bridge_star=bridge_star, p_star=p_star,
        cond_density=cond_density, psi0_star=float(p_y1_a1),
        psi_star=float(p_y1_treated - p_y1_a1),
        extras={"joint_table": table, "bridge_values": (b0, b1),
                "pr_w1_a1": pr_w1_given_a(1)},
    )
    return data, fns


def brute_force_bridge_discrete(y_values, w_values, prob_w_given_y):
    """Minimum-norm bridge values solving sum_w b(w) Pr(W=w | Y=y, A=0) = y.

    ``prob_w_given_y`` has one row per outcome value. Raises when no
    solution fits within the residual tolerance; flags non-uniqueness when
    the system is rank deficient.
    """
    y_values = np.asarray(y_values, dtype=float).reshape(-1)
    w_values = np.asarray(w_values, dtype=float).reshape(-1)
    p = np.atleast_2d(np.asarray(prob_w_given_y, dtype=float))
    if p.shape != (y_values.size, w_values.size):
        raise ValidationError("probability table shape must be (|Y|, |W|)")
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        p = p / row_sums[:, None]
    values, _, rank, _ = np.linalg.lstsq(p, y_values, rcond=None)
    residual = float(np.max(np.abs(p @ values - y_values)))
    if residual > _BRIDGE_RESIDUAL_TOL:
        raise Infeasible(
            f"no bridge solves the moment system (residual {residual:.2e})")
    return values, bool(rank == w_values.size), residual


def gen_rank_preserving(n: int, tau: float = 1.0, seed: int = 0,
                        slope: float = 1.0, intercept: float = 0.0,
                        noise_sd: float = 0.5,
                        confounding: float = 1.0) -> Dataset:
    """Constant-effect model with a linear proxy law, so the one-shot
    regression estimator is consistent for ``tau``."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    prob = 1.0 / (1.0 + np.exp(-confounding * u))
    a = rng.binomial(1, prob)
    w = intercept + slope * u + noise_sd * rng.standard_normal(n)
    y = u + tau * a
    return Dataset.from_arrays(y, a, w.reshape(-1, 1))


def result1_identity_check(fns: TrueDgpFunctions, w_grid) -> float:
    """Max discrepancy between the proxy odds and the quadrature average of
    the outcome odds under the untreated conditional law N(w/2, 1/2)."""
    nodes, weights = np.polynomial.hermite.hermgauss(64)
    w_grid = np.asarray(w_grid, dtype=float).reshape(-1)
    max_disc = 0.0
    for w_val in w_grid:
        # E f(Z) with Z ~ N(mu, sigma^2) = sum_i weights_i f(mu + sqrt(2) sigma t_i) / sqrt(pi)
        y_nodes = 0.5 * w_val + nodes  # sqrt(2) * sqrt(1/2) = 1
        lhs = float(weights @ fns.omega_star(y_nodes) / np.sqrt(np.pi))
        p = float(fns.p_star(np.array([w_val]))[0])
        rhs = p / (1.0 - p)
        max_disc = max(max_disc, abs(lhs - rhs))
    return max_disc
