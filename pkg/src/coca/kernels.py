"""Gaussian kernel evaluation, Gram matrices, bandwidth heuristics and
regularized pseudo-inverse solves backing the kernel minimax estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateData, DimensionMismatch, NonSymmetric

PINV_RTOL = 1e-10
_MAX_BANDWIDTH_PAIRS = 1000


@dataclass(frozen=True)
class GaussianKernelParams:
    """Bandwidth of exp(-||v - v'||^2 / bandwidth)."""

    bandwidth: float

    def __post_init__(self):
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise DegenerateData(f"bandwidth must be positive, got {self.bandwidth}")


def kernel_eval(v, v_prime, params: GaussianKernelParams) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    v_prime = np.asarray(v_prime, dtype=float).reshape(-1)
    if v.shape != v_prime.shape:
        raise DimensionMismatch(f"shapes {v.shape} and {v_prime.shape} differ")
    diff = v - v_prime
    return float(np.exp(-(diff @ diff) / params.bandwidth))


def _sq_dists(rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    sq_a = np.einsum("ij,ij->i", rows_a, rows_a)
    sq_b = np.einsum("ij,ij->i", rows_b, rows_b)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * rows_a @ rows_b.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def gram_matrix(rows, params: GaussianKernelParams) -> np.ndarray:
    """Symmetric PSD kernel matrix with exact unit diagonal."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    k = np.exp(-_sq_dists(rows, rows) / params.bandwidth)
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def cross_gram(rows_a, rows_b, params: GaussianKernelParams) -> np.ndarray:
    """Kernel matrix between two point sets (m_a x m_b)."""
    rows_a = np.atleast_2d(np.asarray(rows_a, dtype=float))
    rows_b = np.atleast_2d(np.asarray(rows_b, dtype=float))
    if rows_a.shape[1] != rows_b.shape[1]:
        raise DimensionMismatch(
            f"column counts differ: {rows_a.shape[1]} vs {rows_b.shape[1]}")
    return np.exp(-_sq_dists(rows_a, rows_b) / params.bandwidth)


def median_heuristic_bandwidth(rows, seed: int = 0) -> float:
    """Median pairwise squared distance over at most 1000 seeded pairs."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    m = rows.shape[0]
    if m < 2:
        raise DegenerateData("need at least 2 rows")
    n_pairs = m * (m - 1) // 2
    if n_pairs <= _MAX_BANDWIDTH_PAIRS:
        iu, ju = np.triu_indices(m, k=1)
    else:
        rng = np.random.default_rng(seed)
        iu = rng.integers(0, m, size=_MAX_BANDWIDTH_PAIRS)
        ju = rng.integers(0, m - 1, size=_MAX_BANDWIDTH_PAIRS)
        ju = np.where(ju >= iu, ju + 1, ju)  # distinct indices per pair
    diffs = rows[iu] - rows[ju]
    d2 = np.einsum("ij,ij->i", diffs, diffs)
    med = float(np.median(d2))
    if med <= 0.0:
        positive = d2[d2 > 0]
        if positive.size == 0:
            raise DegenerateData("all sampled rows identical")
        med = float(np.median(positive))
    return med


def regularized_pinv_solve(m, b, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose solve of a symmetric system via eigendecomposition.

    Eigenvalues with |eig| <= rtol * max|eig| are treated as zero, so the
    solution is the pseudo-inverse applied to ``b``.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSymmetric("matrix must be square")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if float(np.max(np.abs(m - m.T))) > 1e-8 * scale:
        raise NonSymmetric("matrix is not symmetric within 1e-8")
    sym = 0.5 * (m + m.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    cutoff = rtol * float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    inv = np.where(np.abs(eigvals) > cutoff, 1.0 / np.where(eigvals == 0, 1.0, eigvals), 0.0)
    b = np.asarray(b, dtype=float)
    return eigvecs @ (inv[:, None] * (eigvecs.T @ b)) if b.ndim == 2 \
        else eigvecs @ (inv * (eigvecs.T @ b))


@dataclass
class ColumnStandardizer:
    """Per-column centering/scaling fitted once and reused at evaluation time.

    Columns with zero sample standard deviation are dropped, so transformed
    rows may have fewer columns than the input.
    """

    mean: np.ndarray = field(default_factory=lambda: np.empty(0))
    scale: np.ndarray = field(default_factory=lambda: np.empty(0))
    keep: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    @staticmethod
    def fit(rows) -> "ColumnStandardizer":
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        mean = rows.mean(axis=0)
        if rows.shape[0] > 1:
            scale = rows.std(axis=0, ddof=1)
        else:
            scale = np.zeros(rows.shape[1])
        keep = scale > 0
        return ColumnStandardizer(mean=mean, scale=scale, keep=keep)

    def transform(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"expected {self.mean.shape[0]} columns, got {rows.shape[1]}")
        kept = rows[:, self.keep]
        return (kept - self.mean[self.keep]) / self.scale[self.keep]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "keep": self.keep.astype(int).tolist()}

    @staticmethod
    def from_dict(d: dict) -> "ColumnStandardizer":
        return ColumnStandardizer(mean=np.asarray(d["mean"], dtype=float),
                                  scale=np.asarray(d["scale"], dtype=float),
                                  keep=np.asarray(d["keep"], dtype=int).astype(bool))
