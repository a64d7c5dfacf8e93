"""Observed-data container, validation and deterministic fold splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DegenerateTreatmentArm,
    DimensionMismatch,
    InfeasibleStratification,
    NonBinaryTreatment,
    NonFiniteValue,
    TooFewUnits,
)

_MAX_STRATIFICATION_ATTEMPTS = 1000


@dataclass(frozen=True)
class Dataset:
    """Observed units: outcome ``y``, binary treatment ``a``, proxy outcomes
    ``w`` (n x d_w) and pre-treatment covariates ``x`` (n x d_x, d_x may be 0).

    Instances are immutable after validation and safe to share across
    parallel workers.
    """

    y: np.ndarray
    a: np.ndarray
    w: np.ndarray
    x: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_w(self) -> int:
        return self.w.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.a.sum())

    def subset(self, idx) -> "Dataset":
        """Row subset by integer or boolean index (no re-validation)."""
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.w[idx], self.x[idx])

    @staticmethod
    def from_arrays(y, a, w, x=None) -> "Dataset":
        """Build and validate a dataset from array-likes.

        ``w`` may be 1-d (a single proxy column); ``x`` may be omitted for
        covariate-free analyses.
        """
        y = np.asarray(y, dtype=float).reshape(-1)
        a_arr = np.asarray(a, dtype=float).reshape(-1)
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        if x is None:
            x = np.empty((y.shape[0], 0), dtype=float)
        else:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x.reshape(-1, 1)
        return validate_dataset(Dataset(y, a_arr, w, x))


def validate_dataset(data: Dataset) -> Dataset:
    """Check shared length, binary treatment with both arms, finiteness.

    Returns the dataset unchanged (treatment coerced to int) when all
    invariants hold.
    """
    y, a, w, x = data.y, np.asarray(data.a), data.w, data.x
    n = y.shape[0]
    if n < 2:
        raise TooFewUnits(f"need at least 2 units, got {n}")
    if a.shape[0] != n or w.shape[0] != n or x.shape[0] != n:
        raise DimensionMismatch(
            f"lengths differ: y={n}, a={a.shape[0]}, w={w.shape[0]}, x={x.shape[0]}")
    if w.ndim != 2 or w.shape[1] < 1:
        raise DimensionMismatch("w must be an n x d_w matrix with d_w >= 1")
    if x.ndim != 2:
        raise DimensionMismatch("x must be an n x d_x matrix")
    a_float = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a_float)) or not np.all(np.isin(a_float, (0.0, 1.0))):
        raise NonBinaryTreatment("treatment must contain only 0 and 1")
    a_int = a_float.astype(np.int64)
    if a_int.sum() == 0 or a_int.sum() == n:
        raise DegenerateTreatmentArm("both treated and untreated units required")
    for name, arr in (("y", y), ("w", w), ("x", x)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"non-finite entries in {name}")
    return Dataset(y, a_int, w, x)


@dataclass(frozen=True)
class FoldPartition:
    """Fold assignments in {1..k}; sizes differ by at most one and every fold
    contains both treatment arms."""

    assignments: np.ndarray
    k: int
    seed: int

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def complement_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def split_folds(n: int, k: int, a, seed: int) -> FoldPartition:
    """Balanced random fold split, rejection-resampled until every fold
    contains at least one treated and one untreated unit.

    Deterministic function of ``(n, k, seed)`` given the treatment vector.
    """
    a = np.asarray(a).astype(np.int64)
    if k < 2:
        raise TooFewUnits("k must be at least 2")
    if n < 2 * k:
        raise TooFewUnits(f"need n >= 2k, got n={n}, k={k}")
    if a.shape[0] != n:
        raise DimensionMismatch("treatment vector length must equal n")
    if a.sum() == 0 or a.sum() == n:
        raise DegenerateTreatmentArm("both arms must be nonempty")

    rng = np.random.default_rng(seed)
    for _ in range(_MAX_STRATIFICATION_ATTEMPTS):
        perm = rng.permutation(n)
        assignments = np.empty(n, dtype=np.int64)
        assignments[perm] = np.arange(n) % k + 1
        ok = True
        for fold in range(1, k + 1):
            a_fold = a[assignments == fold]
            if a_fold.sum() == 0 or a_fold.sum() == a_fold.size:
                ok = False
                break
        if ok:
            return FoldPartition(assignments, k, seed)
    raise InfeasibleStratification(
        f"no stratified split found in {_MAX_STRATIFICATION_ATTEMPTS} attempts")
