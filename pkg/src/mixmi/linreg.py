"""Responsibility-weighted linear regression.

Both the cross-sectional and the temporal linear components of a
mixture share this solver: a ridge-stabilized weighted least-squares
fit plus the weighted residual variance. Inputs are assumed z-scored,
so no intercept is fitted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

RIDGE = 1e-6
VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class LinearModelParams:
    beta: np.ndarray   # (D,) coefficient vector
    sigma2: float      # noise variance, >= VAR_FLOOR


def fit_weighted(inputs: np.ndarray, targets: np.ndarray,
                 weights: np.ndarray) -> LinearModelParams:
    """Fit beta from (X'WX + ridge*I) beta = X'Wy and the weighted
    residual variance sigma2 = sum_i w_i r_i^2 / sum_i w_i.

    Weights must be nonnegative with a positive sum. The ridge keeps
    near-singular slices (few observed targets) solvable; sigma2 is
    floored so no component can collapse to a point mass.
    """
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.ndim != 2:
        raise ValueError("inputs must be a 2-D matrix")
    if X.shape[0] != y.shape[0] or X.shape[0] != w.shape[0]:
        raise ValueError("inputs, targets and weights disagree on N")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise NumericalError("non-finite values in weighted regression inputs")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("weights sum to zero")

    Xw = X * w[:, None]
    gram = X.T @ Xw
    gram[np.diag_indices_from(gram)] += RIDGE
    rhs = Xw.T @ y
    try:
        beta = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - ridge prevents this
        raise NumericalError(f"weighted normal equations not solvable: {exc}") from exc

    resid = y - X @ beta
    sigma2 = float((w * resid * resid).sum() / wsum)
    return LinearModelParams(beta=beta, sigma2=max(sigma2, VAR_FLOOR))


def predict(params: LinearModelParams, inputs: np.ndarray) -> np.ndarray:
    """Mean prediction X @ beta; with params.sigma2 this defines the
    component density N(y | X beta, sigma2)."""
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.beta.shape[0]:
        raise ValueError(
            f"input dimension {X.shape} does not match beta {params.beta.shape}")
    return X @ params.beta
