"""Per-fiber mixture model over patients.

For one (variable, time-index) fiber the target cell of each patient is
explained by one of up to three component models: a cross-sectional
linear regression on the other variables at the same time index, a
temporal linear regression on the same variable at the other time
indices, and a per-patient GP predictor. Component membership is soft;
each component also carries a Gaussian over the shared input row
(cross-sectional and temporal inputs concatenated), which is what makes
per-patient inference weights possible without seeing the target.

Everything density-related runs in the log domain with per-row
max-subtraction, so products of near-underflowing densities stay
finite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import gp, linreg
from .errors import GpUntrainableError, NumericalError
from .tensor import FiberRows, TrainingSlice

COV_RIDGE = 1e-8
EMPTY_COMPONENT_TOL = 1e-12
DENSITY_VAR_FLOOR = gp.VAR_FLOOR
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MixtureParams:
    pi: np.ndarray              # (K,), simplex
    mu: np.ndarray              # (K, D) input-row Gaussian means
    cov: np.ndarray             # (K, D, D) input-row Gaussian covariances
    lin_cross: linreg.LinearModelParams
    lin_temp: linreg.LinearModelParams
    kernel: gp.KernelParams | None   # None in the two-component variant

    @property
    def n_components(self) -> int:
        return self.pi.shape[0]


def _validate_pi(pi0, expect_k=None) -> np.ndarray:
    pi = np.asarray(pi0, dtype=float)
    if pi.ndim != 1 or pi.shape[0] not in (2, 3):
        raise ValueError("mixing weights must be a 2- or 3-vector")
    if expect_k is not None and pi.shape[0] != expect_k:
        raise ValueError(f"expected {expect_k} mixing weights, got {pi.shape[0]}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-6:
        raise ValueError(f"mixing weights must lie on the simplex, got {pi0}")
    return pi / pi.sum()


def _ridged_cov(cov: np.ndarray, diag_cov: bool) -> np.ndarray:
    dim = cov.shape[0]
    if diag_cov:
        cov = np.diag(np.diag(cov))
    scale = np.trace(cov) / dim
    if scale <= 0:
        scale = 1.0   # degenerate scatter: fall back to an absolute ridge
    out = cov.copy()
    out[np.diag_indices_from(out)] += COV_RIDGE * scale
    return out


def _weighted_moments(rows: np.ndarray, w: np.ndarray):
    wsum = w.sum()
    mu = (w[:, None] * rows).sum(axis=0) / wsum
    centered = rows - mu
    cov = (w[:, None] * centered).T @ centered / wsum
    return mu, cov


def _gauss_logpdf(rows: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = rows.shape[1]
    try:
        L = scipy.linalg.cholesky(cov, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"input-row covariance not positive definite: {exc}") from exc
    z = scipy.linalg.solve_triangular(L, (rows - mu).T, lower=True)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (d * LOG_2PI + logdet + (z * z).sum(axis=0))


def _scalar_logpdf(x: np.ndarray, mean: np.ndarray, var) -> np.ndarray:
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _component_target_stats(params: MixtureParams, slice_: TrainingSlice):
    """Per-component predictive (mean, variance) arrays for the target."""
    stats = [
        (linreg.predict(params.lin_cross, slice_.cross_inputs),
         np.full(slice_.target_times.shape, params.lin_cross.sigma2)),
        (linreg.predict(params.lin_temp, slice_.temporal_inputs),
         np.full(slice_.target_times.shape, params.lin_temp.sigma2)),
    ]
    if params.kernel is not None:
        means, variances = gp.blup_batch(slice_.temporal_times, slice_.temporal_inputs,
                                         slice_.target_times, params.kernel.theta)
        stats.append((means, np.maximum(variances, DENSITY_VAR_FLOOR)))
    return stats


def _log_scores(params: MixtureParams, slice_: TrainingSlice) -> np.ndarray:
    """(N, K) matrix of ln pi_k + ln N(row | mu_k, cov_k)
    + ln N(target | component-k mean, component-k variance)."""
    K = params.n_components
    stats = _component_target_stats(params, slice_)
    with np.errstate(divide="ignore"):
        log_pi = np.where(params.pi > 0, np.log(np.maximum(params.pi, 1e-300)), -np.inf)
    cols = []
    for k in range(K):
        mean_k, var_k = stats[k]
        cols.append(log_pi[k]
                    + _gauss_logpdf(slice_.rows, params.mu[k], params.cov[k])
                    + _scalar_logpdf(slice_.target, mean_k, var_k))
    return np.stack(cols, axis=1)


def _row_softmax(scores: np.ndarray, context: str) -> np.ndarray:
    finite_max = scores.max(axis=1)
    degenerate = ~np.isfinite(finite_max)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} degenerate rows in {context}; "
                      "falling back to uniform weights")
    shifted = np.where(degenerate[:, None], 0.0,
                       scores - np.where(degenerate, 0.0, finite_max)[:, None])
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)


def e_step(params: MixtureParams, slice_: TrainingSlice) -> np.ndarray:
    """Responsibilities: row-stochastic (N, K) posterior component
    probabilities for each training patient."""
    return _row_softmax(_log_scores(params, slice_), "responsibilities")


def loglik(params: MixtureParams, slice_: TrainingSlice) -> float:
    """Training log-likelihood sum_p ln sum_k exp(score_pk)."""
    scores = _log_scores(params, slice_)
    m = scores.max(axis=1)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    return float(np.sum(safe_m + np.log(np.exp(scores - safe_m[:, None]).sum(axis=1))))


def init_params(slice_: TrainingSlice, pi0, diag_cov: bool = False) -> MixtureParams:
    """Starting point for EM: given mixing weights, every component's
    input-row Gaussian set to the empirical moments (plus relative
    ridge), both regressions fit unweighted, theta = 1 on the
    normalized time scale."""
    pi = _validate_pi(pi0)
    K = pi.shape[0]
    rows = slice_.rows
    n = rows.shape[0]
    mu0 = rows.mean(axis=0)
    centered = rows - mu0
    cov0 = _ridged_cov(centered.T @ centered / n, diag_cov)
    ones = np.ones(n)
    lin_cross = linreg.fit_weighted(slice_.cross_inputs, slice_.target, ones)
    lin_temp = linreg.fit_weighted(slice_.temporal_inputs, slice_.target, ones)
    kernel = None
    if K == 3:
        if slice_.temporal_inputs.shape[1] < 2:
            raise GpUntrainableError(
                "temporal series too short for the GP component (need >= 2 points)")
        kernel = gp.KernelParams(theta=1.0)
    return MixtureParams(pi=pi, mu=np.repeat(mu0[None, :], K, axis=0),
                         cov=np.repeat(cov0[None, :, :], K, axis=0),
                         lin_cross=lin_cross, lin_temp=lin_temp, kernel=kernel)


def m_step(params: MixtureParams, slice_: TrainingSlice, resp: np.ndarray,
           *, theta_max_iters: int = 50, diag_cov: bool = False) -> MixtureParams:
    """Re-estimate all parameters from responsibilities: pi as
    responsibility means, Gaussians as weighted moments, regressions by
    weighted least squares, theta by gradient ascent from its previous
    value. A component whose total responsibility falls below
    EMPTY_COMPONENT_TOL keeps its previous parameters (update would be
    0/0), ending up with pi ~ 0."""
    K = params.n_components
    n = resp.shape[0]
    wsums = resp.sum(axis=0)
    pi_new = wsums / n

    mu_new = params.mu.copy()
    cov_new = params.cov.copy()
    for k in range(K):
        if wsums[k] < EMPTY_COMPONENT_TOL:
            continue
        mu_k, cov_k = _weighted_moments(slice_.rows, resp[:, k])
        mu_new[k] = mu_k
        cov_new[k] = _ridged_cov(cov_k, diag_cov)

    lin_cross = params.lin_cross
    if wsums[0] >= EMPTY_COMPONENT_TOL:
        lin_cross = linreg.fit_weighted(slice_.cross_inputs, slice_.target, resp[:, 0])
    lin_temp = params.lin_temp
    if wsums[1] >= EMPTY_COMPONENT_TOL:
        lin_temp = linreg.fit_weighted(slice_.temporal_inputs, slice_.target, resp[:, 1])

    kernel = params.kernel
    if params.kernel is not None and wsums[2] >= EMPTY_COMPONENT_TOL:
        fit = gp.optimize_theta(slice_.temporal_times, slice_.temporal_inputs,
                                slice_.target_times, slice_.target, resp[:, 2],
                                params.kernel.theta, max_iters=theta_max_iters)
        kernel = gp.KernelParams(theta=fit.theta)

    return MixtureParams(pi=pi_new, mu=mu_new, cov=cov_new,
                         lin_cross=lin_cross, lin_temp=lin_temp, kernel=kernel)


def fit_em(slice_: TrainingSlice, pi0, max_iters: int = 100, rel_tol: float = 1e-6,
           *, theta_max_iters: int = 50, diag_cov: bool = False,
           trace: list | None = None) -> tuple[MixtureParams, float]:
    """EM for one fiber mixture. The number of components follows
    len(pi0): 3 = full model, 2 = linear-only variant. Stops when the
    relative log-likelihood change drops below rel_tol or after
    max_iters; returns the iterate with the highest log-likelihood.
    The theta update is an ascent from the previous iterate, so the
    objective is non-decreasing (generalized EM)."""
    params = init_params(slice_, pi0, diag_cov)
    ll = loglik(params, slice_)
    if trace is not None:
        trace.append(ll)
    best_params, best_ll = params, ll
    for _ in range(max_iters):
        resp = e_step(params, slice_)
        params = m_step(params, slice_, resp,
                        theta_max_iters=theta_max_iters, diag_cov=diag_cov)
        ll_new = loglik(params, slice_)
        if trace is not None:
            trace.append(ll_new)
        if ll_new > best_ll:
            best_params, best_ll = params, ll_new
        if abs(ll_new - ll) / (abs(ll) + 1.0) < rel_tol:
            break
        ll = ll_new
    return best_params, best_ll


def individualized_weights(params: MixtureParams, rows: np.ndarray) -> np.ndarray:
    """Per-patient inference weights: pi_k N(row | mu_k, cov_k),
    row-normalized. Depends only on the input rows, never on targets."""
    rows = np.asarray(rows, dtype=float)
    K = params.n_components
    with np.errstate(divide="ignore"):
        log_pi = np.where(params.pi > 0, np.log(np.maximum(params.pi, 1e-300)), -np.inf)
    cols = [log_pi[k] + _gauss_logpdf(rows, params.mu[k], params.cov[k])
            for k in range(K)]
    return _row_softmax(np.stack(cols, axis=1), "inference weights")


def impute_fiber(params: MixtureParams, target_rows: FiberRows,
                 Pi: np.ndarray | None = None) -> np.ndarray:
    """Convex combination of the component predictive means with each
    patient's inference-weight row. If the GP component cannot predict
    (temporal series shorter than 2 points) its weight is renormalized
    over the remaining components."""
    if Pi is None:
        Pi = individualized_weights(params, target_rows.rows)
    preds = [linreg.predict(params.lin_cross, target_rows.cross_inputs),
             linreg.predict(params.lin_temp, target_rows.temporal_inputs)]
    Pi_used = Pi
    if params.kernel is not None:
        if target_rows.temporal_inputs.shape[1] >= 2:
            means, _ = gp.blup_batch(target_rows.temporal_times,
                                     target_rows.temporal_inputs,
                                     target_rows.target_times, params.kernel.theta)
            preds.append(means)
        else:
            denom = Pi[:, :2].sum(axis=1, keepdims=True)
            # all-GP rows have nothing left to renormalize: fall back to uniform
            Pi_used = np.where(denom > 0, Pi[:, :2] / np.maximum(denom, 1e-300), 0.5)
    combined = np.zeros(target_rows.rows.shape[0])
    for k, pred in enumerate(preds):
        combined += Pi_used[:, k] * pred
    return combined


def training_abs_error(params: MixtureParams, slice_: TrainingSlice) -> float:
    """Mean absolute error of the inference-weighted imputation on the
    training rows; the model-selection criterion."""
    preds = impute_fiber(params, slice_)
    return float(np.abs(slice_.target - preds).mean())


def select_model(full: tuple[MixtureParams, float],
                 ll: tuple[MixtureParams, float]) -> MixtureParams:
    """Pick the variant with lower training error; ties go to the
    two-component variant (cheaper inference)."""
    full_params, full_err = full
    ll_params, ll_err = ll
    return full_params if full_err < ll_err else ll_params
