"""Per-series Gaussian process regression with a squared-exponential
correlation kernel.

Each series is modeled as a constant (unknown) mean plus a stationary
Gaussian process with correlation R[i, j] = exp(-theta * (t_i - t_j)^2).
The best linear unbiased predictor at a query time profiles the mean
out, and the per-series signal variance is estimated from the series
itself, so the only free parameter shared across series is theta.

All fitting and prediction routines rescale each series' times to the
unit interval (the query time is mapped with the same affine transform)
before applying the kernel, which makes results invariant to shifting
or scaling the time axis. theta is therefore always expressed on the
normalized scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, GpUntrainableError, NumericalError

JITTER = 1e-8
VAR_FLOOR = 1e-8
THETA_MIN = 1e-4
THETA_MAX = 1e4
GRAD_TOL = 1e-6
ARMIJO_INIT_STEP = 1.0
ARMIJO_CONTRACTION = 0.5
ARMIJO_SLOPE = 1e-4
MIN_STEP = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """Correlation decay shared by every series of one model."""
    theta: float


@dataclass(frozen=True)
class GpPrediction:
    mean: float
    variance: float   # >= 0


def correlation_matrix(times: np.ndarray, theta: float) -> np.ndarray:
    """exp(-theta * (t_i - t_j)^2) with unit diagonal.

    Accepts a trailing time axis of any batch shape: (n,) -> (n, n),
    (N, n) -> (N, n, n). Times are used as given; callers that want
    scale invariance normalize first.
    """
    t = np.asarray(times, dtype=float)
    if theta < 0 or not np.isfinite(theta):
        raise ValueError(f"theta must be finite and nonnegative, got {theta}")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    d = t[..., :, None] - t[..., None, :]
    return np.exp(-theta * d * d)


def normalize_times(times: np.ndarray, query_times=None):
    """Affine-map each series' times onto [0, 1] (degenerate spans are
    shifted to zero). If query times are given they are mapped with the
    same per-series transform and a (times, queries) pair is returned."""
    t = np.asarray(times, dtype=float)
    tmin = t.min(axis=-1, keepdims=True)
    span = t.max(axis=-1, keepdims=True) - tmin
    scale = np.where(span > 0, span, 1.0)
    tn = (t - tmin) / scale
    if query_times is None:
        return tn
    q = np.asarray(query_times, dtype=float)
    qn = (q - np.squeeze(tmin, axis=-1)) / np.squeeze(scale, axis=-1)
    return tn, qn


def _solve_psd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched symmetric positive definite solve via Cholesky."""
    try:
        L = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"correlation matrix not positive definite: {exc}") from exc
    half = np.linalg.solve(L, rhs)
    return np.linalg.solve(np.swapaxes(L, -1, -2), half)


def _predictive(D, q, values, theta, jitter, want_grad):
    """Predictive mean g and raw variance h for a stack of series.

    D: (N, n, n) squared time differences, q: (N, n) squared distances
    to the query, values: (N, n). Returns (g, h, dg, dh) where the
    derivatives (w.r.t. theta) are None unless want_grad.
    """
    N, n = values.shape
    R = np.exp(-theta * D)
    r = np.exp(-theta * q)
    Rj = R
    if jitter:
        Rj = R + jitter * np.eye(n)

    ones = np.ones((N, n))
    rhs = np.stack([ones, values, r], axis=-1)        # (N, n, 3)
    Z = _solve_psd(Rj, rhs)
    A, Xv, Rr = Z[..., 0], Z[..., 1], Z[..., 2]       # each (N, n)

    g1 = A.sum(axis=-1)                                # 1' R^-1 1
    gx = Xv.sum(axis=-1)                               # 1' R^-1 x
    gr = Rr.sum(axis=-1)                               # 1' R^-1 r
    rRx = np.einsum("ni,ni->n", r, Xv)
    rRr = np.einsum("ni,ni->n", r, Rr)
    xRx = np.einsum("ni,ni->n", values, Xv)

    fc = 1.0 - gr
    g = fc * gx / g1 + rRx
    sf2 = (xRx - gx * gx / g1) / n                     # signal variance
    H2 = fc * fc / g1
    H3 = 1.0 - rRr + H2
    h = sf2 * H3

    if not want_grad:
        return g, h, None, None

    dR = -D * R
    dr = -q * r
    dRA = np.einsum("nij,nj->ni", dR, A)
    dRX = np.einsum("nij,nj->ni", dR, Xv)
    dRRr = np.einsum("nij,nj->ni", dR, Rr)

    dg1 = -np.einsum("ni,ni->n", A, dRA)
    dgx = -np.einsum("ni,ni->n", A, dRX)
    dxRx = -np.einsum("ni,ni->n", Xv, dRX)
    dgr = np.einsum("ni,ni->n", dr, A) - np.einsum("ni,ni->n", Rr, dRA)
    drRx = np.einsum("ni,ni->n", dr, Xv) - np.einsum("ni,ni->n", Rr, dRX)
    drRr = 2.0 * np.einsum("ni,ni->n", dr, Rr) - np.einsum("ni,ni->n", Rr, dRRr)

    dfc = -dgr
    dg = (dfc * gx + fc * dgx - fc * gx * dg1 / g1) / g1 + drRx
    dsf2 = (dxRx - (2.0 * gx * dgx * g1 - dg1 * gx * gx) / (g1 * g1)) / n
    dH2 = (2.0 * fc * dfc * g1 - dg1 * fc * fc) / (g1 * g1)
    dH3 = -drRr + dH2
    dh = dsf2 * H3 + sf2 * dH3
    return g, h, dg, dh


def _validated_stack(times, values, query_times):
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    qt = np.asarray(query_times, dtype=float)
    if t.ndim != 2 or x.shape != t.shape or qt.shape != t.shape[:1]:
        raise ValueError("expected times/values of shape (N, n) and query_times of shape (N,)")
    if t.shape[0] == 0 or t.shape[1] == 0:
        raise ValueError("empty series stack")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(qt))):
        raise NumericalError("non-finite values in GP inputs")
    srt = np.sort(t, axis=-1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise DataError("duplicate times within a series")
    tn, qn = normalize_times(t, qt)
    D = (tn[:, :, None] - tn[:, None, :]) ** 2
    q = (tn - qn[:, None]) ** 2
    return D, q, x


def blup_batch(times, values, query_times, theta: float, jitter: float = JITTER):
    """Predictive mean and variance at one query time per series.

    times/values: (N, n), query_times: (N,). Returns (means, variances)
    each of shape (N,); variances are clamped at zero.
    """
    if theta <= 0 or not np.isfinite(theta):
        raise ValueError(f"theta must be positive and finite, got {theta}")
    t = np.asarray(times, dtype=float)
    if t.ndim == 2 and t.shape[1] < 2:
        raise GpUntrainableError(
            f"series of length {t.shape[1]} cannot support GP prediction (need >= 2)")
    D, q, x = _validated_stack(times, values, query_times)
    g, h, _, _ = _predictive(D, q, x, theta, jitter, want_grad=False)
    return g, np.maximum(h, 0.0)


def blup_predict(series_times, series_values, query_time: float, theta: float,
                 jitter: float = JITTER) -> GpPrediction:
    """Single-series convenience wrapper around blup_batch."""
    t = np.asarray(series_times, dtype=float)
    x = np.asarray(series_values, dtype=float)
    if t.ndim != 1 or t.shape != x.shape:
        raise ValueError("series_times and series_values must be matching 1-D arrays")
    means, variances = blup_batch(t[None, :], x[None, :], np.array([query_time]),
                                  theta, jitter)
    return GpPrediction(mean=float(means[0]), variance=float(variances[0]))


def _weighted_objective(D, q, x, xq, w, theta, jitter, want_grad):
    """sum_p w_p ln N(xq_p | g_p(theta), h_p(theta)) and, optionally,
    its derivative w.r.t. theta. Variances are floored; a floored
    variance contributes zero derivative so the analytic gradient
    matches finite differences of the floored objective."""
    g, h_raw, dg, dh = _predictive(D, q, x, theta, jitter, want_grad)
    clamped = h_raw < VAR_FLOOR
    h = np.where(clamped, VAR_FLOOR, h_raw)
    resid = xq - g
    ll = -0.5 * np.log(2.0 * np.pi * h) - resid * resid / (2.0 * h)
    total = float(w @ ll)
    if not want_grad:
        return total, None
    dh = np.where(clamped, 0.0, dh)
    dll = -dh / (2.0 * h) + resid * dg / h + dh * resid * resid / (2.0 * h * h)
    return total, float(w @ dll)


def _validate_training(times, values, query_times, query_values, weights):
    qv = np.asarray(query_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    t = np.asarray(times, dtype=float)
    if t.ndim != 2:
        raise ValueError("times must have shape (N, n)")
    if t.shape[1] < 2:
        raise GpUntrainableError(
            f"series of length {t.shape[1]} cannot support the GP component (need >= 2)")
    if qv.shape != t.shape[:1] or w.shape != t.shape[:1]:
        raise ValueError("query_values and weights must have shape (N,)")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.all(np.isfinite(qv)):
        raise NumericalError("non-finite query values")
    D, q, x = _validated_stack(times, values, query_times)
    return D, q, x, qv, w


def weighted_loglik_and_grad(times, values, query_times, query_values, weights,
                             theta: float, jitter: float = JITTER):
    """Weighted predictive log-likelihood of the query values and its
    derivative with respect to theta.

    times/values: (N, n) conditioning series, query_times/query_values:
    (N,) held-out points, weights: (N,) nonnegative. Returns
    (loglik, dloglik_dtheta).
    """
    if theta <= 0 or not np.isfinite(theta):
        raise ValueError(f"theta must be positive and finite, got {theta}")
    D, q, x, xq, w = _validate_training(times, values, query_times, query_values, weights)
    return _weighted_objective(D, q, x, xq, w, theta, jitter, want_grad=True)


@dataclass
class ThetaFitResult:
    theta: float
    loglik: float
    iterations: int
    converged: bool


def optimize_theta(times, values, query_times, query_values, weights,
                   theta0: float, *, jitter: float = JITTER, max_iters: int = 50,
                   grad_tol: float = GRAD_TOL, trace: list | None = None) -> ThetaFitResult:
    """Maximize the weighted predictive log-likelihood over theta.

    Projected gradient ascent in ln(theta) with Armijo backtracking,
    constrained to [THETA_MIN, THETA_MAX]. Starts from theta0 and only
    ever accepts improvements, so the returned value never has a lower
    objective than the start (generalized EM safe).
    """
    if theta0 <= 0 or not np.isfinite(theta0):
        raise ValueError(f"theta0 must be positive and finite, got {theta0}")
    D, q, x, xq, w = _validate_training(times, values, query_times, query_values, weights)

    lo, hi = np.log(THETA_MIN), np.log(THETA_MAX)
    phi = float(np.clip(np.log(theta0), lo, hi))

    def value_only(p):
        total, _ = _weighted_objective(D, q, x, xq, w, np.exp(p), jitter, want_grad=False)
        return total

    obj, dtheta = _weighted_objective(D, q, x, xq, w, np.exp(phi), jitter, want_grad=True)
    best_phi, best_obj = phi, obj
    converged = False
    iterations = 0
    if trace is not None:
        trace.append((float(np.exp(phi)), obj))

    for iterations in range(1, max_iters + 1):
        grad = np.exp(phi) * dtheta    # d/dphi with phi = ln theta
        # projected gradient: at an active bound only count the inward direction
        proj = grad
        if (phi <= lo and grad < 0) or (phi >= hi and grad > 0):
            proj = 0.0
        if abs(proj) <= grad_tol:
            converged = True
            iterations -= 1
            break

        step = ARMIJO_INIT_STEP
        accepted = False
        while step >= MIN_STEP:
            cand = float(np.clip(phi + step * grad, lo, hi))
            move = cand - phi
            if move == 0.0:
                break
            cand_obj = value_only(cand)
            if cand_obj >= obj + ARMIJO_SLOPE * grad * move:
                phi = cand
                obj, dtheta = _weighted_objective(D, q, x, xq, w, np.exp(phi), jitter,
                                                  want_grad=True)
                # re-evaluated objective is authoritative (same value as cand_obj)
                obj = cand_obj
                accepted = True
                break
            step *= ARMIJO_CONTRACTION
        if trace is not None:
            trace.append((float(np.exp(phi)), obj))
        if not accepted:
            break
        if obj > best_obj:
            best_phi, best_obj = phi, obj

    return ThetaFitResult(theta=float(np.exp(best_phi)), loglik=best_obj,
                          iterations=iterations, converged=converged)


@dataclass
class GradCheckRecord:
    analytic: float
    fd: float
    rel_err: float
    theta: float
    n_series: int
    length: int


CHECK_JITTER = 1e-4   # bounds the condition number so FD can resolve 1e-5


def _gradcheck_instance(rng: np.random.Generator):
    n = int(rng.integers(3, 9))
    N = int(rng.integers(4, 13))
    gaps = rng.uniform(0.3, 1.0, size=(N, n))
    t = np.cumsum(gaps, axis=1)
    t = t * rng.uniform(0.5, 20.0) + rng.uniform(-5.0, 5.0)
    # queries on segment interiors: a query on top of a knot drives the
    # predictive variance toward 0 and the objective into noise
    k = rng.integers(0, n - 1, size=N)
    lam = rng.uniform(0.3, 0.7, size=N)
    qt = t[np.arange(N), k] * lam + t[np.arange(N), k + 1] * (1.0 - lam)
    x = rng.normal(size=(N, n))
    qv = rng.normal(size=N)
    w = rng.uniform(0.1, 1.0, size=N)
    theta = rng.uniform(0.1, 10.0)
    return t, x, qt, qv, w, theta


def gradient_check(n_instances: int = 100, seed: int = 0, *,
                   fd_step: float = 1e-3, jitter: float = CHECK_JITTER,
                   perturb: float = 0.0) -> list[GradCheckRecord]:
    """Compare the analytic theta gradient against finite differences
    in ln(theta) on random instances.

    Uses Richardson extrapolation of central differences (steps fd_step
    and fd_step/2), which cancels the leading truncation term.

    perturb injects a deliberate bias into the reported analytic
    gradient so tests can confirm the check fails when it should.
    """
    from .rng import stream

    records = []
    for i in range(n_instances):
        rng = stream(seed, "gradcheck", i)
        t, x, qt, qv, w, theta = _gradcheck_instance(rng)
        _, dtheta = weighted_loglik_and_grad(t, x, qt, qv, w, theta, jitter=jitter)
        analytic = theta * dtheta    # gradient in ln theta
        if perturb:
            analytic += perturb * (abs(analytic) + 1.0)
        phi = np.log(theta)
        args = _validate_training(t, x, qt, qv, w)

        def central(step):
            up, _ = _weighted_objective(*args, np.exp(phi + step), jitter,
                                        want_grad=False)
            dn, _ = _weighted_objective(*args, np.exp(phi - step), jitter,
                                        want_grad=False)
            return (up - dn) / (2.0 * step)

        fd = (4.0 * central(fd_step / 2.0) - central(fd_step)) / 3.0
        scale = max(abs(analytic), abs(fd))
        rel = 0.0 if scale < 1e-12 else abs(analytic - fd) / scale
        records.append(GradCheckRecord(analytic=float(analytic), fd=float(fd),
                                       rel_err=float(rel), theta=float(theta),
                                       n_series=t.shape[0], length=t.shape[1]))
    return records
