"""Shared fixtures and independent oracle implementations.

The oracles here are deliberately written with plain dense linear
algebra (explicit inverses, scipy.stats densities) so that they share
no code paths with the library routines they check.
"""

import numpy as np
import scipy.stats

from mixmi.tensor import MeasurementTensor, TimeTensor


def make_complete_tensor(P, V, B, rng, patient_ids=None, variables=None):
    """Random complete tensor with shared, strictly increasing times."""
    values = rng.normal(size=(P, V, B)) + np.arange(V)[None, :, None]
    observed = np.ones((P, V, B), dtype=bool)
    t = np.cumsum(rng.uniform(0.5, 1.5, size=(P, B)), axis=1)
    tensor = MeasurementTensor(values, observed, patient_ids=patient_ids,
                               variables=variables)
    times = TimeTensor(np.repeat(t[:, None, :], V, axis=1))
    return tensor, times


def punch_holes(tensor, fraction, rng):
    """Set a fraction of cells unobserved/NaN, keeping one observed
    value per (p, v) fiber."""
    out = tensor.copy()
    P, V, B = out.shape
    for p in range(P):
        for v in range(V):
            drops = rng.random(B) < fraction
            if drops.all():
                drops[rng.integers(0, B)] = False
            out.values[p, v, drops] = np.nan
            out.observed[p, v, drops] = False
    return out


def normalize_like_gp(t, q):
    """Replicate the per-series affine [0, 1] time mapping."""
    t = np.asarray(t, dtype=float)
    tmin, tmax = t.min(), t.max()
    span = (tmax - tmin) if tmax > tmin else 1.0
    return (t - tmin) / span, (q - tmin) / span


def blup_oracle(times, values, query_time, theta, jitter=1e-8):
    """Kriging mean/variance via explicit inverses of the textbook
    formulas, on the same normalized time scale the library uses."""
    tn, qn = normalize_like_gp(times, query_time)
    x = np.asarray(values, dtype=float)
    n = x.shape[0]
    d = tn[:, None] - tn[None, :]
    R = np.exp(-theta * d * d) + jitter * np.eye(n)
    r = np.exp(-theta * (tn - qn) ** 2)
    Ri = np.linalg.inv(R)
    one = np.ones(n)
    g1 = one @ Ri @ one
    bhat = (one @ Ri @ x) / g1
    g = bhat + r @ Ri @ (x - bhat * one)
    C = x - bhat * one
    sf2 = (C @ Ri @ C) / n
    h = sf2 * (1.0 - r @ Ri @ r + (1.0 - one @ Ri @ r) ** 2 / g1)
    return g, h


def weighted_loglik_oracle(times, values, query_times, query_values,
                           weights, theta, jitter=1e-8, var_floor=1e-8):
    """Direct per-series evaluation of the weighted predictive
    log-likelihood, using blup_oracle and scipy densities."""
    total = 0.0
    for i in range(len(weights)):
        g, h = blup_oracle(times[i], values[i], query_times[i], theta, jitter)
        h = max(h, var_floor)
        total += weights[i] * scipy.stats.norm.logpdf(query_values[i], g, np.sqrt(h))
    return total


def e_step_oracle(params, slice_, var_floor=1e-8):
    """Direct Eq.-style responsibility evaluation with scipy.stats:
    softmax over ln pi_k + ln N(row) + ln N(target | component k)."""
    N = slice_.rows.shape[0]
    K = params.pi.shape[0]
    log_scores = np.empty((N, K))
    for k in range(K):
        mvn = scipy.stats.multivariate_normal(mean=params.mu[k], cov=params.cov[k])
        if k == 0:
            mean = slice_.cross_inputs @ params.lin_cross.beta
            var = np.full(N, params.lin_cross.sigma2)
        elif k == 1:
            mean = slice_.temporal_inputs @ params.lin_temp.beta
            var = np.full(N, params.lin_temp.sigma2)
        else:
            mean = np.empty(N)
            var = np.empty(N)
            for i in range(N):
                g, h = blup_oracle(slice_.temporal_times[i], slice_.temporal_inputs[i],
                                   slice_.target_times[i], params.kernel.theta)
                mean[i] = g
                var[i] = max(max(h, 0.0), var_floor)
        log_scores[:, k] = (np.log(params.pi[k]) + mvn.logpdf(slice_.rows)
                            + scipy.stats.norm.logpdf(slice_.target, mean, np.sqrt(var)))
    shifted = log_scores - log_scores.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)
