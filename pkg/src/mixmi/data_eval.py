"""Evaluation protocol and synthetic data.

Masking hides a fraction of observed cells to form a test set, MASE
scores imputations against the hidden truth scaled by each series' own
variability, the time synthesizer warps measurement times so that gaps
align with value changes, and the generator draws datasets with known
structure for trend tests. A paired sign-flip permutation test compares
two methods' per-cell errors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import gp, linreg
from .errors import DataError
from .tensor import MeasurementTensor, TimeTensor, fiber_rows, training_slice


@dataclass
class MaskPlan:
    """Cells hidden for evaluation: (m, 3) int array of (p, v, b) and
    their ground-truth values, sorted by (p, v, b)."""
    cells: np.ndarray
    truth: np.ndarray

    def __len__(self) -> int:
        return self.cells.shape[0]

    def write_csv(self, path, variables=None, patient_ids=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("patient,variable,time_index,truth\n")
            for (p, v, b), t in zip(self.cells, self.truth):
                pid = patient_ids[p] if patient_ids is not None else p
                var = variables[v] if variables is not None else v
                f.write(f"{pid},{var},{b},{float(t)!r}\n")


def mask_random(tensor: MeasurementTensor, fraction: float = 0.2,
                rng: np.random.Generator | None = None
                ) -> tuple[MeasurementTensor, MaskPlan]:
    """Hide floor(fraction * #observed) observed cells, drawn uniformly
    without replacement, re-drawing any pick that would empty a
    (patient, variable) fiber. Masked cells become NaN/unobserved."""
    if not (0 < fraction < 1):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if rng is None:
        raise ValueError("an rng stream is required")
    obs_cells = np.argwhere(tensor.observed)
    target = int(np.floor(fraction * obs_cells.shape[0]))
    order = rng.permutation(obs_cells.shape[0])
    remaining = tensor.observed.sum(axis=2).astype(int)   # (P, V)
    picked = []
    for idx in order:
        if len(picked) == target:
            break
        p, v, b = obs_cells[idx]
        if remaining[p, v] <= 1:
            continue   # would empty the fiber; skip to the next draw
        remaining[p, v] -= 1
        picked.append((p, v, b))
    if len(picked) < target:
        raise DataError(
            f"cannot mask {target} cells without emptying a fiber")
    cells = np.array(picked, dtype=int).reshape(len(picked), 3)
    if len(picked):
        sort = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        cells = cells[sort]
    truth = tensor.values[cells[:, 0], cells[:, 1], cells[:, 2]].copy()
    masked = tensor.copy()
    masked.values[cells[:, 0], cells[:, 1], cells[:, 2]] = np.nan
    masked.observed[cells[:, 0], cells[:, 1], cells[:, 2]] = False
    return masked, MaskPlan(cells=cells, truth=truth)


@dataclass
class EvaluationReport:
    """MASE scores: per-variable (index, score, scored-cell count),
    the masked-count-weighted overall score, per-cell scaled errors in
    plan order, and the (patient, variable) pairs that could not be
    scored."""
    per_variable: list
    overall: float
    cell_errors: list                 # (p, v, b, abs scaled error)
    excluded: list                    # ((p, v), reason)
    not_scorable: list                # variable indices
    variables: list | None = None
    patient_ids: list | None = None

    def _labels(self, p=None, v=None):
        pid = None if p is None else (
            self.patient_ids[p] if self.patient_ids is not None else p)
        var = None if v is None else (
            self.variables[v] if self.variables is not None else v)
        return pid, var

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("variable,mase,masked_count\n")
            for v, score, count in self.per_variable:
                _, var = self._labels(v=v)
                f.write(f"{var},{float(score)!r},{count}\n")
            f.write(f"overall,{float(self.overall)!r},"
                    f"{sum(c for _, _, c in self.per_variable)}\n")

    def write_errors_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("patient,variable,time_index,abs_scaled_error\n")
            for p, v, b, err in self.cell_errors:
                pid, var = self._labels(p, v)
                f.write(f"{pid},{var},{b},{err!r}\n")

    def summary_text(self) -> str:
        lines = ["variable        MASE      masked"]
        for v, score, count in self.per_variable:
            _, var = self._labels(v=v)
            lines.append(f"{str(var):<14}  {score:<8.5f}  {count}")
        lines.append(f"{'overall':<14}  {self.overall:<8.5f}  "
                     f"{sum(c for _, _, c in self.per_variable)}")
        for (p, v), reason in self.excluded:
            pid, var = self._labels(p, v)
            lines.append(f"excluded patient={pid} variable={var}: {reason}")
        for v in self.not_scorable:
            _, var = self._labels(v=v)
            lines.append(f"variable {var}: not scorable")
        return "\n".join(lines)


def mase(plan: MaskPlan, imputed: MeasurementTensor,
         original: MeasurementTensor) -> EvaluationReport:
    """Score imputations at the masked cells.

    Each error is scaled by its own series' mean absolute consecutive
    difference: for series Y (the pre-masking observed values of that
    (patient, variable), in time order, length J) the scale is
    (J/(J-1)) * sum |Y_j - Y_{j-1}|. Pairs with J < 2 or a constant Y
    are excluded from numerator and count alike. Scores should be
    computed on destandardized values; they are taken as given here."""
    pair_scale = {}
    excluded = []
    for p, v in {(int(p), int(v)) for p, v, _ in plan.cells}:
        obs = original.observed[p, v, :]
        Y = original.values[p, v, :][obs]
        J = Y.shape[0]
        if J < 2:
            excluded.append(((p, v), "fewer than 2 observed values"))
            continue
        denom = np.abs(np.diff(Y)).sum()
        if denom == 0:
            excluded.append(((p, v), "constant observed series"))
            continue
        pair_scale[(p, v)] = (J / (J - 1)) * denom

    cell_errors = []
    sums: dict = {}
    counts: dict = {}
    for (p, v, b), truth in zip(plan.cells, plan.truth):
        key = (int(p), int(v))
        if key not in pair_scale:
            continue
        err = float(abs(imputed.values[p, v, b] - truth) / pair_scale[key])
        cell_errors.append((int(p), int(v), int(b), err))
        sums[int(v)] = sums.get(int(v), 0.0) + err
        counts[int(v)] = counts.get(int(v), 0) + 1

    masked_vars = sorted({int(v) for _, v, _ in plan.cells})
    per_variable = [(v, sums[v] / counts[v], counts[v]) for v in masked_vars
                    if v in counts]
    not_scorable = [v for v in masked_vars if v not in counts]
    total = sum(counts.values())
    overall = (sum(sums.values()) / total) if total else float("nan")
    excluded.sort()
    return EvaluationReport(per_variable=per_variable, overall=overall,
                            cell_errors=cell_errors, excluded=excluded,
                            not_scorable=not_scorable,
                            variables=original.variables,
                            patient_ids=original.patient_ids)


def synthesize_times(tensor: MeasurementTensor, times: TimeTensor,
                     d: float) -> TimeTensor:
    """Warp each (patient, variable) series' times so relative gaps
    move toward the series' relative value changes, with strength d.

    Over the observed subsequence (values x_1..x_J at times t_1..t_J):
    relative changes dx_i = |x_i - x_{i-1}| / sum|dx|, dt_i likewise,
    S = sum|t_i - t_{i-1}|; then t'_1 = t_1 and
    t'_i = t_i + sum_{j<=i} d * (dx_j - dt_j) * S. Times of missing
    entries get the shift linearly interpolated (in original time)
    between observed anchors, clamped to the nearest anchor beyond the
    ends. d = 0 returns the input exactly; series with fewer than 2
    observed values or constant values are returned unchanged. Warped
    series that lose strict monotonicity are warned about and returned
    as computed."""
    if not (0 <= d < 1):
        raise ValueError(f"d must be in [0, 1), got {d}")
    out = times.times.copy()
    if d == 0:
        return TimeTensor(out)
    P, V, B = tensor.shape
    non_monotone = []
    for p in range(P):
        for v in range(V):
            obs = tensor.observed[p, v, :]
            if obs.sum() < 2:
                continue
            x = tensor.values[p, v, :][obs]
            t = times.times[p, v, :][obs]
            dx = np.abs(np.diff(x))
            if dx.sum() == 0:
                continue
            dt = np.abs(np.diff(t))
            S = dt.sum()
            rel_x = dx / dx.sum()
            rel_t = dt / S
            shift_obs = np.concatenate([[0.0], np.cumsum(d * (rel_x - rel_t) * S)])
            shift_all = np.interp(times.times[p, v, :], t, shift_obs)
            out[p, v, :] = times.times[p, v, :] + shift_all
            if np.any(np.diff(out[p, v, :]) <= 0):
                non_monotone.append((p, v))
    if non_monotone:
        warnings.warn(
            f"synthetic times not strictly increasing for series: {non_monotone}")
    return TimeTensor(out)


def permutation_test(errors_a, errors_b, replicates: int = 1000,
                     rng: np.random.Generator | None = None,
                     alternative: str = "two-sided") -> float:
    """Paired sign-flip permutation test on the mean difference.

    alternative: "two-sided" (default), "less" (mean(a) < mean(b)), or
    "greater". p = (1 + #{replicates at least as extreme}) /
    (replicates + 1)."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("need two equal-length non-empty error vectors")
    if rng is None:
        raise ValueError("an rng stream is required")
    if alternative not in ("two-sided", "less", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    diffs = a - b
    obs = diffs.mean()
    signs = rng.integers(0, 2, size=(replicates, diffs.size)) * 2 - 1
    stats = (signs * diffs).mean(axis=1)
    if alternative == "two-sided":
        hits = np.sum(np.abs(stats) >= abs(obs))
    elif alternative == "less":
        hits = np.sum(stats <= obs)
    else:
        hits = np.sum(stats >= obs)
    return float((1 + hits) / (replicates + 1))


# ---------------------------------------------------------------------------
# Synthetic data generation

def _patient_times(P: int, B: int, rng: np.random.Generator,
                   shared: bool) -> np.ndarray:
    """(P, B) strictly increasing times, optionally one grid for all.

    Per-patient schedules draw log-uniform gaps (ratios up to 100:1),
    the irregular-encounter regime where a per-series smoother carries
    information a pooled regression cannot."""
    if shared:
        gaps = rng.uniform(0.5, 1.5, size=B)
        t = np.cumsum(gaps)
        return np.repeat(t[None, :], P, axis=0)
    gaps = np.exp(rng.uniform(np.log(0.02), np.log(2.0), size=(P, B)))
    return np.cumsum(gaps, axis=1)


def _gp_series(times_norm: np.ndarray, theta: float, rng: np.random.Generator,
               n_series: int) -> np.ndarray:
    """(n_series, B) zero-mean unit-scale GP draws on normalized times."""
    R = gp.correlation_matrix(times_norm, theta) + 1e-9 * np.eye(times_norm.shape[-1])
    L = np.linalg.cholesky(R)
    z = rng.normal(size=(n_series, times_norm.shape[-1]))
    if L.ndim == 2:
        return z @ L.T
    return np.einsum("nij,nj->ni", L, z)


def generate_simdata(P: int, V: int, B: int, missing_fraction: float,
                     mode: str, rng: np.random.Generator, *,
                     pi_true=(0.4, 0.3, 0.3), theta: float = 4.0,
                     noise: float = 0.1, time_misalignment: float = 0.0):
    """Draw a dataset with known structure.

    Modes: "linear-cross" ties variables together at each time index
    through a shared latent factor; "gp-temporal" draws smooth
    per-series GP curves with decay theta (on per-series normalized
    times); "mixed" assigns each patient a component label from pi_true
    and uses the matching recipe (cross factor / linear-in-time /
    GP curve). Cells are then removed completely at random, never
    emptying a (patient, variable) fiber. Returns the masked tensor,
    the time tensor, and a ground-truth dict (full values, labels,
    generator parameters).

    time_misalignment (gp-temporal only) blends the recorded times away
    from the latent schedule the curves were drawn on: 0 records the
    latent times themselves, 1 records an independent schedule with the
    same endpoints. Misaligned recorded times are what value-aligned
    synthetic times are meant to repair."""
    if P < 1 or V < 2 or B < 2:
        raise DataError(f"infeasible size ({P}, {V}, {B})")
    if mode not in ("linear-cross", "gp-temporal", "mixed"):
        raise DataError(f"unknown generative mode {mode!r}")
    if not (0 <= missing_fraction < 1):
        raise DataError(f"missing fraction must be in [0, 1), got {missing_fraction}")

    var_mean = np.arange(V, dtype=float)          # separate raw scales
    var_scale = np.linspace(1.0, 1.6, V)
    truth: dict = {"mode": mode, "theta": theta, "var_mean": var_mean,
                   "var_scale": var_scale, "noise": noise}

    if mode == "linear-cross":
        t = _patient_times(P, B, rng, shared=False)
        z = rng.normal(size=(P, 1, B))
        values = var_mean[None, :, None] + var_scale[None, :, None] * z \
            + noise * rng.normal(size=(P, V, B))
        truth["latent"] = z[:, 0, :]
    elif mode == "gp-temporal":
        if not (0 <= time_misalignment <= 1):
            raise DataError(
                f"time misalignment must be in [0, 1], got {time_misalignment}")
        s = _patient_times(P, B, rng, shared=False)
        tn = gp.normalize_times(s)
        base_mean = var_mean[None, :] + 0.3 * rng.normal(size=(P, V))
        curves = _gp_series(np.repeat(tn[:, None, :], V, axis=1).reshape(P * V, B),
                            theta, rng, P * V).reshape(P, V, B)
        values = base_mean[:, :, None] + var_scale[None, :, None] * curves \
            + noise * rng.normal(size=(P, V, B))
        t = s
        if time_misalignment > 0:
            u = _patient_times(P, B, rng, shared=False)
            # pin the scrambled schedule to each patient's span, then blend
            u = u - u[:, :1]
            u = u / u[:, -1:] * (s[:, -1:] - s[:, :1]) + s[:, :1]
            t = (1.0 - time_misalignment) * s + time_misalignment * u
        truth["series_mean"] = base_mean
        truth["curves"] = curves
        truth["latent_times"] = s
    else:
        pi_true = np.asarray(pi_true, dtype=float)
        labels = rng.choice(len(pi_true), size=P, p=pi_true / pi_true.sum())
        t = _patient_times(P, B, rng, shared=True)
        tn = gp.normalize_times(t)
        values = np.empty((P, V, B))
        for p in range(P):
            if labels[p] == 0:
                z = rng.normal(size=B)
                values[p] = var_mean[:, None] + var_scale[:, None] * z[None, :] \
                    + noise * rng.normal(size=(V, B))
            elif labels[p] == 1:
                slope = 1.5 * rng.normal(size=V)
                offset = var_mean + 0.5 * rng.normal(size=V)
                values[p] = offset[:, None] + slope[:, None] * tn[p][None, :] \
                    + noise * rng.normal(size=(V, B))
            else:
                curves = _gp_series(tn[p], theta, rng, V)
                values[p] = var_mean[:, None] + var_scale[:, None] * curves \
                    + noise * rng.normal(size=(V, B))
        truth["labels"] = labels
        truth["pi"] = pi_true

    truth["values"] = values.copy()
    tensor = MeasurementTensor(values.copy(), np.ones((P, V, B), dtype=bool),
                               patient_ids=[f"p{i:04d}" for i in range(P)],
                               variables=[f"var{v}" for v in range(V)])
    times = TimeTensor(np.repeat(t[:, None, :], V, axis=1))
    if missing_fraction > 0:
        tensor, plan = mask_random(tensor, missing_fraction, rng)
        truth["removed"] = plan
    return tensor, times, truth


# ---------------------------------------------------------------------------
# Reference imputers built from the same parts, for benchmark comparisons

def impute_mean(tensor: MeasurementTensor) -> MeasurementTensor:
    """Each missing cell = mean of its variable's observed values."""
    out = tensor.copy()
    P, V, B = out.shape
    for v in range(V):
        obs = out.observed[:, v, :]
        fill = out.values[:, v, :][obs].mean()
        plane = out.values[:, v, :]
        plane[~obs] = fill
    return out


def impute_single_component(tensor: MeasurementTensor, times: TimeTensor,
                            kind: str, passes: int = 2,
                            theta_max_iters: int = 10) -> MeasurementTensor:
    """Chained imputation with exactly one predictor everywhere:
    kind "cross" (other variables, same time), "temporal" (same
    variable, other times) or "gp" (per-series BLUP with one shared
    decay per fiber). Deterministic mean start, fixed sweep order."""
    if kind not in ("cross", "temporal", "gp"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    working = impute_mean(tensor)
    P, V, B = working.shape
    for _ in range(passes):
        for v in range(V):
            for b in range(B):
                missing = np.flatnonzero(~working.observed[:, v, b])
                slice_ = training_slice(working, times, v, b)
                ones = np.ones(slice_.target.shape[0])
                if not missing.size:
                    continue
                rows = fiber_rows(working, times, v, b, missing)
                if kind == "cross":
                    params = linreg.fit_weighted(slice_.cross_inputs, slice_.target, ones)
                    pred = linreg.predict(params, rows.cross_inputs)
                elif kind == "temporal":
                    params = linreg.fit_weighted(slice_.temporal_inputs, slice_.target, ones)
                    pred = linreg.predict(params, rows.temporal_inputs)
                else:
                    fit = gp.optimize_theta(slice_.temporal_times, slice_.temporal_inputs,
                                            slice_.target_times, slice_.target, ones,
                                            1.0, max_iters=theta_max_iters)
                    pred, _ = gp.blup_batch(rows.temporal_times, rows.temporal_inputs,
                                            rows.target_times, fit.theta)
                working.values[missing, v, b] = pred
    return working
