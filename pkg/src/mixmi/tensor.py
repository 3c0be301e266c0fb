"""Tensor construction and views for multivariable clinical time series.

Measurements live in a patients x variables x time-index array with an
observed mask; measurement times live in a parallel array of the same
shape. Ingestion turns long-format records into equal-length, z-scored
tensors; view helpers slice out the per-fiber regression designs that
the mixture models consume.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UntrainableFiberError

STD_ROUNDTRIP_TOL = 1e-12


@dataclass
class MeasurementTensor:
    """values: (P, V, B) float array, NaN where a missing cell has not
    been filled yet; observed: (P, V, B) bool, True = originally
    observed. Optional labels preserve ingestion identity for output."""
    values: np.ndarray
    observed: np.ndarray
    patient_ids: list | None = None
    variables: list | None = None

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "MeasurementTensor":
        return MeasurementTensor(self.values.copy(), self.observed.copy(),
                                 self.patient_ids, self.variables)

    def validate(self) -> None:
        if self.values.ndim != 3 or self.observed.shape != self.values.shape:
            raise DataError("values and observed must be matching 3-D arrays")
        P, V, B = self.values.shape
        if P < 1 or V < 2 or B < 2:
            raise DataError(
                f"tensor needs P >= 1, V >= 2, B >= 2, got ({P}, {V}, {B})")
        if self.observed.dtype != np.bool_:
            raise DataError("observed mask must be boolean")
        if not np.all(np.isfinite(self.values[self.observed])):
            raise DataError("observed cells must hold finite values")
        if not self.observed.any(axis=2).all():
            raise DataError("every (patient, variable) fiber needs >= 1 observed value")


@dataclass
class TimeTensor:
    """times: (P, V, B) float array, complete. Ingested tensors share
    times across variables; synthetically warped ones need not."""
    times: np.ndarray

    def copy(self) -> "TimeTensor":
        return TimeTensor(self.times.copy())

    def validate(self, shared_across_variables: bool = True,
                 monotone: bool = True) -> None:
        if self.times.ndim != 3:
            raise DataError("times must be a 3-D array")
        if not np.all(np.isfinite(self.times)):
            raise DataError("time tensor must be complete and finite")
        if monotone and np.any(np.diff(self.times, axis=2) <= 0):
            raise DataError("times must be strictly increasing along the time axis")
        if shared_across_variables and self.times.shape[1] > 1:
            if not np.all(self.times == self.times[:, :1, :]):
                raise DataError("times must agree across variables within a patient")


@dataclass(frozen=True)
class StandardizationParams:
    mean: np.ndarray   # (V,)
    std: np.ndarray    # (V,), all > 0
    variables: list | None = None


@dataclass(frozen=True)
class FiberRows:
    """Per-patient regression inputs for one (v, b) fiber, rows aligned
    with patient_ids. rows = [cross_inputs | temporal_inputs], the
    cross-sectional part first, both parts in ascending index order
    with the target's own variable / time index removed."""
    v: int
    b: int
    rows: np.ndarray             # (N, (V-1)+(B-1))
    cross_inputs: np.ndarray     # (N, V-1)
    temporal_inputs: np.ndarray  # (N, B-1)
    temporal_times: np.ndarray   # (N, B-1)
    target_times: np.ndarray     # (N,)
    patient_ids: np.ndarray      # (N,) indices into the tensor's P axis


@dataclass(frozen=True)
class TrainingSlice(FiberRows):
    """FiberRows restricted to patients whose target cell is observed,
    plus those targets."""
    target: np.ndarray = field(default_factory=lambda: np.empty(0))  # (N,)


def assemble_row_V(tensor: MeasurementTensor, p: int, v: int, b: int) -> np.ndarray:
    """The length (V-1)+(B-1) input vector for cell (p, v, b): other
    variables at time index b, then the target variable at other time
    indices. Never contains the target cell itself."""
    P, V, B = tensor.shape
    vals = tensor.values[p]
    cross = np.delete(vals[:, b], v)
    temporal = np.delete(vals[v, :], b)
    row = np.concatenate([cross, temporal])
    if not np.all(np.isfinite(row)):
        raise ValueError(f"unfilled cells in inputs for ({p}, {v}, {b})")
    return row


def fiber_rows(tensor: MeasurementTensor, times: TimeTensor, v: int, b: int,
               patient_ids: np.ndarray | None = None) -> FiberRows:
    """Batched assemble_row_V plus the temporal times needed by the GP
    component, for the given patients (default: all)."""
    P, V, B = tensor.shape
    if patient_ids is None:
        pats = np.arange(P)
    else:
        pats = np.asarray(patient_ids, dtype=int)
    vals = tensor.values[pats]                      # (N, V, B)
    other_v = [u for u in range(V) if u != v]
    other_b = [c for c in range(B) if c != b]
    cross = vals[:, other_v, b]                     # (N, V-1)
    temporal = vals[:, v, :][:, other_b]            # (N, B-1)
    t_pv = times.times[pats, v, :]                  # (N, B)
    rows = np.concatenate([cross, temporal], axis=1)
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"unfilled cells in fiber ({v}, {b}) inputs")
    return FiberRows(v=v, b=b, rows=rows, cross_inputs=cross,
                     temporal_inputs=temporal, temporal_times=t_pv[:, other_b],
                     target_times=t_pv[:, b], patient_ids=pats)


def training_slice(tensor: MeasurementTensor, times: TimeTensor,
                   v: int, b: int) -> TrainingSlice:
    """Training design for fiber (v, b): rows only for patients whose
    target is observed; input cells carry current working values."""
    obs = tensor.observed[:, v, b]
    pats = np.flatnonzero(obs)
    if pats.size == 0:
        raise UntrainableFiberError(f"no observed targets in fiber ({v}, {b})")
    base = fiber_rows(tensor, times, v, b, pats)
    target = tensor.values[pats, v, b]
    return TrainingSlice(v=v, b=b, rows=base.rows, cross_inputs=base.cross_inputs,
                         temporal_inputs=base.temporal_inputs,
                         temporal_times=base.temporal_times,
                         target_times=base.target_times,
                         patient_ids=pats, target=target)


def standardize(tensor: MeasurementTensor,
                params: StandardizationParams | None = None
                ) -> tuple[MeasurementTensor, StandardizationParams]:
    """Z-score each variable using mean/std over its observed cells
    (population std). Unobserved-but-filled cells are transformed with
    the same affine map; NaN holes stay NaN."""
    P, V, B = tensor.shape
    if params is None:
        mean = np.empty(V)
        std = np.empty(V)
        for v in range(V):
            obs_vals = tensor.values[:, v, :][tensor.observed[:, v, :]]
            if obs_vals.size == 0:
                raise DataError(f"variable {_var_name(tensor, v)} has no observed values")
            mean[v] = obs_vals.mean()
            std[v] = obs_vals.std()
            if std[v] <= 0:
                raise DataError(
                    f"variable {_var_name(tensor, v)} is constant (zero variance)")
        params = StandardizationParams(mean=mean, std=std, variables=tensor.variables)
    scaled = (tensor.values - params.mean[None, :, None]) / params.std[None, :, None]
    return (MeasurementTensor(scaled, tensor.observed.copy(), tensor.patient_ids,
                              tensor.variables), params)


def destandardize(tensor: MeasurementTensor,
                  params: StandardizationParams) -> MeasurementTensor:
    """Inverse of standardize; round-trips observed cells to 1e-12."""
    raw = tensor.values * params.std[None, :, None] + params.mean[None, :, None]
    return MeasurementTensor(raw, tensor.observed.copy(), tensor.patient_ids,
                             tensor.variables)


def _var_name(tensor: MeasurementTensor, v: int) -> str:
    if tensor.variables is not None:
        return str(tensor.variables[v])
    return f"#{v}"


def tensorize(records, target_b="auto"):
    """Build standardized tensors from long-format records
    (patient_id, time, variable, value); value None/NaN marks a missing
    measurement at a prescribed time.

    Patients with fewer than target_b time points are excluded, longer
    ones truncated to their first target_b time points, and patients
    left with a completely unobserved variable fiber are excluded.
    "auto" sets target_b to the mean time-point count, rounded down.
    Returns (MeasurementTensor, TimeTensor, StandardizationParams).
    """
    patients: dict = {}
    var_names: set = set()
    for rec in records:
        if len(rec) != 4:
            raise DataError(f"expected 4-field records, got {rec!r}")
        pid, time, var, value = rec
        time = float(time)
        entry = patients.setdefault(pid, {"times": [], "cells": {}})
        tl = entry["times"]
        if not tl or time != tl[-1]:
            if tl and time <= tl[-1]:
                raise DataError(f"non-monotone times for patient {pid}")
            tl.append(time)
        var_names.add(str(var))
        if value is not None and not (isinstance(value, float) and np.isnan(value)):
            key = (time, str(var))
            if key in entry["cells"]:
                warnings.warn(f"duplicate value for patient {pid} at {key}; keeping last")
            entry["cells"][key] = float(value)
    if not patients:
        raise DataError("empty input")

    if target_b == "auto":
        counts = [len(e["times"]) for e in patients.values()]
        B = int(np.floor(np.mean(counts)))
    else:
        B = int(target_b)
    if B < 2:
        raise DataError(f"target time-point count must be >= 2, got {B}")

    variables = sorted(var_names)
    V = len(variables)
    if V < 2:
        raise DataError(f"need at least 2 variables, got {V}")
    vidx = {name: i for i, name in enumerate(variables)}

    kept_ids = [pid for pid, e in patients.items() if len(e["times"]) >= B]
    P0 = len(kept_ids)
    if P0 == 0:
        raise DataError(f"no patient has {B} time points")

    values = np.full((P0, V, B), np.nan)
    observed = np.zeros((P0, V, B), dtype=bool)
    times = np.empty((P0, B))
    for i, pid in enumerate(kept_ids):
        entry = patients[pid]
        tl = entry["times"][:B]
        times[i] = tl
        for b, t in enumerate(tl):
            for name, v in vidx.items():
                val = entry["cells"].get((t, name))
                if val is not None:
                    values[i, v, b] = val
                    observed[i, v, b] = True

    full_fibers = observed.any(axis=2).all(axis=1)
    if not full_fibers.any():
        raise DataError("no patients survived ingestion filtering")
    values = values[full_fibers]
    observed = observed[full_fibers]
    times = times[full_fibers]
    kept_ids = [pid for pid, keep in zip(kept_ids, full_fibers) if keep]

    tensor = MeasurementTensor(values, observed, patient_ids=kept_ids,
                               variables=variables)
    tensor.validate()
    time_tensor = TimeTensor(np.repeat(times[:, None, :], V, axis=1))
    time_tensor.validate(shared_across_variables=True, monotone=True)
    std_tensor, params = standardize(tensor)
    return std_tensor, time_tensor, params


# ---------------------------------------------------------------------------
# CSV interchange

LONG_HEADER = ["patient_id", "time", "variable", "value"]
DENSE_HEADER = ["patient", "variable", "time_index", "value", "time"]


def read_long_csv(path) -> list:
    """Parse long-format CSV into tensorize records; empty value field
    marks a missing measurement at that prescribed time."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LONG_HEADER:
            raise DataError(
                f"expected header {','.join(LONG_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 columns")
            pid, time_s, var, value_s = (c.strip() for c in row)
            try:
                time = float(time_s)
                value = float(value_s) if value_s else None
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
            records.append((pid, time, var, value))
    return records


def read_dense_csv(path):
    """Parse dense interchange CSV into raw (unstandardized) tensors.

    Every (patient, variable, time_index) must appear exactly once;
    empty value marks a missing measurement, the time field is always
    present. Times may differ across variables (synthetic-time files)."""
    cells = {}
    patients: list = []
    variables: list = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header][:5] != DENSE_HEADER:
            raise DataError(
                f"expected header {','.join(DENSE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 5:
                raise DataError(f"line {lineno}: expected 5 columns")
            pid, var, b_s, value_s, time_s = (c.strip() for c in row[:5])
            try:
                b = int(b_s)
                time = float(time_s)
                value = float(value_s) if value_s else None
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
            if pid not in cells:
                patients.append(pid)
                cells[pid] = {}
            if (var, b) in cells[pid]:
                raise DataError(f"line {lineno}: duplicate cell ({pid}, {var}, {b})")
            if var not in variables:
                variables.append(var)
            cells[pid][(var, b)] = (value, time)

    if not cells:
        raise DataError("empty input")
    variables = sorted(variables)
    bs = {b for percell in cells.values() for (_, b) in percell}
    B = max(bs) + 1
    if sorted(bs) != list(range(B)):
        raise DataError("time_index values must cover 0..B-1")
    P, V = len(patients), len(variables)
    values = np.full((P, V, B), np.nan)
    observed = np.zeros((P, V, B), dtype=bool)
    times = np.full((P, V, B), np.nan)
    for i, pid in enumerate(patients):
        for v, var in enumerate(variables):
            for b in range(B):
                if (var, b) not in cells[pid]:
                    raise DataError(f"missing row for cell ({pid}, {var}, {b})")
                value, time = cells[pid][(var, b)]
                times[i, v, b] = time
                if value is not None:
                    values[i, v, b] = value
                    observed[i, v, b] = True

    tensor = MeasurementTensor(values, observed, patient_ids=list(patients),
                               variables=list(variables))
    time_tensor = TimeTensor(times)
    time_tensor.validate(shared_across_variables=False, monotone=True)

    full_fibers = observed.any(axis=2).all(axis=1)
    dropped = [pid for pid, keep in zip(patients, full_fibers) if not keep]
    if dropped:
        warnings.warn(f"dropping patients with an all-missing variable: {dropped}")
        tensor = MeasurementTensor(values[full_fibers], observed[full_fibers],
                                   [p for p, k in zip(patients, full_fibers) if k],
                                   list(variables))
        time_tensor = TimeTensor(times[full_fibers])
    tensor.validate()
    return tensor, time_tensor


def write_dense_csv(path, tensor: MeasurementTensor, times: TimeTensor,
                    imputed_flags: np.ndarray | None = None) -> None:
    """Write the dense interchange format; NaN values become empty
    fields. With imputed_flags (bool, tensor-shaped) an extra 0/1
    `imputed` column is appended."""
    P, V, B = tensor.shape
    pids = tensor.patient_ids or list(range(P))
    variables = tensor.variables or [f"v{v}" for v in range(V)]
    header = DENSE_HEADER + (["imputed"] if imputed_flags is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i in range(P):
            for v in range(V):
                for b in range(B):
                    val = tensor.values[i, v, b]
                    row = [str(pids[i]), str(variables[v]), str(b),
                           "" if np.isnan(val) else repr(float(val)),
                           repr(float(times.times[i, v, b]))]
                    if imputed_flags is not None:
                        row.append("1" if imputed_flags[i, v, b] else "0")
                    writer.writerow(row)
