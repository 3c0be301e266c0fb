"""Chained imputation engine.

The engine owns the outer loop: M independent chains, each starting
from its own random initial fill and sweeping every (variable,
time-index) fiber in its own random order. A sweep fits the fiber's
mixture on patients with observed targets, then immediately writes
imputed values back so later fibers in the same sweep see them. After
K sweeps per chain, per-cell results are averaged across chains.

Chains never share mutable state, and every random draw comes from a
(seed, chain, purpose) stream, so results are bit-identical for a
given seed at any thread budget.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mixture
from .errors import ConfigError, GpUntrainableError, UntrainableFiberError
from .rng import stream
from .tensor import MeasurementTensor, TimeTensor, fiber_rows, training_slice

MODES = ("mixmi", "mixmi-ll", "full")


@dataclass
class ImputationConfig:
    chains: int = 5
    passes: int = 3
    mode: str = "mixmi"               # mixmi | mixmi-ll | full
    pi0_full: tuple = (1 / 3, 1 / 3, 1 / 3)
    pi0_ll: tuple = (0.5, 0.5)
    seed: int = 0
    threads: int | None = None        # None = logical cores
    em_max_iters: int = 50
    em_rel_tol: float = 1e-5
    theta_max_iters: int = 10
    diag_cov: bool = False
    fixed_inference_weights: bool = False   # ablation: fitted pi for every patient

    def validate(self) -> None:
        if self.chains < 1 or self.passes < 1:
            raise ConfigError("chains and passes must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            mixture._validate_pi(self.pi0_full, expect_k=3)
            mixture._validate_pi(self.pi0_ll, expect_k=2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class FiberFit:
    """Final fitted state of one fiber within one chain."""
    kind: str                     # "full" | "ll"
    pi: np.ndarray                # (K,)
    missing_patients: np.ndarray  # (m,) patient indices imputed in this fiber
    Pi: np.ndarray                # (m, K) inference weights used for them


@dataclass
class ChainState:
    working: MeasurementTensor
    rng: np.random.Generator
    visit_order: list
    times: TimeTensor
    fits: dict = field(default_factory=dict)      # (v, b) -> FiberFit | None
    warnings: list = field(default_factory=list)


def initial_impute(tensor: MeasurementTensor, rng: np.random.Generator,
                   times: TimeTensor | None = None,
                   visit_order: list | None = None) -> ChainState:
    """Fill every missing cell with a uniform draw from the observed
    values of the same variable, pooled over patients and times."""
    working = tensor.copy()
    P, V, B = working.shape
    for v in range(V):
        obs_mask = working.observed[:, v, :]
        pool = working.values[:, v, :][obs_mask]
        missing = ~obs_mask
        n_miss = int(missing.sum())
        if n_miss:
            draws = pool[rng.integers(0, pool.size, size=n_miss)]
            plane = working.values[:, v, :]
            plane[missing] = draws
    if visit_order is None:
        visit_order = [(v, b) for v in range(V) for b in range(B)]
    return ChainState(working=working, rng=rng, visit_order=visit_order, times=times)


def _pad_weights(w: np.ndarray) -> np.ndarray:
    """Pad 2-component weight vectors/rows with a zero GP column."""
    if w.shape[-1] == 3:
        return w
    pad_shape = w.shape[:-1] + (1,)
    return np.concatenate([w, np.zeros(pad_shape)], axis=-1)


def _fit_fiber(slice_, config: ImputationConfig):
    """Fit per config.mode, returning (params, kind) or None when the
    fiber cannot be fit as requested."""
    em_kwargs = dict(max_iters=config.em_max_iters, rel_tol=config.em_rel_tol,
                     theta_max_iters=config.theta_max_iters, diag_cov=config.diag_cov)
    if config.mode == "mixmi-ll":
        params, _ = mixture.fit_em(slice_, config.pi0_ll, **em_kwargs)
        return params, "ll"
    try:
        full_params, _ = mixture.fit_em(slice_, config.pi0_full, **em_kwargs)
    except GpUntrainableError:
        if config.mode == "full":
            return None
        params, _ = mixture.fit_em(slice_, config.pi0_ll, **em_kwargs)
        return params, "ll"
    if config.mode == "full":
        return full_params, "full"
    ll_params, _ = mixture.fit_em(slice_, config.pi0_ll, **em_kwargs)
    full_err = mixture.training_abs_error(full_params, slice_)
    ll_err = mixture.training_abs_error(ll_params, slice_)
    chosen = mixture.select_model((full_params, full_err), (ll_params, ll_err))
    return chosen, ("full" if chosen is full_params else "ll")


def simple_pass(chain: ChainState, config: ImputationConfig) -> ChainState:
    """One sweep over the chain's visit order: fit each fiber on the
    current working tensor, impute its unobserved cells, write back
    immediately. Untrainable fibers keep their current values."""
    for (v, b) in chain.visit_order:
        try:
            slice_ = training_slice(chain.working, chain.times, v, b)
        except UntrainableFiberError:
            chain.warnings.append(
                f"fiber ({v},{b}): no observed targets; keeping current values")
            chain.fits[(v, b)] = None
            continue
        fitted = _fit_fiber(slice_, config)
        if fitted is None:
            chain.warnings.append(
                f"fiber ({v},{b}): GP component untrainable in full-only mode; "
                "keeping current values")
            chain.fits[(v, b)] = None
            continue
        params, kind = fitted
        missing = np.flatnonzero(~chain.working.observed[:, v, b])
        if missing.size:
            rows = fiber_rows(chain.working, chain.times, v, b, missing)
            if config.fixed_inference_weights:
                Pi = np.tile(params.pi, (missing.size, 1))
            else:
                Pi = mixture.individualized_weights(params, rows.rows)
            chain.working.values[missing, v, b] = mixture.impute_fiber(params, rows, Pi)
        else:
            Pi = np.zeros((0, params.n_components))
        chain.fits[(v, b)] = FiberFit(kind=kind, pi=params.pi.copy(),
                                      missing_patients=missing, Pi=Pi)
    return chain


@dataclass
class WeightsReport:
    """Cross-chain summary: per-fiber mixing weights and selected model
    kind, and per-imputed-cell inference weight rows (each imputed cell
    appears exactly once). Two-component fits report 0 in the GP slot."""
    model_rows: list                  # (v, b, kind, pi: (3,))
    patient_rows: list                # (p, v, b, Pi: (3,))
    warnings: list
    variables: list | None = None
    patient_ids: list | None = None

    def _var_label(self, v: int):
        return self.variables[v] if self.variables is not None else v

    def _patient_label(self, p: int):
        return self.patient_ids[p] if self.patient_ids is not None else p

    def write_model_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("variable,time_index,model_kind,pi1,pi2,pi3\n")
            for (v, b, kind, pi) in self.model_rows:
                f.write(f"{self._var_label(v)},{b},{kind},"
                        f"{float(pi[0])!r},{float(pi[1])!r},{float(pi[2])!r}\n")

    def write_patient_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write("patient,variable,time_index,Pi1,Pi2,Pi3\n")
            for (p, v, b, Pi) in self.patient_rows:
                f.write(f"{self._patient_label(p)},{self._var_label(v)},{b},"
                        f"{float(Pi[0])!r},{float(Pi[1])!r},{float(Pi[2])!r}\n")


def _build_report(tensor: MeasurementTensor, chains: list) -> WeightsReport:
    """Aggregate final-pass fits: majority model kind per fiber (tie
    goes to the two-component variant), weights averaged over the
    chains that selected that kind."""
    P, V, B = tensor.shape
    model_rows = []
    patient_rows = []
    warnings_out = []
    for chain in chains:
        for w in chain.warnings:
            if w not in warnings_out:
                warnings_out.append(w)
    for v in range(V):
        for b in range(B):
            fits = [c.fits.get((v, b)) for c in chains]
            fits = [f for f in fits if f is not None]
            if not fits:
                continue
            n_full = sum(1 for f in fits if f.kind == "full")
            n_ll = len(fits) - n_full
            kind = "full" if n_full > n_ll else "ll"
            same = [f for f in fits if f.kind == kind]
            pi = np.mean([_pad_weights(f.pi) for f in same], axis=0)
            model_rows.append((v, b, kind, pi))
            if same[0].missing_patients.size:
                Pi_avg = np.mean([_pad_weights(f.Pi) for f in same], axis=0)
                for i, p in enumerate(same[0].missing_patients):
                    patient_rows.append((int(p), v, b, Pi_avg[i]))
    return WeightsReport(model_rows=model_rows, patient_rows=patient_rows,
                         warnings=warnings_out, variables=tensor.variables,
                         patient_ids=tensor.patient_ids)


def _run_chain(tensor: MeasurementTensor, times: TimeTensor,
               config: ImputationConfig, chain_idx: int) -> ChainState:
    """One complete chain; exposed for chain-independence tests."""
    P, V, B = tensor.shape
    order_rng = stream(config.seed, chain_idx, "order")
    all_fibers = [(v, b) for v in range(V) for b in range(B)]
    order = [all_fibers[i] for i in order_rng.permutation(len(all_fibers))]
    chain = initial_impute(tensor, stream(config.seed, chain_idx, "fill"),
                           times, order)
    for _ in range(config.passes):
        simple_pass(chain, config)
    return chain


def run(tensor: MeasurementTensor, times: TimeTensor,
        config: ImputationConfig) -> tuple[MeasurementTensor, WeightsReport]:
    """Impute every unobserved cell: M chains of K sweeps each, then
    average the chains per cell. Observed cells pass through
    bit-identical. Values stay in the scale of the input tensor."""
    config.validate()
    tensor.validate()
    times.validate(shared_across_variables=False, monotone=False)
    if times.times.shape != tensor.values.shape:
        raise ConfigError("times and values must have identical shapes")

    n_threads = config.threads or os.cpu_count() or 1
    idxs = list(range(config.chains))
    if n_threads == 1 or config.chains == 1:
        chains = [_run_chain(tensor, times, config, i) for i in idxs]
    else:
        with ThreadPoolExecutor(max_workers=min(n_threads, config.chains)) as ex:
            chains = list(ex.map(lambda i: _run_chain(tensor, times, config, i), idxs))

    out = tensor.copy()
    missing = ~tensor.observed
    if missing.any():
        stacked = np.stack([c.working.values for c in chains])
        out.values[missing] = stacked.mean(axis=0)[missing]
    return out, _build_report(tensor, chains)
