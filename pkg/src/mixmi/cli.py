"""Command-line front end.

Subcommands wire ingestion, the imputation engine, and the evaluation
protocol into batch runs with machine-readable outputs. Every run
writes a manifest (resolved configuration, input digest, seed,
version, wall-clock, warnings). All randomness flows from --seed
through named streams, so outputs are bit-reproducible for a fixed
seed at any --threads value.

Configuration file: plain `key = value` lines (# comments allowed),
keys named like the long flags without the leading dashes. Explicit
flags override file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings

import numpy as np

from . import data_eval, engine, gp
from .errors import ConfigError, DataError, MixmiError, NumericalError
from .rng import stream
from .tensor import (destandardize, read_dense_csv, read_long_csv, standardize,
                     tensorize, write_dense_csv)

VERSION = "0.1.0"
GRADCHECK_TOL = 1e-5

CONFIG_KEYS = {
    "mode", "chains", "passes", "pi0", "seed", "threads", "fraction", "d",
    "out-dir", "b", "times-in-input", "em-max-iters", "em-rel-tol",
    "theta-max-iters", "diag-cov", "fixed-inference-weights", "replicates",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # argparse exits with 2; usage errors are exit 1 here
        raise ConfigError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="mixmi", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, with_engine=True):
        sp.add_argument("--input", help="input CSV (long format, or dense with --times-in-input)")
        sp.add_argument("--times-in-input", action="store_true", default=None,
                        help="input is the dense interchange format with explicit times")
        sp.add_argument("--b", default=None,
                        help="time points per patient for long ingestion (int or 'auto')")
        sp.add_argument("--config", default=None, help="key=value configuration file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        sp.add_argument("--out-dir", default=None, help="output directory (default .)")
        if with_engine:
            sp.add_argument("--mode", choices=["mixmi", "mixmi-ll", "full"], default=None)
            sp.add_argument("--chains", type=int, default=None)
            sp.add_argument("--passes", type=int, default=None)
            sp.add_argument("--pi0", default=None,
                            help="comma-separated initial mixing weights (3 or 2 values)")
            sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("impute", help="fill every missing cell")
    common(sp)

    sp = sub.add_parser("evaluate",
                        help="mask, impute, and score; or compare two error files")
    common(sp)
    sp.add_argument("--fraction", type=float, default=None,
                    help="fraction of observed cells to mask (default 0.2)")
    sp.add_argument("--impute-with", choices=["engine", "copy-truth"], default="engine",
                    help=argparse.SUPPRESS)
    sp.add_argument("--compare", nargs=2, metavar=("ERRORS_A", "ERRORS_B"), default=None,
                    help="two per-cell error CSVs: print a paired permutation p-value")
    sp.add_argument("--replicates", type=int, default=None,
                    help="permutation replicates for --compare (default 1000)")

    sp = sub.add_parser("synthesize", help="replace times with value-aligned synthetic ones")
    common(sp, with_engine=False)
    sp.add_argument("--d", type=float, default=None, help="warp strength in [0, 1)")

    sp = sub.add_parser("gradcheck", help="finite-difference check of the GP gradient")
    sp.add_argument("--config", default=None, help="key=value configuration file")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--perturb-gradient", type=float, default=0.0,
                    help=argparse.SUPPRESS)
    return p


def load_config(path) -> dict:
    cfg = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in CONFIG_KEYS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = value
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return cfg


def _resolve(args, cfg: dict, key: str, default, cast):
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return default


def _parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_pi0(s):
    parts = [p for p in str(s).split(",") if p.strip()]
    try:
        values = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"--pi0: {exc}") from exc
    if len(values) not in (2, 3):
        raise ConfigError("--pi0 needs 2 or 3 comma-separated values")
    return values


def _build_engine_config(args, cfg) -> engine.ImputationConfig:
    config = engine.ImputationConfig(
        chains=_resolve(args, cfg, "chains", 5, int),
        passes=_resolve(args, cfg, "passes", 3, int),
        mode=_resolve(args, cfg, "mode", "mixmi", str),
        seed=_resolve(args, cfg, "seed", 0, int),
        threads=_resolve(args, cfg, "threads", None, int),
        em_max_iters=_resolve(args, cfg, "em-max-iters", 50, int),
        em_rel_tol=_resolve(args, cfg, "em-rel-tol", 1e-5, float),
        theta_max_iters=_resolve(args, cfg, "theta-max-iters", 10, int),
        diag_cov=_resolve(args, cfg, "diag-cov", False, _parse_bool),
        fixed_inference_weights=_resolve(args, cfg, "fixed-inference-weights",
                                         False, _parse_bool),
    )
    pi0 = _resolve(args, cfg, "pi0", None, str)
    if pi0 is not None:
        values = _parse_pi0(pi0)
        if len(values) == 3:
            config.pi0_full = values
        else:
            config.pi0_ll = values
    config.validate()
    return config


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _detect_dense(path) -> bool:
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
    return header.startswith("patient,")


def _load_input(args, cfg):
    """Read the input CSV into standardized tensors. Returns
    (standardized tensor, times, standardization params)."""
    path = getattr(args, "input", None)
    if not path:
        raise ConfigError("--input is required")
    dense = _resolve(args, cfg, "times-in-input", None, _parse_bool)
    if dense is None:
        dense = _detect_dense(path)
    if dense:
        raw, times = read_dense_csv(path)
        std, params = standardize(raw)
        return std, times, params
    b = _resolve(args, cfg, "b", "auto", str)
    if b != "auto":
        try:
            b = int(b)
        except ValueError as exc:
            raise ConfigError(f"--b must be an integer or 'auto', got {b!r}") from exc
    return tensorize(read_long_csv(path), b)


def _out_path(args, cfg, name: str):
    import pathlib
    out_dir = pathlib.Path(_resolve(args, cfg, "out-dir", ".", str))
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def _write_manifest(args, cfg, command: str, started: float, caught,
                    extra: dict, outputs: list) -> None:
    manifest = {
        "command": command,
        "version": VERSION,
        "seed": _resolve(args, cfg, "seed", 0, int),
        "resolved_config": extra,
        "warnings": [str(w.message) for w in caught],
        "outputs": outputs,
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    path = getattr(args, "input", None)
    if path:
        manifest["input"] = {"path": str(path), "sha256": _sha256(path)}
    with open(_out_path(args, cfg, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_impute(args, cfg) -> int:
    started = time.monotonic()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        std, times, params = _load_input(args, cfg)
        config = _build_engine_config(args, cfg)
        out_std, report = engine.run(std, times, config)
        out_raw = destandardize(out_std, params)
        write_dense_csv(_out_path(args, cfg, "imputed.csv"), out_raw, times,
                        imputed_flags=~out_raw.observed)
        report.write_model_csv(_out_path(args, cfg, "weights_model.csv"))
        report.write_patient_csv(_out_path(args, cfg, "weights_patient.csv"))
        for w in report.warnings:
            warnings.warn(w)
    resolved = {
        "mode": config.mode, "chains": config.chains, "passes": config.passes,
        "pi0_full": list(config.pi0_full), "pi0_ll": list(config.pi0_ll),
        "threads": config.threads, "em_max_iters": config.em_max_iters,
        "em_rel_tol": config.em_rel_tol, "theta_max_iters": config.theta_max_iters,
        "diag_cov": config.diag_cov,
        "fixed_inference_weights": config.fixed_inference_weights,
        "model_kinds": sorted({kind for (_, _, kind, _) in report.model_rows}),
    }
    _write_manifest(args, cfg, "impute", started, caught, resolved,
                    ["imputed.csv", "weights_model.csv", "weights_patient.csv"])
    print(f"imputed {int((~out_raw.observed).sum())} cells -> "
          f"{_out_path(args, cfg, 'imputed.csv')}")
    return 0


def _read_errors_csv(path) -> dict:
    errors = {}
    with open(path, newline="", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "patient,variable,time_index,abs_scaled_error":
            raise DataError(f"{path}: not a per-cell error file")
        for line in f:
            if not line.strip():
                continue
            pid, var, b, err = line.rstrip("\n").split(",")
            errors[(pid, var, int(b))] = float(err)
    return errors


def _cmd_compare(args, cfg) -> int:
    started = time.monotonic()
    path_a, path_b = args.compare
    a = _read_errors_csv(path_a)
    b = _read_errors_csv(path_b)
    if set(a) != set(b):
        raise DataError("error files cover different cells; cannot pair them")
    keys = sorted(a)
    replicates = _resolve(args, cfg, "replicates", 1000, int)
    seed = _resolve(args, cfg, "seed", 0, int)
    p = data_eval.permutation_test([a[k] for k in keys], [b[k] for k in keys],
                                   replicates, stream(seed, "permutation"))
    print(f"permutation p-value: {p!r} (replicates={replicates}, n={len(keys)})")
    _write_manifest(args, cfg, "evaluate --compare", started, [],
                    {"replicates": replicates, "files": [str(path_a), str(path_b)],
                     "p_value": p}, [])
    return 0


def cmd_evaluate(args, cfg) -> int:
    if args.compare is not None:
        return _cmd_compare(args, cfg)
    started = time.monotonic()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        std, times, params = _load_input(args, cfg)
        raw = destandardize(std, params)
        fraction = _resolve(args, cfg, "fraction", 0.2, float)
        seed = _resolve(args, cfg, "seed", 0, int)
        masked_raw, plan = data_eval.mask_random(raw, fraction, stream(seed, "mask"))
        if args.impute_with == "copy-truth":
            out_raw = raw
            config = None
        else:
            masked_std, mask_params = standardize(masked_raw)
            config = _build_engine_config(args, cfg)
            out_std, _ = engine.run(masked_std, times, config)
            out_raw = destandardize(out_std, mask_params)
        report = data_eval.mase(plan, out_raw, raw)
        plan.write_csv(_out_path(args, cfg, "mask.csv"), raw.variables, raw.patient_ids)
        report.write_csv(_out_path(args, cfg, "report.csv"))
        report.write_errors_csv(_out_path(args, cfg, "errors.csv"))
    resolved = {"fraction": fraction, "masked_cells": len(plan),
                "impute_with": args.impute_with,
                "mode": config.mode if config else None,
                "overall_mase": report.overall}
    _write_manifest(args, cfg, "evaluate", started, caught, resolved,
                    ["mask.csv", "report.csv", "errors.csv"])
    print(report.summary_text())
    return 0


def cmd_synthesize(args, cfg) -> int:
    started = time.monotonic()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        d = _resolve(args, cfg, "d", None, float)
        if d is None:
            raise ConfigError("--d is required")
        if not (0 <= d < 1):
            raise ConfigError(f"--d must be in [0, 1), got {d}")
        std, times, params = _load_input(args, cfg)
        warped = data_eval.synthesize_times(std, times, d)
        raw = destandardize(std, params)
        write_dense_csv(_out_path(args, cfg, "synthesized.csv"), raw, warped)
    _write_manifest(args, cfg, "synthesize", started, caught, {"d": d},
                    ["synthesized.csv"])
    print(f"wrote {_out_path(args, cfg, 'synthesized.csv')} (d={d})")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    started = time.monotonic()
    instances = _resolve(args, cfg, "instances", 100, int)
    seed = _resolve(args, cfg, "seed", 0, int)
    if instances == 0:
        print("warning: no instances checked (vacuous pass)")
        _write_manifest(args, cfg, "gradcheck", started, [],
                        {"instances": 0, "max_rel_err": None}, [])
        return 0
    records = gp.gradient_check(instances, seed, perturb=args.perturb_gradient)
    print("instance  n   len  analytic        fd              rel_err    status")
    failures = 0
    for i, r in enumerate(records):
        ok = r.rel_err < GRADCHECK_TOL
        failures += 0 if ok else 1
        print(f"{i:8d}  {r.n_series:<3d} {r.length:<4d} {r.analytic:+.6e}  "
              f"{r.fd:+.6e}  {r.rel_err:.3e}  {'pass' if ok else 'FAIL'}")
    max_rel = max(r.rel_err for r in records)
    print(f"max relative error {max_rel:.3e} over {instances} instances: "
          f"{'PASS' if failures == 0 else f'{failures} FAILURES'}")
    _write_manifest(args, cfg, "gradcheck", started, [],
                    {"instances": instances, "max_rel_err": max_rel,
                     "failures": failures}, [])
    return 0 if failures == 0 else 3


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        dispatch = {"impute": cmd_impute, "evaluate": cmd_evaluate,
                    "synthesize": cmd_synthesize, "gradcheck": cmd_gradcheck}
        return dispatch[args.cmd](args, cfg)
    except ConfigError as exc:
        print(f"mixmi: config-error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"mixmi: data-error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mixmi: data-error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (NumericalError, MixmiError) as exc:
        print(f"mixmi: numerical-error: {_one_line(exc)}", file=sys.stderr)
        return 3


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
