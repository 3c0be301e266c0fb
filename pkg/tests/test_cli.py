"""End-to-end command-line runs: exit codes, output files, reproducibility."""

import json

import numpy as np
import pytest

from mixmi import cli
from mixmi.data_eval import generate_simdata
from mixmi.rng import stream
from mixmi.tensor import MeasurementTensor, TimeTensor, read_dense_csv, write_dense_csv


def make_input(path, P=10, V=3, B=4, missing=0.2, seed=0):
    tens, times, truth = generate_simdata(P, V, B, missing, "mixed",
                                          stream(seed, "cli"))
    write_dense_csv(path, tens, times)
    return tens, times, truth


def run(argv):
    return cli.main([str(a) for a in argv])


# --- impute ------------------------------------------------------------------

def test_impute_fully_observed_identity(tmp_path, capsys):
    inp = tmp_path / "in.csv"
    tens, times, _ = make_input(inp, missing=0.0)
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--out-dir", out,
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    got, got_times = read_dense_csv(out / "imputed.csv")
    assert got.values == pytest.approx(tens.values, rel=1e-12, abs=1e-12)
    assert got.observed.all()
    assert np.array_equal(got_times.times, times.times)
    # every cell row carries a false imputed flag
    rows = (out / "imputed.csv").read_text().splitlines()
    assert rows[0].endswith(",imputed")
    assert all(r.endswith(",0") for r in rows[1:])


def test_impute_reruns_and_thread_budget_byte_identical(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.25, seed=1)
    blobs = []
    for name, threads in (("a", 1), ("b", 2), ("c", 1)):
        out = tmp_path / name
        rc = run(["impute", "--input", inp, "--out-dir", out,
                  "--chains", 2, "--passes", 1, "--seed", 7, "--threads", threads])
        assert rc == 0
        blobs.append(tuple((out / f).read_bytes() for f in
                           ("imputed.csv", "weights_model.csv", "weights_patient.csv")))
    assert blobs[0] == blobs[1] == blobs[2]


def test_impute_ll_mode_recorded_everywhere(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.25, seed=2)
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--out-dir", out, "--mode", "mixmi-ll",
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved_config"]["mode"] == "mixmi-ll"
    assert manifest["resolved_config"]["model_kinds"] == ["ll"]
    rows = (out / "weights_model.csv").read_text().splitlines()
    assert rows[0] == "variable,time_index,model_kind,pi1,pi2,pi3"
    assert all(r.split(",")[2] == "ll" for r in rows[1:])


def test_impute_long_format_ingestion(tmp_path):
    inp = tmp_path / "long.csv"
    lines = ["patient_id,time,variable,value"]
    for p in range(3):
        for b, t in enumerate((1.0, 2.0, 3.0)):
            for v, var in enumerate(("x", "y")):
                val = (p + 1) * 0.5 + t * (v + 1)
                lines.append(f"p{p},{t + 0.1 * p},{var},{val}")
    inp.write_text("\n".join(lines) + "\n")
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--b", "auto", "--out-dir", out,
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    got, _ = read_dense_csv(out / "imputed.csv")
    assert got.shape == (3, 2, 3)
    assert got.values[1, 0, 2] == pytest.approx(4.0, rel=1e-10)


def test_impute_pi0_flag_sets_matching_mixture(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.25, seed=3)
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--out-dir", out, "--pi0", "0.5,0.3,0.2",
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved_config"]["pi0_full"] == [0.5, 0.3, 0.2]
    rc = run(["impute", "--input", inp, "--out-dir", tmp_path / "o2",
              "--pi0", "0.7,0.3",
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    manifest = json.loads((tmp_path / "o2" / "manifest.json").read_text())
    assert manifest["resolved_config"]["pi0_ll"] == [0.7, 0.3]
    assert run(["impute", "--input", inp, "--pi0", "1,2,3,4",
                "--out-dir", tmp_path / "o3"]) == 1


# --- evaluate ----------------------------------------------------------------

def test_evaluate_copy_truth_scores_zero(tmp_path, capsys):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.0, seed=4)
    out = tmp_path / "out"
    rc = run(["evaluate", "--input", inp, "--out-dir", out, "--fraction", 0.2,
              "--seed", 0, "--impute-with", "copy-truth"])
    assert rc == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "variable,mase,masked_count"
    assert lines[-1] == "overall,0.0,24"        # floor(0.2 * 120) scored cells
    assert "overall" in capsys.readouterr().out


def test_evaluate_engine_masks_and_scores(tmp_path, capsys):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.0, seed=5)
    out = tmp_path / "out"
    rc = run(["evaluate", "--input", inp, "--out-dir", out, "--fraction", 0.2,
              "--seed", 1, "--chains", 1, "--passes", 1, "--threads", 1])
    assert rc == 0
    assert len((out / "mask.csv").read_text().splitlines()) == 1 + 24
    assert len((out / "errors.csv").read_text().splitlines()) == 1 + 24
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved_config"]["masked_cells"] == 24
    overall = manifest["resolved_config"]["overall_mase"]
    assert np.isfinite(overall) and overall > 0


def test_evaluate_compare_prints_permutation_p(tmp_path, capsys):
    header = "patient,variable,time_index,abs_scaled_error"
    cells = [(f"p{i}", "hr", b) for i in range(10) for b in range(3)]
    fa = tmp_path / "a.csv"
    fb = tmp_path / "b.csv"
    fa.write_text("\n".join([header] + [f"{p},{v},{b},{0.1 * i}"
                  for i, (p, v, b) in enumerate(cells)]) + "\n")
    fb.write_text("\n".join([header] + [f"{p},{v},{b},{0.1 * i + 0.5}"
                  for i, (p, v, b) in enumerate(cells)]) + "\n")
    out = tmp_path / "out"
    rc = run(["evaluate", "--compare", fa, fb, "--seed", 1, "--out-dir", out])
    assert rc == 0
    text = capsys.readouterr().out
    assert "permutation p-value:" in text
    assert "replicates=1000, n=30" in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert 0.0 < manifest["resolved_config"]["p_value"] <= 1.0


def test_evaluate_compare_rejects_mismatched_cells(tmp_path):
    header = "patient,variable,time_index,abs_scaled_error"
    fa = tmp_path / "a.csv"
    fb = tmp_path / "b.csv"
    fa.write_text(f"{header}\np0,hr,0,0.5\n")
    fb.write_text(f"{header}\np0,hr,1,0.5\n")
    assert run(["evaluate", "--compare", fa, fb, "--out-dir", tmp_path]) == 2


# --- synthesize --------------------------------------------------------------

def test_synthesize_d_zero_keeps_times(tmp_path):
    inp = tmp_path / "in.csv"
    tens, times, _ = make_input(inp, missing=0.2, seed=6)
    out = tmp_path / "out"
    rc = run(["synthesize", "--input", inp, "--d", 0, "--out-dir", out])
    assert rc == 0
    got, got_times = read_dense_csv(out / "synthesized.csv")
    assert np.array_equal(got_times.times, times.times)
    obs = tens.observed
    assert got.values[obs] == pytest.approx(tens.values[obs], rel=1e-12)
    assert np.array_equal(got.observed, obs)


def test_synthesize_hand_warp_in_output(tmp_path):
    vals = np.array([[[0.0, 1.0, 3.0], [0.0, 2.0, 3.0]]])
    t = np.tile(np.array([0.0, 2.0, 3.0]), (1, 2, 1))
    inp = tmp_path / "in.csv"
    write_dense_csv(inp, MeasurementTensor(vals, np.ones((1, 2, 3), dtype=bool),
                                           patient_ids=["p0"], variables=["a", "b"]),
                    TimeTensor(t))
    out = tmp_path / "out"
    rc = run(["synthesize", "--input", inp, "--d", 0.5, "--out-dir", out])
    assert rc == 0
    _, got_times = read_dense_csv(out / "synthesized.csv")
    assert got_times.times[0, 0] == pytest.approx([0.0, 1.5, 3.0], abs=1e-12)
    assert got_times.times[0, 1] == pytest.approx([0.0, 2.0, 3.0], abs=1e-12)


def test_synthesize_d_sweep_writes_files(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.2, seed=7)
    for d in (0.0, 0.5, 0.999):
        out = tmp_path / f"d{d}"
        assert run(["synthesize", "--input", inp, "--d", d, "--out-dir", out]) == 0
        assert (out / "synthesized.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["resolved_config"]["d"] == d


def test_synthesize_d_validation(tmp_path, capsys):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.2, seed=8)
    assert run(["synthesize", "--input", inp, "--out-dir", tmp_path]) == 1
    assert run(["synthesize", "--input", inp, "--d", 1.0, "--out-dir", tmp_path]) == 1
    assert run(["synthesize", "--input", inp, "--d", -0.5, "--out-dir", tmp_path]) == 1
    err = capsys.readouterr().err
    assert "config-error" in err


# --- gradcheck ---------------------------------------------------------------

def test_gradcheck_default_instances_pass(tmp_path, capsys):
    rc = run(["gradcheck", "--instances", 100, "--seed", 0, "--out-dir", tmp_path])
    assert rc == 0
    assert "PASS" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["resolved_config"]["failures"] == 0
    assert manifest["resolved_config"]["max_rel_err"] < 1e-5


def test_gradcheck_zero_instances_vacuous(tmp_path, capsys):
    rc = run(["gradcheck", "--instances", 0, "--out-dir", tmp_path])
    assert rc == 0
    assert "vacuous" in capsys.readouterr().out


def test_gradcheck_perturbed_gradient_fails(tmp_path, capsys):
    rc = run(["gradcheck", "--instances", 10, "--seed", 0,
              "--perturb-gradient", 0.05, "--out-dir", tmp_path])
    assert rc == 3
    assert "FAIL" in capsys.readouterr().out


# --- exit codes and configuration --------------------------------------------

def test_exit_codes_for_usage_and_data_errors(tmp_path, capsys):
    assert run([]) == 1                                   # missing subcommand
    assert run(["banana"]) == 1                           # unknown subcommand
    assert run(["impute"]) == 1                           # missing --input
    assert run(["impute", "--input", tmp_path / "nope.csv"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("patient,wrong,header\n")
    assert run(["impute", "--input", bad, "--out-dir", tmp_path]) == 2
    inp = tmp_path / "in.csv"
    make_input(inp, seed=9)
    assert run(["impute", "--input", inp, "--mode", "banana"]) == 1
    err_lines = [l for l in capsys.readouterr().err.splitlines() if l]
    assert all(l.startswith("mixmi: ") for l in err_lines)


def test_config_file_precedence(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.25, seed=10)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# engine knobs\nchains = 3\npasses = 1\nseed = 5\n"
                   "fixed-inference-weights = true\n")
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--config", cfg, "--out-dir", out,
              "--chains", 1, "--threads", 1])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    resolved = manifest["resolved_config"]
    assert resolved["chains"] == 1          # flag beats file
    assert resolved["passes"] == 1          # file beats default (3)
    assert resolved["fixed_inference_weights"] is True
    assert manifest["seed"] == 5

    bad = tmp_path / "bad.cfg"
    bad.write_text("banana = 1\n")
    assert run(["impute", "--input", inp, "--config", bad]) == 1
    bad.write_text("chains\n")
    assert run(["impute", "--input", inp, "--config", bad]) == 1
    assert run(["impute", "--input", inp, "--config", tmp_path / "nope.cfg"]) == 1


def test_manifest_records_input_digest_and_version(tmp_path):
    inp = tmp_path / "in.csv"
    make_input(inp, missing=0.2, seed=11)
    out = tmp_path / "out"
    rc = run(["impute", "--input", inp, "--out-dir", out,
              "--chains", 1, "--passes", 1, "--seed", 0, "--threads", 1])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["version"] == cli.VERSION
    assert len(manifest["input"]["sha256"]) == 64
    assert manifest["outputs"] == ["imputed.csv", "weights_model.csv",
                                   "weights_patient.csv"]
    assert manifest["wall_clock_s"] >= 0
