import json
import math
import os

import numpy as np
import pytest

from longmi.cli import main

EQ1 = (
    "numeracy_score ~ prev_dep + time + age + numeracy_scorew1 + sex"
    " + factor(ses) + (1|id)"
)


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"n_schools": 6, "n_students": 90, "seed": 17}))
    assert run("sim", "--config", str(cfg), "--out-dir", str(out)) == 0
    return out


class TestSim:
    def test_default_row_count(self, tmp_path):
        assert run("sim", "--seed", "5", "--out-dir", str(tmp_path)) == 0
        rows = open(tmp_path / "observed.csv").read().strip().splitlines()
        assert len(rows) == 3601  # header + 1200 units x 3 waves

    def test_config_override_row_count(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_students": 12, "n_schools": 4}))
        assert run("sim", "--seed", "5", "--config", str(cfg),
                   "--out-dir", str(tmp_path)) == 0
        rows = open(tmp_path / "observed.csv").read().strip().splitlines()
        assert len(rows) == 37

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run("sim", "--seed", "9", "--out-dir", str(d)) == 0
        for name in ("complete.csv", "observed.csv", "truth.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_bad_config_exit_code(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense_field": 1}))
        assert run("sim", "--config", str(cfg), "--out-dir", str(tmp_path)) == 2

    def test_manifest_written(self, sim_dir):
        meta = json.loads((sim_dir / "run_manifest.json").read_text())
        assert meta["subcommand"] == "sim"
        assert meta["tool"] == "longmi"


class TestImpute:
    def test_fcs_and_outputs(self, sim_dir, tmp_path):
        out = tmp_path / "imp"
        assert run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "fcs-1l-wide", "--m", "2", "--maxit", "2",
            "--seed", "3", "--fallback-pmm", "--out-dir", str(out),
        ) == 0
        assert (out / "imputations.csv").exists()
        assert (out / "chain_stats.csv").exists()
        spec = json.loads((out / "impute_spec.json").read_text())
        assert spec["methods"]["prev_dep.3"] == "logreg"
        assert spec["methods"]["numeracy_score.5"] == "norm"
        assert spec["methods"]["ses"] == "polr"

    def test_jm_trace_written(self, sim_dir, tmp_path):
        out = tmp_path / "impjm"
        assert run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "jm-1l-wide", "--m", "2", "--nburn", "20",
            "--nbetween", "100", "--seed", "3", "--out-dir", str(out),
        ) == 0
        header = open(out / "trace.csv").readline().strip()
        assert header == "iteration,parameter,value"

    def test_nbetween_floor(self, sim_dir, tmp_path):
        assert run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "jm-1l-wide", "--nbetween", "50",
            "--out-dir", str(tmp_path / "x"),
        ) == 2

    def test_jm_3l_unsupported(self, sim_dir, tmp_path, capsys):
        assert run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "jm-3l", "--out-dir", str(tmp_path / "x"),
        ) == 2
        assert "jm-3l" in capsys.readouterr().err

    def test_fcs_2l_di_warns(self, sim_dir, tmp_path):
        with pytest.warns(UserWarning, match="fcs-2l-di"):
            assert run(
                "impute", "--input", str(sim_dir / "observed.csv"),
                "--method", "fcs-2l-di", "--m", "2", "--maxit", "2",
                "--seed", "3", "--fallback-pmm", "--out-dir", str(tmp_path / "di"),
            ) == 0


@pytest.fixture(scope="module")
def imputed(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("imp")
    assert run(
        "impute", "--input", str(sim_dir / "observed.csv"),
        "--method", "fcs-1l-wide", "--m", "3", "--maxit", "2",
        "--seed", "3", "--fallback-pmm", "--out-dir", str(out),
    ) == 0
    return out


class TestAnalyzePool:
    def test_stacked_input_yields_m_fits(self, imputed, tmp_path):
        fits = tmp_path / "fits"
        assert run(
            "analyze", "--input", str(imputed / "imputations.csv"),
            "--formula", EQ1, "--out-dir", str(fits),
        ) == 0
        files = sorted(os.listdir(fits))
        assert [f for f in files if f.startswith("fit_")] == [
            "fit_0001.json", "fit_0002.json", "fit_0003.json",
        ]
        payload = json.loads((fits / "fit_0001.json").read_text())
        assert payload["params"][1]["name"] == "prev_dep"
        assert "id" in payload["var_components"]

    def test_aca_single_fit(self, sim_dir, tmp_path):
        fits = tmp_path / "fits"
        assert run(
            "analyze", "--input", str(sim_dir / "observed.csv"),
            "--formula", EQ1, "--aca", "--out-dir", str(fits),
        ) == 0
        assert sorted(f for f in os.listdir(fits) if f.startswith("fit_")) == [
            "fit_0001.json"
        ]

    def test_unknown_column_exit(self, sim_dir, tmp_path):
        assert run(
            "analyze", "--input", str(sim_dir / "observed.csv"),
            "--formula", "nonexistent ~ age + (1|id)", "--aca",
            "--out-dir", str(tmp_path / "x"),
        ) == 2

    def test_pool_hand_example(self, tmp_path):
        fits = tmp_path / "fits"
        fits.mkdir()
        for i, q in enumerate((1.0, 2.0, 3.0), start=1):
            (fits / f"fit_{i:04d}.json").write_text(json.dumps({
                "params": [{"name": "b", "estimate": q, "se": 1.0}],
                "var_components": {"residual": 1.0},
                "converged": True,
            }))
        out = tmp_path / "pooled"
        assert run("pool", "--fits", str(fits), "--out-dir", str(out)) == 0
        rows = open(out / "pooled.csv").read().strip().splitlines()
        _, est, se, df, fmi = rows[1].split(",")
        assert float(est) == pytest.approx(2.0, abs=1e-12)
        assert float(se) == pytest.approx(math.sqrt(7.0 / 3.0), abs=1e-10)

    def test_pool_single_fit_fails(self, tmp_path):
        fits = tmp_path / "fits"
        fits.mkdir()
        (fits / "fit_0001.json").write_text(json.dumps({
            "params": [{"name": "b", "estimate": 1.0, "se": 1.0}],
            "var_components": {}, "converged": True,
        }))
        assert run("pool", "--fits", str(fits),
                   "--out-dir", str(tmp_path / "o")) == 2

    def test_version_mismatch_rejected(self, sim_dir, tmp_path):
        import shutil

        clone = tmp_path / "clone"
        shutil.copytree(sim_dir, clone)
        manifest = json.loads((clone / "run_manifest.json").read_text())
        manifest["version"] = "0.0.0"
        (clone / "run_manifest.json").write_text(json.dumps(manifest))
        assert run(
            "analyze", "--input", str(clone / "observed.csv"),
            "--formula", EQ1, "--aca", "--out-dir", str(tmp_path / "x"),
        ) == 2


class TestDiag:
    def test_trace_series_and_autocorr(self, sim_dir, tmp_path):
        imp = tmp_path / "imp"
        assert run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "jm-1l-wide", "--m", "2", "--nburn", "30",
            "--nbetween", "100", "--seed", "4", "--out-dir", str(imp),
        ) == 0
        out = tmp_path / "diag"
        assert run(
            "diag", "--trace", str(imp / "trace.csv"),
            "--params", "omega.numeracy_scorew1.numeracy_scorew1",
            "--out-dir", str(out),
        ) == 0
        series = open(out / "diag_series.csv").read().strip().splitlines()
        assert len(series) == 1 + 130  # header + nburn + nbetween iterations
        ac = open(out / "diag_autocorr.csv").read().strip().splitlines()
        assert len(ac) == 1 + 20

    def test_unknown_param(self, sim_dir, tmp_path):
        imp = tmp_path / "imp"
        run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "jm-1l-wide", "--m", "1", "--nburn", "5",
            "--nbetween", "100", "--seed", "4", "--out-dir", str(imp),
        )
        assert run(
            "diag", "--trace", str(imp / "trace.csv"),
            "--params", "omega.made.up", "--out-dir", str(tmp_path / "x"),
        ) == 3

    def test_chain_stats_input(self, sim_dir, tmp_path):
        imp = tmp_path / "imp"
        run(
            "impute", "--input", str(sim_dir / "observed.csv"),
            "--method", "fcs-1l-wide", "--m", "2", "--maxit", "3",
            "--seed", "4", "--fallback-pmm", "--out-dir", str(imp),
        )
        out = tmp_path / "diag"
        assert run(
            "diag", "--chain-stats", str(imp / "chain_stats.csv"),
            "--out-dir", str(out),
        ) == 0
        series = open(out / "diag_series.csv").read().splitlines()
        assert any("prev_dep.3.mean.chain0" in s for s in series)


def test_end_to_end_determinism(tmp_path):
    outputs = []
    for tag in ("x", "y"):
        base = tmp_path / tag
        cfg = base / "cfg.json"
        base.mkdir()
        cfg.write_text(json.dumps({"n_schools": 5, "n_students": 60, "seed": 23}))
        assert run("sim", "--config", str(cfg), "--out-dir", str(base / "sim")) == 0
        assert run(
            "impute", "--input", str(base / "sim" / "observed.csv"),
            "--method", "fcs-1l-wide", "--m", "2", "--maxit", "2",
            "--seed", "6", "--fallback-pmm", "--out-dir", str(base / "imp"),
        ) == 0
        assert run(
            "analyze", "--input", str(base / "imp" / "imputations.csv"),
            "--formula", EQ1, "--out-dir", str(base / "fits"),
        ) == 0
        assert run(
            "pool", "--fits", str(base / "fits"),
            "--out-dir", str(base / "pooled"),
        ) == 0
        outputs.append(base)
    for rel in (
        "sim/observed.csv", "imp/imputations.csv", "imp/chain_stats.csv",
        "fits/fit_0001.json", "pooled/pooled.csv", "pooled/pooled.json",
    ):
        a = (outputs[0] / rel).read_bytes()
        b = (outputs[1] / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"


def test_mtw_baseline_flag(sim_dir, tmp_path):
    out = tmp_path / "mtw"
    assert run(
        "impute", "--input", str(sim_dir / "observed.csv"),
        "--method", "fcs-1l-wide-mtw", "--m", "2", "--maxit", "2",
        "--seed", "8", "--fallback-pmm", "--mtw-window", "1",
        "--mtw-baseline", "numeracy_scorew1=1", "--out-dir", str(out),
    ) == 0
    spec = json.loads((out / "impute_spec.json").read_text())
    row = spec["predictor_matrix"]["numeracy_scorew1"]
    # window 1 from wave 1: wave-5 and wave-7 measures are excluded
    assert "prev_sdq.5" not in row and "numeracy_score.7" not in row
    assert row.get("prev_sdq.3") == 1

    bad = run(
        "impute", "--input", str(sim_dir / "observed.csv"),
        "--method", "fcs-1l-wide-mtw", "--mtw-baseline", "numeracy_scorew1",
        "--out-dir", str(tmp_path / "bad"),
    )
    assert bad == 2
