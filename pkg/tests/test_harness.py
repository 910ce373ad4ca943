import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from selquant.harness import (build_synthetic_scenario, dbm_to_watts,
                              load_config, normalized_mse,
                              optimizer_from_config, run_bound_study,
                              run_consistency, run_intel_experiments,
                              run_selection_sweep, run_temporal_sweep,
                              simulate_chain)
from selquant.intel import synthesize_readings
from selquant.util import config_hash

SMALL = {
    "m_sensors": 12,
    "trials": 4,
    "varphi_grid": [0.9],
    "active_fractions": [0.25],
    "frames": 5,
    "methods": ["separate", "random4"],
    "bound_m_grid": [8, 10],
    "bound_trials": 2,
    "psi_grid": [0.5],
    "consistency": {"cases": 3, "kinds": ["error_free", "total_outage", "mixed"],
                    "max_sensors": 3, "trials": 20000},
}


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config()
        assert cfg["m_sensors"] == 30
        assert cfg["link"]["tx_power_dbm"] == 0.0

    def test_override_merging(self):
        cfg = load_config(overrides={"link": {"tx_power_dbm": -70.0}})
        assert cfg["link"]["tx_power_dbm"] == -70.0
        assert cfg["link"]["slot_bandwidth_hz"] == 15000.0

    def test_dbm_conversion(self):
        assert dbm_to_watts(0.0) == pytest.approx(1e-3)
        assert dbm_to_watts(-174.0) == pytest.approx(10 ** (-17.4) * 1e-3)


class TestBoundStudy:
    def test_exactness_and_monotonicity_columns(self):
        cfg = load_config(overrides={**SMALL, "link": {"tx_power_dbm": -62.0}})
        rows = run_bound_study(cfg)
        by_point = {}
        for m, k, trial, nmse_exact, nmse_bound, rel, _ in rows:
            by_point.setdefault((m, trial), {})[k] = (nmse_bound, rel)
        for (m, trial), ks in by_point.items():
            n = max(2, round(cfg["bound_active_fraction"] * m))
            assert ks[n - 1][1] < 1e-10  # K = N-1 column is exact
            ordered = [ks[k][0] for k in sorted(ks)]
            assert all(a >= b - 1e-12 for a, b in zip(ordered, ordered[1:]))


class TestSelectionSweep:
    def test_optimized_beats_baseline_and_csv_schema(self, tmp_path):
        cfg = load_config(overrides={**SMALL, "link": {"tx_power_dbm": -70.0}})
        rows = run_selection_sweep(cfg, tmp_path)
        table = {(r[3]): r for r in rows}
        assert table["separate"][4] <= table["random4"][4] + 1e-12
        lines = (tmp_path / "selection_sweep.csv").read_text().splitlines()
        assert lines[0] == "varphi,active_pct,n_active,method,nmse_mean,nmse_se,trials,seed,config_hash"
        assert str(config_hash(cfg)) in lines[1]

    def test_byte_identical_reruns(self, tmp_path):
        cfg = load_config(overrides={**SMALL, "trials": 2})
        run_selection_sweep(cfg, tmp_path / "a")
        run_selection_sweep(cfg, tmp_path / "b")
        assert (tmp_path / "a/selection_sweep.csv").read_bytes() == \
            (tmp_path / "b/selection_sweep.csv").read_bytes()


class TestTemporalSweep:
    def test_frame_grid_and_flatness_at_low_memory(self):
        cfg = load_config(overrides={**SMALL, "psi_grid": [0.1]})
        rows = run_temporal_sweep(cfg)
        nmse = [r[3] for r in rows]
        assert len(nmse) == cfg["frames"]
        assert max(nmse) - min(nmse) < 0.05


class TestConsistency:
    def test_z_scores_within_three(self):
        cfg = load_config(overrides=SMALL)
        results = run_consistency(cfg)
        assert len(results) == 3
        kinds = {r["kind"] for r in results}
        assert kinds == {"error_free", "total_outage", "mixed"}
        for r in results:
            if r["kind"] == "total_outage":
                assert r["empirical"] == pytest.approx(r["analytic"], rel=0.05)
            else:
                assert abs(r["z"]) <= 3.0

    def test_simulate_chain_matches_known_case(self):
        # PER = 0, no quantization: empirical MSE equals the no-loss subset MSE
        from selquant.estimator import SelectionPlan, mse_for_subset
        from selquant.field import FieldModel
        rng = np.random.default_rng(3)
        prior = np.array([[9.0, 3.0], [3.0, 4.0]])
        model = FieldModel(np.zeros(2), prior, np.diag([1.0, 2.0]))
        plan = SelectionPlan((0, 1), (4, 4))
        emp, se = simulate_chain(model, plan, np.zeros(2), 50_000, 11,
                                 quantize_signals=False)
        want = mse_for_subset(model, plan, (0, 1), margins=np.zeros(2))
        assert abs(emp - want) < 3 * se


class TestIntelRun:
    def test_experiments_from_synthetic_model_dir(self, tmp_path):
        from tests.test_intel import _synthetic_model
        from selquant.intel import save_model
        model = _synthetic_model(t_count=8, m=6)
        save_model(model, tmp_path / "model")
        cfg = load_config(overrides={
            "master_seed": 5,
            "intel": {"active_fractions": [0.34], "bit_sweep_fractions": [0.34],
                      "methods": ["separate", "random4"], "eval_intervals": [3, 5],
                      "temporal_fraction": 0.34},
        })
        out = run_intel_experiments(cfg, tmp_path / "model", tmp_path / "results")
        assert (tmp_path / "results/intel_selection_sweep.csv").exists()
        assert (tmp_path / "results/intel_temporal.csv").exists()
        methods = {r[2] for r in out["selection"]}
        assert methods == {"separate", "random4"}
        assert len(out["temporal"]) == 8
        assert len(out["bits"]) == 8  # one row per bit count
        # model-mismatch diagnostic is zero for a self-consistent model
        assert all(abs(r[1]) < 1e-9 for r in out["xi"])


class TestCli:
    def run_cli(self, *args):
        return subprocess.run([sys.executable, "-m", "selquant.cli", *args],
                              capture_output=True, text=True)

    def test_consistency_command(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(SMALL))
        res = self.run_cli("consistency", "--config", str(cfg_path),
                           "--out", str(tmp_path / "out"))
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "out/consistency.csv").exists()
        assert json.loads(res.stdout)["cases"] == 3

    def test_bound_command_and_seed_flag(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(SMALL))
        res = self.run_cli("bound", "--config", str(cfg_path),
                           "--out", str(tmp_path / "out"), "--seed", "77")
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "out/bound_study.csv").exists()

    def test_intel_prepare_and_run(self, tmp_path):
        from tests.test_intel import _synthetic_model
        true = _synthetic_model(t_count=6, m=3)
        lines = synthesize_readings(true, 25, 4, rng_seed=2)
        readings_path = tmp_path / "readings.txt"
        readings_path.write_text("\n".join(lines) + "\n")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "intel": {"interval_len_s": 14400, "window_len_s": 14400,
                      "temp_bounds": [-50.0, 90.0],
                      "active_fractions": [0.34], "bit_sweep_fractions": [],
                      "methods": ["random4"], "eval_intervals": [3],
                      "temporal_fraction": 0.34},
        }))
        res = self.run_cli("intel-prepare", "--config", str(cfg_path),
                           "--readings", str(readings_path),
                           "--out", str(tmp_path / "model"))
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "model/manifest.json").exists()
        assert (tmp_path / "model/diagnostics.csv").exists()
        res = self.run_cli("intel-run", "--config", str(cfg_path),
                           "--model-dir", str(tmp_path / "model"),
                           "--out", str(tmp_path / "results"))
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "results/intel_selection_sweep.csv").exists()

    def test_error_exit_is_machine_readable(self, tmp_path):
        res = self.run_cli("intel-run", "--model-dir", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "out"))
        assert res.returncode == 2
        err = json.loads(res.stderr.strip().splitlines()[-1])
        assert "error" in err
