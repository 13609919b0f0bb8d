import json

import pytest
import yaml

from tieredreplay import ConfigError, ExperimentConfig, run_experiment, run_repeats, run_speed_test, run_sweep
from tieredreplay.cli import main as cli_main


def tiny_cfg(**over):
    base = {
        "stream": {"num_tasks": 3, "classes_per_task": 2, "samples_per_class": 16, "dim": 6, "stddev": 0.8},
        "em": {"capacity": 10, "policy": "ring_equal_class"},
        "trainer": {"passes": 2, "batch_size": 8},
        "gate": {"kind": "entropy", "swap_ratio": 1.0},
        "swap": {"mode": "sync"},
        "seeds": [5],
    }
    for key, val in over.items():
        if isinstance(val, dict):
            base.setdefault(key, {}).update(val)
        else:
            base[key] = val
    return ExperimentConfig.from_dict(base)


def deterministic_metrics(result):
    d = result.metrics.to_dict()
    d.pop("wall_time_per_bundle_s")
    return d


class TestConfig:
    def test_validation_reports_field_path(self):
        with pytest.raises(ConfigError) as exc:
            tiny_cfg(gate={"swap_ratio": 1.5})
        assert "gate.swap_ratio" in str(exc.value)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError) as exc:
            tiny_cfg(em={"capcity": 4})
        assert "em.capcity" in str(exc.value)

    def test_hash_stable_across_reserialization(self):
        cfg = tiny_cfg()
        clone = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert cfg.config_hash() == clone.config_hash()

    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump(cfg.to_dict()))
        assert ExperimentConfig.from_yaml(p).config_hash() == cfg.config_hash()


class TestRunExperiment:
    def test_sync_runs_are_reproducible(self):
        cfg = tiny_cfg()
        a = run_experiment(cfg, seed=5)
        b = run_experiment(cfg, seed=5)
        assert deterministic_metrics(a) == deterministic_metrics(b)

    def test_feature_off_equivalence(self):
        # ratio 0 with zero storage capacity must train exactly like no storage
        disabled = tiny_cfg(gate={"swap_ratio": 0.0}, storage={"capacity": 0})
        off = tiny_cfg(swap={"mode": "off"})
        a = run_experiment(disabled, seed=5)
        b = run_experiment(off, seed=5)
        assert deterministic_metrics(a) == deterministic_metrics(b)
        assert a.swap_stats is None or a.swap_stats.items_submitted == 0
        assert sum(r.swap_items_submitted for r in a.bundle_reports) == 0

    def test_full_swap_submits_twice_half_swap(self):
        full = run_experiment(tiny_cfg(gate={"swap_ratio": 1.0}), seed=5)
        half = run_experiment(tiny_cfg(gate={"swap_ratio": 0.5}), seed=5)
        n_full = sum(r.swap_items_submitted for r in full.bundle_reports)
        n_half = sum(r.swap_items_submitted for r in half.bundle_reports)
        assert n_full > 0
        assert n_full == 2 * n_half

    def test_audit_passes_for_async(self):
        res = run_experiment(tiny_cfg(swap={"mode": "async"}), seed=9)
        assert res.audit["ok"], res.audit

    def test_audit_accounts_discards_when_off(self):
        res = run_experiment(tiny_cfg(swap={"mode": "off"}), seed=5)
        assert res.audit["ok"]
        assert res.audit["counts"]["discarded"] > 0

    def test_batch_level_bundling(self):
        # streaming mode: one single-pass bundle per arriving batch
        cfg = tiny_cfg(trainer={"passes": 1, "batch_size": 8, "bundle_size": 8})
        res = run_experiment(cfg, seed=5)
        assert len(res.bundle_reports) == 3 * 32 // 8
        assert res.audit["ok"]

    def test_run_outputs_files(self, tmp_path):
        out = tmp_path / "run"
        run_repeats(tiny_cfg(seeds=[1, 2]), out_dir=out)
        for name in ("metrics.csv", "summary.json", "swapstats.json", "timings.csv"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["runs"]) == 2
        assert "final_accuracy_mean" in summary and "final_accuracy_std" in summary

    def test_metrics_csv_schema(self, tmp_path):
        out = tmp_path / "run"
        run_repeats(tiny_cfg(), out_dir=out)
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "seed,record,task,after_task,value"


class TestSweep:
    def test_swap_ratio_axis(self, tmp_path):
        cfg = tiny_cfg(seeds=[1])
        sweep = run_sweep(cfg, "swap_ratio", [0.2, 0.8], out_dir=tmp_path)
        assert [row["value"] for row in sweep["table"]] == [0.2, 0.8]
        assert (tmp_path / "sweep.csv").exists()

    def test_em_size_axis_changes_capacity(self):
        cfg = tiny_cfg(seeds=[1])
        sweep = run_sweep(cfg, "em_size", [4, 8])
        assert {r["value"] for r in sweep["table"]} == {4, 8}

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            run_sweep(tiny_cfg(), "latency", [1, 2])


class TestSpeed:
    def test_modes_ranked_and_bounded(self, tmp_path):
        cfg = tiny_cfg(compute_delay_ms=5.0, storage={"latency_ms": 3.0},
                       swap={"mode": "sync", "concurrency": 8}, em={"capacity": 16})
        rows = run_speed_test(cfg, batches=30, items_per_batch=6, out_dir=tmp_path)
        by_mode = {r["mode"]: r for r in rows}
        assert by_mode["sync"]["per_batch_ms"] > by_mode["async"]["per_batch_ms"]
        assert by_mode["async"]["overhead_pct"] < 25.0
        assert by_mode["sync"]["overhead_pct"] > 25.0
        assert (tmp_path / "timings.csv").exists()

    def test_requires_compute_delay(self):
        with pytest.raises(ConfigError):
            run_speed_test(tiny_cfg(), batches=5)


class TestCli:
    def _write_cfg(self, tmp_path, **over):
        cfg = tiny_cfg(**over)
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump(cfg.to_dict()))
        return p

    def test_run_subcommand(self, tmp_path, capsys):
        p = self._write_cfg(tmp_path)
        out = tmp_path / "out"
        rc = cli_main(["run", str(p), "--out", str(out), "--seed", "3"])
        assert rc == 0
        assert (out / "summary.json").exists()
        assert "final accuracy" in capsys.readouterr().out

    def test_mode_override(self, tmp_path, capsys):
        p = self._write_cfg(tmp_path)
        out = tmp_path / "out2"
        rc = cli_main(["run", str(p), "--out", str(out), "--mode", "off"])
        assert rc == 0
        stats = json.loads((out / "swapstats.json").read_text())
        assert all(v is None for v in stats.values())

    def test_sweep_subcommand(self, tmp_path, capsys):
        p = self._write_cfg(tmp_path, seeds=[1])
        out = tmp_path / "sw"
        rc = cli_main(["sweep", str(p), "--axis", "swap_ratio", "--values", "0.5,1.0", "--out", str(out)])
        assert rc == 0
        assert (out / "sweep.csv").exists()

    def test_speed_subcommand(self, tmp_path, capsys):
        cfg = tiny_cfg(compute_delay_ms=2.0, storage={"latency_ms": 1.0})
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump(cfg.to_dict()))
        out = tmp_path / "sp"
        rc = cli_main(["speed", str(p), "--batches", "10", "--items-per-batch", "4", "--out", str(out)])
        assert rc == 0
        assert (out / "timings.csv").exists()

    def test_config_error_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("gate:\n  swap_ratio: 7\n")
        assert cli_main(["run", str(p)]) == 2
