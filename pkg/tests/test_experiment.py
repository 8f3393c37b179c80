import json

import numpy as np
import pytest

from entropy_ssl import cli
from entropy_ssl import experiment as ex
from entropy_ssl.errors import ConfigError, InvalidComparisonError
from entropy_ssl.records import RunLedgerRecord, read_jsonl, read_ledger, read_manifest, read_predictions

SMALL = ["scenario.per_class=120", "scenario.test_per_class=40", "scenario.dims=8",
         "scenario.num_classes=6", "train.max_epochs=3", "train.batch_size=16", "train.uratio=4"]


def small_config(tmp_path, *extra):
    return ex.load_config(None, SMALL + [f"output_dir={tmp_path}", *extra])


class TestConfig:
    def test_defaults(self):
        cfg = ex.load_config()
        assert cfg.train.lam == 1.5 and cfg.train.batch_size == 64 and cfg.train.lr == 0.03
        assert cfg.train.momentum == 0.9 and cfg.train.weight_decay == 5e-4

    def test_yaml_file_and_override(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  regularizer: off\n  lam: 0.5\nscenario:\n  k: 2\n")
        cfg = ex.load_config(path, ["scenario.k=3"])
        assert cfg.train.regularizer == "off" and cfg.train.lam == 0.5 and cfg.scenario.k == 3

    def test_override_keeps_off_as_word(self):
        assert ex.load_config(None, ["train.regularizer=off"]).train.regularizer == "off"

    @pytest.mark.parametrize("override", ["train.nope=1", "train.regularizer=l1", "repetitions=0",
                                          "scenario.dataset=mnist", "bogus"])
    def test_errors(self, override):
        with pytest.raises(ConfigError):
            ex.load_config(None, [override])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ex.load_config(tmp_path / "nope.yaml")

    def test_seeds(self):
        assert ex.load_config(None, ["repetitions=3", "scenario.seed=10"]).run_seeds() == [10, 11, 12]
        assert ex.load_config(None, ["repetitions=2", "seeds=[4, 9, 1]"]).run_seeds() == [4, 9]

    def test_scenario_hash_ignores_seed(self):
        a, b = ex.ScenarioSpec(seed=1), ex.ScenarioSpec(seed=2)
        assert ex.scenario_hash(a) == ex.scenario_hash(b)
        assert ex.scenario_hash(a) != ex.scenario_hash(ex.ScenarioSpec(k=5))

    def test_reference_config_file_loads(self):
        from pathlib import Path
        cfg = ex.load_config(Path(__file__).parent.parent / "configs" / "reference.yaml")
        assert cfg.repetitions == 5 and cfg.scenario.k == 4 and cfg.scenario.num_unseen == 2


class TestRun:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = small_config(tmp_path)
        a = ex.run_experiment(cfg, seed=7, out_root=tmp_path / "a")
        b = ex.run_experiment(cfg, seed=7, out_root=tmp_path / "b")
        assert a.final == b.final and a.run_id == "run-entropy-uniform-s7"
        run_dir = tmp_path / "a" / a.run_id
        assert (run_dir / "checkpoints" / "epoch_00002.pt").exists()
        man = read_manifest(run_dir / "manifest.jsonl")
        assert man["seed"] == 7 and len(man["labeled_indices"]) == 4 * 4
        stop = [r for r in read_jsonl(run_dir / "manifest.jsonl") if r["kind"] == "stop"]
        assert stop[0]["stop_epoch"] == a.stop_report["stop_epoch"] == 2
        assert read_ledger(run_dir / "ledger.jsonl")[0].final == a.final
        dump = read_predictions(run_dir / "predictions.jsonl")
        assert dump.probs.shape == (6 * 40, 6)
        assert len(a.epochs) == 3 and "eval" in a.epochs[0] and "entropy" in a.epochs[0]

    def test_baseline_uses_adaptation(self, tmp_path):
        rec = ex.run_experiment(small_config(tmp_path, "train.regularizer=off"), seed=0)
        assert rec.method == "baseline" and 0.0 <= rec.extra["threshold"] <= 1.0
        dump = read_predictions(tmp_path / rec.run_id / "predictions.jsonl")
        assert dump.meta["adapted_threshold"] == rec.extra["threshold"]

    def test_budget_scenario(self, tmp_path):
        rec = ex.run_experiment(small_config(tmp_path, "scenario.labeling=budget", "scenario.budget=5"),
                                seed=1)
        assert rec.extra["n_labeled"] == 5 and rec.extra["n_seen"] + rec.extra["n_unseen"] == 6

    def test_sweep_and_compare(self, tmp_path):
        cfg = small_config(tmp_path, "repetitions=2", "regularizers=[uniform, 'off']")
        records = ex.sweep(cfg)
        assert len(records) == 4
        rows = ex.compare_runs(records, tmp_path / "cmp")
        assert [r["method"] for r in rows] == ["baseline", "entropy-uniform"]
        assert all(r["n"] == 2 and r["combined_std"] is not None for r in rows)
        for name in ("summary.json", "summary.csv", "scores.png"):
            assert (tmp_path / "cmp" / name).stat().st_size > 0


def _fake(method, seed, combined, scenario="s"):
    final = {m: combined for m in ex.METRICS}
    return RunLedgerRecord(f"{method}-{seed}", "h", method, seed, scenario, final=final)


class TestSummary:
    def test_single_run(self):
        rows = ex.summarize([_fake("a", 0, 0.5)])
        assert len(rows) == 1 and rows[0]["combined_mean"] == 0.5 and rows[0]["combined_std"] is None

    def test_two_methods_five_seeds(self):
        vals = [0.1, 0.2, 0.3, 0.4, 0.5]
        recs = [_fake("a", s, v) for s, v in enumerate(vals)] + [_fake("b", s, 1 - v) for s, v in enumerate(vals)]
        rows = ex.summarize(recs)
        assert len(rows) == 2
        assert rows[0]["combined_mean"] == pytest.approx(0.3)
        assert rows[0]["combined_std"] == pytest.approx(np.std(vals, ddof=1))

    def test_mixed_scenarios(self):
        with pytest.raises(InvalidComparisonError):
            ex.summarize([_fake("a", 0, 0.5, "s1"), _fake("a", 1, 0.5, "s2")])

    def test_empty(self):
        with pytest.raises(InvalidComparisonError):
            ex.summarize([])


class TestCli:
    def test_train_adapt_eval_compare(self, tmp_path, capsys):
        args = ["--output", str(tmp_path)] + [a for s in SMALL for a in ("--set", s)]
        assert cli.main(["train", *args, "--seed", "2", "--regularizer", "off"]) == 0
        out = json.loads(capsys.readouterr().out)
        run_dir = tmp_path / out["run_id"]

        adapted = tmp_path / "adapted.jsonl"
        assert cli.main(["adapt", str(run_dir / "predictions.jsonl"), "--out", str(adapted),
                         "--threshold", "0.5"]) == 0
        assert json.loads(capsys.readouterr().out)["threshold"] == 0.5
        assert cli.main(["eval", str(adapted)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == set(ex.METRICS)

        assert cli.main(["compare", str(run_dir / "ledger.jsonl"), "--out", str(tmp_path / "cmp")]) == 0
        assert "baseline" in capsys.readouterr().out

    def test_scenario_verb(self, tmp_path, capsys):
        man = tmp_path / "m.jsonl"
        assert cli.main(["scenario", "--set", "scenario.num_unseen=3", "--manifest", str(man)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["unseen"]) == 3 and read_manifest(man)["seed"] == 0

    def test_sweep_verb(self, tmp_path, capsys):
        args = ["--output", str(tmp_path), "--repetitions", "2", "--epochs", "2"] + \
            [a for s in SMALL for a in ("--set", s)]
        assert cli.main(["sweep", *args, "--regularizers", "uniform"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert rows[0]["n"] == 2

    def test_config_error_exit_code(self, capsys):
        assert cli.main(["train", "--set", "train.unknown=1"]) == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path):
        assert cli.main(["eval", str(tmp_path / "missing.jsonl")]) == cli.EXIT_CONFIG

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        # 4 examples per class cannot supply 10 labels per class
        args = ["--output", str(tmp_path), "--set", "scenario.per_class=4",
                "--set", "scenario.test_per_class=0", "--set", "scenario.k=10"]
        assert cli.main(["train", *args]) == cli.EXIT_RUNTIME

    def test_bad_threshold(self, tmp_path):
        assert cli.main(["adapt", str(tmp_path / "x.jsonl"), "--out", "y", "--threshold", "abc"]) == cli.EXIT_CONFIG

    def test_output_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "envout"))
        assert ex.load_config().resolved_output() == tmp_path / "envout"
