import csv
import json
import subprocess
import sys

import pydot
import pytest

from expa.cli import main
from expa.tasks import read_jsonl

TINY_TRAIN = {
    "task": {"generator": "sort", "cfg": {"mix": {"2": 1.0}, "n_instances": 20}},
    "catalog": {"kind": "sort", "n_labels": 2},
    "probe": {"sort_sizes": [2]},
    "policy": {"d": 16, "heads": 2, "ff": 12, "max_len": 64},
    "update": {"m": 2, "max_steps": 8},
    "steps": 3,
    "probe_every": 1,
}


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(cfg))
    return main([command, str(path), *extra])


class TestGen:
    def test_countdown_splits(self, tmp_path):
        out = tmp_path / "data"
        cfg = {"generator": "countdown", "splits": {"train": 2000, "test": 200}}
        assert run(tmp_path, "gen", cfg, "--out", str(out), "--seed", "1") == 0
        assert len(read_jsonl(out / "countdown_train.jsonl")) == 2000
        assert len(read_jsonl(out / "countdown_test.jsonl")) == 200
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"command", "config", "seed", "code_version", "created", "outputs"} <= set(manifest)
        assert manifest["seed"] == 1

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = {"generator": "arithmetic", "splits": {"test": 100}}
        run(tmp_path, "gen", cfg, "--out", str(tmp_path / "a"), "--seed", "5")
        run(tmp_path, "gen", cfg, "--out", str(tmp_path / "b"), "--seed", "5")
        run(tmp_path, "gen", cfg, "--out", str(tmp_path / "c"), "--seed", "6")
        a, b, c = ((tmp_path / d / "arithmetic_test.jsonl").read_bytes() for d in "abc")
        assert a == b != c

    def test_sort_manifest_records_mix(self, tmp_path):
        out = tmp_path / "s"
        assert run(tmp_path, "gen", {"generator": "sort", "splits": {"train": 10}}, "--out", str(out)) == 0
        mix = json.loads((out / "manifest.json").read_text())["mix"]
        assert mix == {"2": 0.1, "3": 0.2, "4": 0.3, "5": 0.4}

    @pytest.mark.parametrize("cfg", [
        {"generator": "sort", "cfg": {"mix": {"2": 0.5, "3": 0.6}}, "splits": {"train": 10}},
        {"generator": "nope", "splits": {"train": 1}},
        {"generator": "sort", "splits": {"train": 1}, "colour": "red"},
        {"generator": "sort"},
    ])
    def test_config_errors(self, tmp_path, cfg):
        assert run(tmp_path, "gen", cfg, "--out", str(tmp_path / "x")) == 2

    def test_missing_or_broken_file(self, tmp_path):
        assert main(["gen", str(tmp_path / "missing.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen", str(bad)]) == 2


class TestTrainAndEval:
    def test_train_then_eval(self, tmp_path):
        out = tmp_path / "run"
        assert run(tmp_path, "train", TINY_TRAIN, "--out", str(out), "--seed", "3") == 0
        rows = list(csv.DictReader((out / "metrics.csv").open()))
        assert len(rows) == 3
        assert set(rows[0]) == {"step", "mean_reward", "probe_accuracy", "tool_invocations_per_rollout", "branch_cf_fraction"}
        assert json.loads((out / "manifest.json").read_text())["seed"] == 3

        ev = tmp_path / "ev"
        cfg = {"checkpoint": str(out / "checkpoint_final.npz"), "test": {"sort_sizes": [2]}, "decoding": "both", "max_steps": 8}
        assert run(tmp_path, "eval", cfg, "--out", str(ev), "--jobs", "2") == 0
        report = json.loads((ev / "report.json").read_text())
        assert set(report) == {"greedy", "sampled"}
        assert report["greedy"]["n"] == 4 and "by_min_swaps" in report["greedy"]

        # the same checkpoint against a different catalog is a configuration error
        cfg["catalog"] = {"kind": "sort", "n_labels": 3}
        assert run(tmp_path, "eval", cfg, "--out", str(ev)) == 2

    def test_unknown_train_key(self, tmp_path):
        assert run(tmp_path, "train", {**TINY_TRAIN, "warmup": 1}, "--out", str(tmp_path / "r")) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
    def test_divergence_aborts(self, tmp_path):
        cfg = {**TINY_TRAIN, "update": {"m": 2, "max_steps": 8, "learning_rate": 1e308}, "steps": 20}
        assert run(tmp_path, "train", cfg, "--out", str(tmp_path / "r")) == 3

    def test_oracle_eval(self, tmp_path):
        data = tmp_path / "data"
        run(tmp_path, "gen", {"generator": "countdown", "splits": {"test": 50}}, "--out", str(data))
        cfg = {"oracle": True, "catalog": {"kind": "countdown", "vocab": "default"},
               "test": {"dataset": str(data / "countdown_test.jsonl")}}
        assert run(tmp_path, "eval", cfg, "--out", str(tmp_path / "ev")) == 0
        assert json.loads((tmp_path / "ev" / "report.json").read_text())["greedy"]["accuracy"] == 1.0

    def test_eval_without_checkpoint(self, tmp_path):
        assert run(tmp_path, "eval", {"test": {"sort_sizes": [2]}}, "--out", str(tmp_path / "ev")) == 2


class TestSortLabCommands:
    def test_sortstats(self, tmp_path):
        out = tmp_path / "ss"
        assert run(tmp_path, "sortstats", {"n": 4}, "--out", str(out)) == 0
        rows = {r["strategy"]: r for r in csv.DictReader((out / "sort_stats.csv").open())}
        assert set(rows) == {"pivot_sort4", "insertion", "optimal"}
        assert float(rows["optimal"]["avg_swaps"]) == pytest.approx(46 / 24)
        assert float(rows["pivot_sort4"]["avg_comparisons"]) < float(rows["insertion"]["avg_comparisons"])
        assert all(float(r["accuracy"]) == 1.0 and r["n"] == "4" for r in rows.values())

    def test_sortstats_bad_strategy(self, tmp_path):
        assert run(tmp_path, "sortstats", {"n": 3, "strategies": ["bubble"]}, "--out", str(tmp_path / "x")) == 2

    def test_tree(self, tmp_path):
        out = tmp_path / "tree"
        assert run(tmp_path, "tree", {"source": "pivot_sort4", "direction": "desc"}, "--out", str(out)) == 0
        for name in ("tree.dot", "tree_pruned.dot"):
            (graph,) = pydot.graph_from_dot_file(str(out / name))
            assert graph.get_edges()
        summary = json.loads((out / "tree.json").read_text())
        assert summary["stats_after"]["accuracy"] == "1"
        assert summary["nodes_after"] <= summary["nodes_before"]

    def test_tree_from_untrained_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        run(tmp_path, "train", {**TINY_TRAIN, "steps": 0}, "--out", str(out))
        cfg = {"n": 2, "source": "checkpoint", "checkpoint": str(out / "checkpoint_final.npz"), "max_steps": 6}
        # an untrained policy rarely finishes cleanly; either outcome must map to a documented exit code
        assert run(tmp_path, "tree", cfg, "--out", str(tmp_path / "t")) in (0, 3)


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"n": 3, "strategies": ["insertion"]}))
    proc = subprocess.run([sys.executable, "-m", "expa", "sortstats", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "sort_stats.csv").exists()
