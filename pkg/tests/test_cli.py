"""CLI plumbing tests: argument handling, exit codes, file formats."""

import json

import pytest
import yaml

from perfloop.catalog import serialize_catalog
from perfloop.cli import ConfigError, load_run_config, main
from perfloop.diagnose import AblationMode
from perfloop.metrics import Metric
from toyproject import (
    BROKEN_WORK,
    FAST_WORK,
    make_tree,
    reply_with,
    tiny_catalog,
)


def write_transcript(path, entries):
    path.write_text(
        yaml.safe_dump([{"role_tag": tag, "text": text} for tag, text in entries])
    )


def write_config(dirpath, tree, transcript_entries, mutate=None):
    write_transcript(dirpath / "transcript.yaml", transcript_entries)
    config = {
        "workdir": tree.name,
        "index": [{"key": "work", "file": "lib.c", "unit": "work"}],
        "commands": {
            "build": "sh build.sh",
            "test": "sh test.sh",
            "run": "sh run.sh",
            "profiler": "sh prof.sh {out} {cmd}",
        },
        "backend": {"kind": "scripted", "transcript": "transcript.yaml"},
        "pipeline": {"ablation": "base"},
        "measurement": {
            "warmups": 0,
            "runs": 1,
            "lock_path": str(dirpath / "measure.lock"),
        },
        "report_dir": "run-out",
    }
    if mutate:
        mutate(config)
    path = dirpath / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


class TestHotspotsCommand:
    def test_ranked_output(self, tmp_path, capsys):
        graph = tmp_path / "stacks.folded"
        graph.write_text("main;work 80\nmain;helper 20\n")
        assert main(["hotspots", str(graph)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines() == ["1. work  80  80.0%", "2. helper  20  20.0%"]

    def test_anchor_and_k(self, tmp_path, capsys):
        graph = tmp_path / "stacks.folded"
        graph.write_text("main;work 80\nmain;helper 20\nother;more 10\n")
        assert main(["hotspots", str(graph), "--anchor", "main", "--k", "1"]) == 0
        out = capsys.readouterr().out
        assert out.splitlines() == ["1. work  80  80.0%"]

    def test_no_matches(self, tmp_path, capsys):
        graph = tmp_path / "stacks.folded"
        graph.write_text("main;work 80\n")
        assert main(["hotspots", str(graph), "--anchor", "zzz"]) == 0
        assert "no matching samples" in capsys.readouterr().out

    def test_malformed_exits_2(self, tmp_path, capsys):
        graph = tmp_path / "stacks.folded"
        graph.write_text("main;work notanumber\n")
        assert main(["hotspots", str(graph)]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        assert main(["hotspots", str(tmp_path / "nope.folded")]) == 2


class TestCatalogCommand:
    def test_valid_catalog(self, tmp_path, capsys):
        path = tmp_path / "catalog.yaml"
        path.write_text(serialize_catalog(tiny_catalog()))
        assert main(["catalog", "validate", str(path)]) == 0
        out = capsys.readouterr().out
        assert "OK: version 1, 2 patterns, 2 themes" in out

    def test_schema_error_exits_2(self, tmp_path, capsys):
        path = tmp_path / "catalog.yaml"
        path.write_text("version: '1'\npatterns:\n  - id: x\n")
        assert main(["catalog", "validate", str(path)]) == 2
        assert "patterns[0]" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["catalog", "validate", str(tmp_path / "nope.yaml")]) == 2


class TestMeasureCommand:
    def test_writes_profile_document(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        config = write_config(tmp_path, tree, [])
        out_file = tmp_path / "measurement.json"
        rc = main(["--config", str(config), "measure", "--output", str(out_file)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "latency_ms" in stdout
        document = json.loads(out_file.read_text())
        assert document["schema_version"] == 1
        assert document["profile"]["latency_ms"] > 0
        assert len(document["profile"]["runs"]["latency"]) == 1

    def test_requires_config(self, capsys):
        assert main(["measure"]) == 2
        assert "config" in capsys.readouterr().err

    def test_failing_run_exits_1(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        (tree / "run.sh").write_text("exit 7\n")
        config = write_config(tmp_path, tree, [])
        assert main(["--config", str(config), "measure"]) == 1


class TestOptimizeCommand:
    def test_end_to_end_patches_tree_and_writes_report(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        config = write_config(tmp_path, tree, [("generator", reply_with(FAST_WORK))])
        rc = main(["--config", str(config), "optimize"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("Target")
        assert "iteration 1, attempt 1" in out
        assert "MODE: fast" in (tree / "lib.c").read_text()

        run_dir = tmp_path / "run-out"
        assert (run_dir / "summary.txt").is_file()
        assert (run_dir / "targets" / "001-work" / "outcome.json").is_file()

    def test_baseline_invalid_exits_1(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        (tree / "build.sh").write_text("echo broken build >&2\nexit 1\n")
        config = write_config(tmp_path, tree, [("generator", reply_with(FAST_WORK))])
        assert main(["--config", str(config), "optimize"]) == 1
        assert "baseline" in capsys.readouterr().err

    def test_retained_outcome_still_exits_0(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        config = write_config(tmp_path, tree, [("generator", reply_with(BROKEN_WORK))])

        def set_attempts(doc):
            doc["pipeline"]["max_attempts"] = 1

        config = write_config(tmp_path, tree, [("generator", reply_with(BROKEN_WORK))], set_attempts)
        assert main(["--config", str(config), "optimize"]) == 0
        assert "original retained" in capsys.readouterr().out
        assert "MODE: slow" in (tree / "lib.c").read_text()

    def test_missing_field_exits_2(self, tmp_path, capsys):
        tree = make_tree(tmp_path)

        def drop_run(doc):
            del doc["commands"]["run"]

        config = write_config(tmp_path, tree, [], drop_run)
        assert main(["--config", str(config), "optimize"]) == 2
        assert "commands.run" in capsys.readouterr().err

    def test_unknown_field_exits_2(self, tmp_path, capsys):
        tree = make_tree(tmp_path)

        def add_junk(doc):
            doc["surprise"] = 1

        config = write_config(tmp_path, tree, [], add_junk)
        assert main(["--config", str(config), "optimize"]) == 2
        assert "surprise" in capsys.readouterr().err

    def test_transcript_override_flag(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        config = write_config(
            tmp_path, tree, [("generator", "prose only, no code")],
        )
        better = tmp_path / "better.yaml"
        write_transcript(better, [("generator", reply_with(FAST_WORK))])
        rc = main(["--config", str(config), "optimize", "--transcript", str(better)])
        assert rc == 0
        assert "MODE: fast" in (tree / "lib.c").read_text()

    def test_attempt_override_flag(self, tmp_path, capsys):
        tree = make_tree(tmp_path)
        config = write_config(
            tmp_path,
            tree,
            [("generator", reply_with(BROKEN_WORK)), ("generator", reply_with(FAST_WORK))],
        )
        # Default max_attempts=3 would consume both entries; limiting to 1
        # must stop after the broken reply and keep the original.
        rc = main(["--config", str(config), "optimize", "--attempts", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "original retained" in out
        assert "MODE: slow" in (tree / "lib.c").read_text()


class TestReportCommand:
    def _run_optimize(self, tmp_path):
        tree = make_tree(tmp_path)
        config = write_config(tmp_path, tree, [("generator", reply_with(FAST_WORK))])
        assert main(["--config", str(config), "optimize"]) == 0
        return tmp_path / "run-out"

    def test_regeneration_matches_stored_summary(self, tmp_path, capsys):
        run_dir = self._run_optimize(tmp_path)
        capsys.readouterr()
        assert main(["report", str(run_dir)]) == 0
        assert capsys.readouterr().out == (run_dir / "summary.txt").read_text()

    def test_missing_directory_exits_2(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "absent")]) == 2

    def test_tampered_outcome_exits_1(self, tmp_path, capsys):
        run_dir = self._run_optimize(tmp_path)
        capsys.readouterr()
        outcome = run_dir / "targets" / "001-work" / "outcome.json"
        outcome.write_text(outcome.read_text().replace("MODE: fast", "MODE: speedy"))
        assert main(["report", str(run_dir)]) == 1
        assert "digest" in capsys.readouterr().err


class TestRunConfigLoading:
    def test_api_key_env_interpolation(self, tmp_path, monkeypatch):
        tree = make_tree(tmp_path)
        monkeypatch.setenv("PERFLOOP_TEST_KEY", "sekrit")

        def remote(doc):
            doc["backend"] = {
                "kind": "remote_chat",
                "endpoint": "http://localhost:9/v1/chat",
                "model": "m1",
                "api_key": "${PERFLOOP_TEST_KEY}",
            }

        config = write_config(tmp_path, tree, [], remote)
        loaded = load_run_config(str(config))
        assert loaded.backend_config.api_key == "sekrit"

    def test_api_key_missing_env_fails(self, tmp_path, monkeypatch):
        tree = make_tree(tmp_path)
        monkeypatch.delenv("PERFLOOP_NO_SUCH_KEY", raising=False)

        def remote(doc):
            doc["backend"] = {
                "kind": "remote_chat",
                "endpoint": "http://localhost:9/v1/chat",
                "model": "m1",
                "api_key": "${PERFLOOP_NO_SUCH_KEY}",
            }

        config = write_config(tmp_path, tree, [], remote)
        with pytest.raises(ConfigError) as err:
            load_run_config(str(config))
        assert err.value.path == "backend.api_key"

    def test_plain_api_key_passes_through(self, tmp_path):
        tree = make_tree(tmp_path)

        def remote(doc):
            doc["backend"] = {
                "kind": "remote_chat",
                "endpoint": "http://localhost:9/v1/chat",
                "model": "m1",
                "api_key": "literal-key",
            }

        config = write_config(tmp_path, tree, [], remote)
        assert load_run_config(str(config)).backend_config.api_key == "literal-key"

    def test_index_file_must_exist(self, tmp_path):
        tree = make_tree(tmp_path)

        def bad_index(doc):
            doc["index"] = [{"key": "x", "file": "missing.c", "unit": "x"}]

        config = write_config(tmp_path, tree, [], bad_index)
        with pytest.raises(ConfigError) as err:
            load_run_config(str(config))
        assert err.value.path == "index[0].file"

    def test_missing_transcript_fails(self, tmp_path):
        tree = make_tree(tmp_path)

        def bad_backend(doc):
            doc["backend"]["transcript"] = "absent.yaml"

        config = write_config(tmp_path, tree, [], bad_backend)
        with pytest.raises(ConfigError) as err:
            load_run_config(str(config))
        assert err.value.path == "backend.transcript"

    def test_bad_objective_metric(self, tmp_path):
        tree = make_tree(tmp_path)

        def bad_objective(doc):
            doc["pipeline"]["objective"] = {"speediness": 1.0}

        config = write_config(tmp_path, tree, [], bad_objective)
        with pytest.raises(ConfigError) as err:
            load_run_config(str(config))
        assert err.value.path == "pipeline.objective.speediness"

    def test_bad_ablation_value(self, tmp_path):
        tree = make_tree(tmp_path)

        def bad_ablation(doc):
            doc["pipeline"]["ablation"] = "mega"

        config = write_config(tmp_path, tree, [], bad_ablation)
        with pytest.raises(ConfigError) as err:
            load_run_config(str(config))
        assert err.value.path == "pipeline.ablation"

    def test_defaults_applied(self, tmp_path):
        tree = make_tree(tmp_path)

        def minimal(doc):
            doc.pop("pipeline")
            doc.pop("index")

        config = write_config(tmp_path, tree, [], minimal)
        loaded = load_run_config(str(config))
        assert loaded.pipeline.ablation is AblationMode.BASE
        assert loaded.pipeline.objective == {Metric.LATENCY: 1.0}
        assert loaded.index is None
        assert loaded.anchor == "*"
        assert loaded.hotspot_k == 10
        # No catalog key: the bundled seed catalog backs the run.
        assert len(loaded.catalog.patterns) >= 7

    def test_overrides_reach_pipeline(self, tmp_path):
        tree = make_tree(tmp_path)
        config = write_config(tmp_path, tree, [])
        loaded = load_run_config(
            str(config), {"pipeline.k": 3, "pipeline.ablation": "plus_context"}
        )
        assert loaded.pipeline.k == 3
        assert loaded.pipeline.ablation is AblationMode.PLUS_CONTEXT
