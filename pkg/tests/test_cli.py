import json

import numpy as np
import pytest

from excitest import cli, engine, store


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A small model trained via the CLI, shared across the module."""
    root = tmp_path_factory.mktemp("cli")
    model_path = root / "m.model.json"
    rc = cli.main(
        [
            "train", "--out", str(model_path), "--arch", "mlp64",
            "--epochs", "5", "--seed", "0",
        ]
    )
    assert rc == 0
    return root, model_path


def test_train_writes_model_and_manifest(trained):
    root, model_path = trained
    assert model_path.exists()
    assert model_path.with_suffix(".bin").exists()
    manifest = json.loads(
        model_path.with_suffix(".json.manifest.json").read_text()
    )
    assert manifest["command"] == "train"
    assert manifest["config"]["seed"] == 0
    assert manifest["config"]["epochs"] == 5
    model = store.load_model(model_path)
    assert model.metadata["test_accuracy"] > 0.8


def test_train_zero_epochs_yields_untrained_model(tmp_path):
    out = tmp_path / "z.model.json"
    rc = cli.main(["train", "--out", str(out), "--epochs", "0", "--seed", "3"])
    assert rc == 0
    model = store.load_model(out)
    arch = store.mlp_arch((1, 8, 8), hidden=32, classes=10)
    init = engine.init_weights((1, 8, 8), arch, seed=3)
    for w_model, w_init in zip(model.weights, init):
        for name in w_model:
            assert np.array_equal(w_model[name], w_init[name])


def test_fuzz_smoke_and_suite_format(trained):
    root, model_path = trained
    out = root / "suite.json"
    rc = cli.main(
        [
            "fuzz", "--model", str(model_path), "--out", str(out),
            "--seeds", "2", "--population", "6", "--iterations", "2",
            "--shapley-samples", "4", "--scope-limit", "10", "--seed", "1",
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert len(doc["cases"]) == 2
    for case in doc["cases"]:
        pixels = case["generated_input"]
        assert len(pixels) == 64
        assert all(0 <= v <= 255 for v in pixels)
        assert case["fitness_kind"] == "excitable"
    assert "test_error_count" in doc["summary"]


def test_probe_emits_sorted_neuron_report(trained):
    root, model_path = trained
    out = root / "probe.json"
    rc = cli.main(
        [
            "probe", "--model", str(model_path), "--out", str(out),
            "--samples", "20", "--scope-limit", "6", "--seed", "2",
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["estimator"] == "permutation_sampled"
    assert len(doc["neurons"]) == 6
    normalized = [abs(r["normalized"]) for r in doc["neurons"]]
    assert max(normalized) == pytest.approx(1.0, abs=1e-9)


def test_probe_exact_small_scope(trained):
    root, model_path = trained
    out = root / "probe_exact.json"
    rc = cli.main(
        [
            "probe", "--model", str(model_path), "--out", str(out),
            "--exact", "--scope-limit", "5", "--seed", "2",
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["estimator"] == "exact"
    assert doc["sample_count"] == 2**5


def test_clever_and_report_merge(trained):
    root, model_path = trained
    clever_out = root / "clever.json"
    rc = cli.main(
        [
            "clever", "--model", str(model_path), "--out", str(clever_out),
            "--probes", "2", "--nb", "3", "--ns", "32", "--seed", "4",
        ]
    )
    assert rc == 0
    doc = json.loads(clever_out.read_text())
    assert len(doc["scores"]) == 2
    assert doc["mean_score"] == pytest.approx(float(np.mean(doc["scores"])))

    merged_out = root / "merged.json"
    rc = cli.main(
        [
            "report", "--merge", str(root / "suite.json"), str(clever_out),
            "--out", str(merged_out),
        ]
    )
    assert rc == 0
    merged = json.loads(merged_out.read_text())
    assert set(merged) == {"suite", "clever"}
    assert merged_out.with_suffix(".csv").exists()


def test_retrain_smoke(trained):
    root, model_path = trained
    out = root / "r.model.json"
    rc = cli.main(
        [
            "retrain", "--model", str(model_path),
            "--suite", str(root / "suite.json"), "--out", str(out),
            "--benign", "30", "--generated", "5", "--epochs", "1",
            "--eval-seeds", "20", "--seed", "5",
        ]
    )
    assert rc == 0
    report = json.loads(out.with_suffix(".report.json").read_text())
    for key in ("asr_before", "asr_after", "benign_accuracy_before",
                "benign_accuracy_after", "accuracy_guard_tripped"):
        assert key in report
    assert store.load_model(out).metadata  # retrained model loads back


def test_usage_errors_exit_1(trained, capsys):
    root, model_path = trained
    rc = cli.main(
        ["fuzz", "--model", str(model_path), "--out", str(root / "x.json"),
         "--seeds", "0"]
    )
    assert rc == 1
    assert "usage error" in capsys.readouterr().err
    # unknown subcommand / missing required args also map to 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["train"]) == 1


def test_data_errors_exit_2(trained, tmp_path, capsys):
    root, model_path = trained
    rc = cli.main(
        ["fuzz", "--model", str(tmp_path / "missing.model.json"),
         "--out", str(tmp_path / "s.json"), "--seeds", "1"]
    )
    assert rc == 2
    assert "error" in capsys.readouterr().err
    # corrupt manifest
    bad = tmp_path / "bad.model.json"
    bad.write_text("{not json")
    rc = cli.main(
        ["fuzz", "--model", str(bad), "--out", str(tmp_path / "s.json"),
         "--seeds", "1"]
    )
    assert rc == 2


def test_outputs_are_written_atomically(trained):
    root, _ = trained
    leftovers = list(root.glob("*.tmp"))
    assert leftovers == []
