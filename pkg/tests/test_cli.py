import json

import jsonschema
import numpy as np
import pytest

from srddl import cli
from srddl.exceptions import NumericalFailure
from srddl.io import load_checkpoint, load_manifest, load_schema, read_scores_csv

SIM = ["--n-subjects", "8", "--synth-k", "2", "--m", "2", "--t", "5", "--p", "6"]
HP = ["--k", "2", "--iters", "2", "--epochs", "2", "--coeff-steps", "3", "--hidden", "4",
      "--head-width", "4"]


def _errors(capsys):
    lines = [json.loads(x) for x in capsys.readouterr().err.splitlines() if x.startswith("{")]
    return [x for x in lines if x.get("event") == "error"]


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--out", str(out), "--seed", "4", "--n-heldout", "3", *SIM]) == 0
    return out


@pytest.fixture(scope="module")
def trained(simulated, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(out), "--seed", "1", *HP])
    assert code == 0
    return out


def test_simulate_layout(simulated):
    assert (simulated / "ground_truth.zip").is_file()
    cohort = load_manifest(simulated / "cohort" / "manifest.json")
    held = load_manifest(simulated / "heldout" / "manifest.json")
    assert len(cohort.subjects) == 8 and len(held.subjects) == 3
    assert cohort.scores.shape == (8, 2)
    assert not set(cohort.subject_ids) & set(held.subject_ids)


def test_simulate_deterministic(simulated, tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--seed", "4", "--n-heldout", "3",
                     *SIM]) == 0
    for rel in ("ground_truth.zip", "cohort/scores.csv", "cohort/manifest.json",
                "cohort/correlations/sub00.npy", "heldout/adjacency/sub10.csv"):
        assert (tmp_path / rel).read_bytes() == (simulated / rel).read_bytes()


def test_train_outputs(trained):
    state = load_checkpoint(trained / "checkpoint.zip")
    assert state.iteration == 2 and state.b.shape == (6, 2)
    history = json.loads((trained / "history.json").read_text())
    assert len(history["history"]) == 2
    cfg = json.loads((trained / "resolved_config.json").read_text())
    assert cfg["command"] == "train" and cfg["k"] == 2 and cfg["seed"] == 1


def test_clip_norm_flag_reaches_hyperparameters(simulated, tmp_path):
    code = cli.main(["train", "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(tmp_path), "--clip-norm", "0.5", *HP])
    assert code == 0
    assert load_checkpoint(tmp_path / "checkpoint.zip").hp.clip_norm == 0.5


def test_train_from_resolved_config_is_identical(trained, tmp_path):
    code = cli.main(["train", "--config", str(trained / "resolved_config.json"),
                     "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "checkpoint.zip").read_bytes() == (trained / "checkpoint.zip").read_bytes()


def test_predict(simulated, trained, tmp_path):
    code = cli.main(["predict", "--checkpoint", str(trained / "checkpoint.zip"),
                     "--manifest", str(simulated / "heldout" / "manifest.json"),
                     "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads((tmp_path / "predictions.json").read_text())
    jsonschema.validate(doc, load_schema("prediction"))
    assert len(doc["subjects"]) == 3
    ids, pred = read_scores_csv(tmp_path / "predictions.csv")
    assert ids == [s["subject_id"] for s in doc["subjects"]]
    assert pred.shape == (3, 2) and np.all(np.isfinite(pred))


def test_evaluate(simulated, tmp_path):
    code = cli.main(["evaluate", "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(tmp_path), "--folds", "2", *HP])
    assert code == 0
    report = json.loads((tmp_path / "metric_report.json").read_text())
    jsonschema.validate(report, load_schema("metric_report"))
    assert len(report["mae_test"]) == 2
    lines = (tmp_path / "predictions.csv").read_text().splitlines()
    assert lines[0] == "subject_id,fold,score_1,score_2" and len(lines) == 9
    assert (tmp_path / "attention.csv").read_text().startswith("subject_id,fold,w_1,")


def test_scree(simulated, tmp_path):
    assert cli.main(["scree", "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "scree.csv").read_text().splitlines()
    assert len(lines) == 7


def test_noise_sweep(tmp_path):
    code = cli.main(["sweep", "--axis", "sigma_y", "--grid", "0,0.5", "--trials", "1",
                     "--n-heldout", "2", "--out", str(tmp_path), *SIM, *HP])
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("noise,s_mean,s_stderr") and len(lines) == 3


def test_lambda_sweep(simulated, tmp_path):
    code = cli.main(["sweep", "--axis", "lambda", "--grid", "0,1", "--folds", "2",
                     "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(tmp_path), *HP])
    assert code == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


def test_config_file_and_flag_precedence(simulated, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"out": str(tmp_path / "o"), "n_subjects": 5, "synth_k": 2,
                                "m": 1, "t": 4, "p": 5, "seed": 9}))
    assert cli.main(["simulate", "--config", str(conf), "--seed", "2"]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["seed"] == 2 and resolved["n_subjects"] == 5


@pytest.mark.parametrize("argv,match", [
    ([], "subcommand"),
    (["simulate"], "--out"),
    (["simulate", "--out", "x", "--p", "abc"], "invalid"),
    (["train", "--manifest", "/nonexistent/manifest.json"], "no such file"),
    (["sweep", "--axis", "sigma_y", "--grid", "a,b", "--out", "x"], "grid"),
])
def test_usage_errors(argv, match, capsys):
    assert cli.main(argv) == 2
    errors = _errors(capsys)
    assert errors and errors[0]["kind"] == "usage" and match in errors[0]["message"]


def test_config_errors(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["simulate", "--config", str(conf), "--out", str(tmp_path)]) == 2
    assert "unknown config keys" in _errors(capsys)[0]["message"]
    conf.write_text(json.dumps({"command": "train"}))
    assert cli.main(["simulate", "--config", str(conf), "--out", str(tmp_path)]) == 2
    assert "another subcommand" in _errors(capsys)[0]["message"]


def test_bad_variant_and_window(simulated, tmp_path, capsys):
    manifest = str(simulated / "cohort" / "manifest.json")
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path),
                     "--variant", "nope"]) == 2
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path),
                     "--window", "10"]) == 2
    assert all(e["kind"] == "usage" for e in _errors(capsys))


def test_corrupt_checkpoint_is_input_error(simulated, tmp_path, capsys):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"junk")
    code = cli.main(["predict", "--checkpoint", str(bad), "--out", str(tmp_path),
                     "--manifest", str(simulated / "heldout" / "manifest.json")])
    assert code == 2
    assert _errors(capsys)[0]["kind"] == "input"


def test_numerical_failure_exit_code(simulated, tmp_path, monkeypatch, capsys):
    real = cli.fit_variant

    def failing(variant, subjects, scores, hp, seed, callback):
        state = real(variant, subjects, scores, hp, seed, callback)
        exc = NumericalFailure("non-finite objective at iteration 3", step=3)
        exc.state = state
        raise exc

    monkeypatch.setattr(cli, "fit_variant", failing)
    code = cli.main(["train", "--manifest", str(simulated / "cohort" / "manifest.json"),
                     "--out", str(tmp_path), *HP])
    assert code == 3
    err = _errors(capsys)[0]
    assert err["kind"] == "numerical" and err["step"] == 3
    saved = load_checkpoint(err["checkpoint"])
    assert saved.iteration == 2
    assert not (tmp_path / "checkpoint.zip").exists()


def test_log_lines_are_json(simulated, tmp_path, capsys):
    cli.main(["scree", "--manifest", str(simulated / "cohort" / "manifest.json"),
              "--out", str(tmp_path), "--log-level", "debug"])
    lines = capsys.readouterr().err.splitlines()
    assert lines and all(isinstance(json.loads(x), dict) for x in lines)
