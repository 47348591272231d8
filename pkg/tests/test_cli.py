import json

import numpy as np
import pandas as pd
import pytest

from src.main import main
from src.utils.container import ArtifactContainer
from src.utils.tables import read_table, write_table

TINY_RUN = {
    "dataset": {"N": 8, "data_dim": 2, "seed": 1},
    "schedule": {"T": 10, "beta_min": 1e-3, "beta_max": 0.2},
    "architecture": {
        "time_embed_dim": 2,
        "layers": [{"out_dim": 4}, {"out_dim": 2, "activation": "identity"}],
    },
    "training": {"steps": 20, "batch_size": 4, "log_every": 10, "lr": 1e-2},
    "attribution": {"backend": "ekfac", "S": 4, "damping": [1e-3, 1e-1], "measurement_S": 4},
    "evaluation": {
        "M": 4,
        "K": 2,
        "Q": 2,
        "percent": [25.0],
        "proxy_timesteps": [1, 5],
        "target_timesteps": [2, 9],
    },
}


def run(config, out, *commands, extra=()):
    for command in commands:
        code = main([command, "--config", str(config), "--out", str(out), "--quiet", *extra])
        if code != 0:
            return code
    return 0


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return path


@pytest.mark.slow
def test_full_pipeline(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(
        config, out,
        "train", "sample", "measure", "factors", "influence", "cache",
        "lds-make", "lds-eval", "ablate-remove-top", "timestep-grid", "export-plotdata",
    ) == 0
    printed = capsys.readouterr().out
    assert "lds-eval completed successfully" in printed
    assert "exact_retraining" in printed

    scores, meta = read_table(out / "scores_ekfac_1.csv")
    assert scores.shape == (2, 9)
    assert meta["damping"] == "0.1"
    results, _ = read_table(out / "lds_results.csv")
    assert list(results["method"]) == ["ekfac", "ekfac", "random", "exact_retraining"]
    assert np.all(np.abs(results["lds_mean"]) <= 1.0)
    grid, _ = read_table(out / "plot_timestep_grid.csv")
    assert grid.shape == (2, 3)
    removal, _ = read_table(out / "remove_top.csv")
    assert set(removal["method"]) == {"ekfac", "random"}


@pytest.mark.parametrize("workers", [1, 4, 8])
def test_reruns_are_byte_identical_for_any_worker_count(config, tmp_path, workers):
    commands = ("train", "sample", "factors", "influence", "cache", "lds-make")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(config, a, *commands) == 0
    assert run(config, b, *commands, extra=("--workers", str(workers))) == 0
    names = (
        "model.dinf", "dataset.dinf", "queries.dinf", "curvature_ekfac.dinf",
        "scores_ekfac.dinf", "train_cache.dinf", "lds_benchmark.dinf",
    )
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_artifacts_from_another_config_are_refused(config, tmp_path):
    out = tmp_path / "out"
    assert run(config, out, "train") == 0
    changed = tmp_path / "changed.json"
    changed.write_text(json.dumps({**TINY_RUN, "training": {**TINY_RUN["training"], "steps": 21}}), encoding="utf-8")
    assert run(changed, out, "sample") == 1


def write_config(tmp_path, name, **attribution):
    path = tmp_path / name
    document = {**TINY_RUN, "attribution": {**TINY_RUN["attribution"], **attribution}}
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


def test_backends_share_one_lds_benchmark(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(config, out, "train", "sample", "factors", "influence", "lds-make") == 0
    projected = write_config(tmp_path, "trak.json", backend="projected", label="trak", d_proj=8, damping=[1e-2])
    assert run(projected, out, "factors", "influence", "lds-eval") == 0
    assert (out / "curvature_ekfac.dinf").exists() and (out / "curvature_trak.dinf").exists()
    results, _ = read_table(out / "lds_results.csv")
    assert list(results["method"]) == ["ekfac", "ekfac", "trak", "random", "exact_retraining"]

    other_measurement = write_config(tmp_path, "noisier.json", measurement_S=5)
    assert run(other_measurement, out, "lds-eval") == 1


def test_seed_override_changes_model(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(config, a, "train") == 0
    assert run(config, b, "train", extra=("--seed-override", "7")) == 0
    assert (a / "model.dinf").read_bytes() != (b / "model.dinf").read_bytes()


def test_invalid_config_exits_with_two(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"attribution": {"damping": [-1.0]}}), encoding="utf-8")
    assert main(["train", "--config", str(path), "--out", str(tmp_path), "--quiet"]) == 2
    assert "attribution.damping" in capsys.readouterr().err


def test_missing_input_artifact_fails(config, tmp_path):
    assert run(config, tmp_path / "empty", "factors") == 1


@pytest.mark.slow
def test_oracle_mean_predictions_score_one(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(config, out, "train", "sample", "lds-make") == 0
    oracle = ArtifactContainer.load(out / "lds_benchmark.dinf")["oracle"]
    predictions = pd.DataFrame(oracle.mean(axis=1), columns=[f"q{q}" for q in range(oracle.shape[2])])
    predictions.insert(0, "subset", np.arange(oracle.shape[0]))
    path = tmp_path / "predictions.csv"
    write_table(predictions, path, {})
    capsys.readouterr()
    assert run(config, out, "lds-eval", extra=("--predictions", str(path))) == 0
    assert "LDS 1.000" in capsys.readouterr().out
