"""Tests that run the real pipeline end to end on tiny cohorts"""
import dataclasses
import json
from unittest import mock
from xml.etree import ElementTree

import numpy as np
import pandas as pd
import pytest
import torch

from causaldiffusion import dataio, harness, report
from causaldiffusion.config import config_hash, desk_scale, load_config, save_config
from causaldiffusion.diffusion import TrainingError
from causaldiffusion.metrics import METRICS, evaluate_cells
from causaldiffusion.simulator import cohort_counterfactuals
from tests.conftest import tiny_experiment


def simulated(config, path, gamma=5.0, seed=0):
    return harness.cmd_simulate(config, path / "data", gamma, seed)


def test_simulate_writes_dataset(experiment, tmp_path):
    data_dir = simulated(experiment, tmp_path)
    for split in harness.SPLITS:
        assert (data_dir / f"{split}_trajectories.cdt").exists()
        assert (data_dir / f"{split}_patients.cdt").exists()

    manifest = dataio.read_manifest(data_dir / "manifest.json")
    assert manifest.T == 6
    assert manifest.gamma == 5.0
    assert manifest.sizes == {"train": 24, "val": 8, "test": 4}
    assert manifest.channels == ["volume", "chemo", "radio", "stage"]

    cells = dataio.read_tensor(data_dir / "test_counterfactuals.cdt")
    assert cells.shape == (4, 5, 4, 10)
    _, trajectories = dataio.read_cohort(data_dir, "test")
    for i, traj in enumerate(trajectories):
        active = traj.active_len - 1
        assert np.all(np.isfinite(cells[i, :active]))
        assert np.all(np.isnan(cells[i, active:]))


def test_simulation_is_reproducible(experiment, tmp_path):
    first = harness.cmd_simulate(experiment, tmp_path / "a", 10.0, 3)
    second = harness.cmd_simulate(experiment, tmp_path / "b", 10.0, 3)
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_matching_dataset_is_reused(experiment, tmp_path):
    harness.prepare_data(experiment, tmp_path, [5.0], [0])
    with mock.patch("causaldiffusion.harness.cmd_simulate") as simulate:
        harness.prepare_data(experiment, tmp_path, [5.0], [0])
        harness.ensure_data(experiment, tmp_path / "data" / "gamma_5_seed_0", 5.0, 0)
    simulate.assert_not_called()


def test_changed_configuration_regenerates_data(experiment, tmp_path):
    harness.prepare_data(experiment, tmp_path, [5.0], [0])
    changed = tiny_experiment(tmp_path)
    changed.sim = dataclasses.replace(changed.sim, T=5, noise_sd=0.05)
    changed.cohort = dataclasses.replace(changed.cohort, train=30)
    harness.prepare_data(changed, tmp_path, [5.0], [0])

    data_dir = tmp_path / "data" / "gamma_5_seed_0"
    manifest = dataio.read_manifest(data_dir / "manifest.json")
    assert manifest.T == 5
    assert manifest.sizes["train"] == 30
    assert manifest.sim["noise_sd"] == 0.05
    assert manifest.sim_config_hash == config_hash(changed.sim.with_gamma(5.0))
    patients, _ = dataio.read_cohort(data_dir, "train")
    assert len(patients) == 30


@pytest.mark.parametrize(
    "change",
    [
        lambda c: setattr(c, "eval", dataclasses.replace(c.eval, truth_samples=12)),
        lambda c: setattr(c, "cohort", dataclasses.replace(c.cohort, test=5)),
    ],
)
def test_dataset_mismatch_triggers_simulation(experiment, tmp_path, change):
    harness.prepare_data(experiment, tmp_path, [0.0], [0])
    change(experiment)
    with mock.patch("causaldiffusion.harness.cmd_simulate") as simulate:
        harness.prepare_data(experiment, tmp_path, [0.0], [0])
    simulate.assert_called_once()


def test_unreadable_manifest_is_regenerated(experiment, tmp_path):
    data_dir = harness.ensure_data(experiment, tmp_path / "data", 5.0, 0)
    (data_dir / "manifest.json").write_text("{")
    harness.ensure_data(experiment, data_dir, 5.0, 0)
    assert dataio.read_manifest(data_dir / "manifest.json").seed == 0


def test_simulator_samples_score_near_zero(experiment, tmp_path):
    data_dir = simulated(experiment, tmp_path)
    manifest = dataio.read_manifest(data_dir / "manifest.json")
    patients, trajectories = dataio.read_cohort(data_dir, "test")
    truth = dataio.read_tensor(data_dir / "test_counterfactuals.cdt").astype(float)

    sim = experiment.sim.with_gamma(5.0)
    oracle = cohort_counterfactuals(patients, trajectories, sim, 50, seed=99)
    selected = np.isfinite(truth[..., 0])
    values = evaluate_cells(
        oracle[selected], truth[selected], None, manifest.V_max, K_q=10
    )
    assert values["w1"] < 0.5

    # A systematic 10% overestimate is clearly worse
    biased = evaluate_cells(
        oracle[selected] * 1.1, truth[selected], None, manifest.V_max, K_q=10
    )
    assert biased["w1"] > values["w1"]


def test_evaluate_with_missing_cells(experiment, tmp_path):
    data_dir = simulated(experiment, tmp_path)
    path = data_dir / "test_counterfactuals.cdt"
    cells = dataio.read_tensor(path)
    cells[0, 0, 2] = np.nan
    dataio.write_tensor(path, cells)
    with pytest.raises(dataio.CorruptionError) as excinfo:
        harness.cmd_evaluate(experiment, tmp_path / "missing.pt", data_dir, 0)
    assert "patient 0 step 0" in str(excinfo.value)


@pytest.mark.slow
def test_train_and_evaluate(experiment, tmp_path):
    data_dir = simulated(experiment, tmp_path)
    checkpoint, history = harness.cmd_train(experiment, data_dir, tmp_path / "model", 0)
    assert [h["epoch"] for h in history] == [1, 2]
    assert all(np.isfinite(h["train_loss"]) and h["val_loss"] >= 0 for h in history)
    losses = pd.read_csv(tmp_path / "model" / "losses.csv")
    assert list(losses.columns) == ["epoch", "train_loss", "val_loss", "lr"]

    rows = harness.cmd_evaluate(
        experiment, checkpoint, data_dir, 0, out=tmp_path / "results.csv"
    )
    assert [row[4] for row in rows] == list(METRICS)
    assert all(row[5] >= 0 and np.isfinite(row[5]) for row in rows)
    assert all(row[1] == 5.0 for row in rows)

    again = harness.cmd_evaluate(experiment, checkpoint, data_dir, 0)
    assert again == rows


@pytest.mark.slow
def test_resume_matches_uninterrupted_training(experiment, tmp_path):
    data_dir = simulated(experiment, tmp_path)
    full_checkpoint, full_history = harness.cmd_train(
        experiment, data_dir, tmp_path / "full", 0
    )

    interrupted = dataclasses.replace(
        experiment, train=dataclasses.replace(experiment.train, epochs=1)
    )
    harness.cmd_train(interrupted, data_dir, tmp_path / "resumed", 0)
    resumed_checkpoint, resumed_history = harness.cmd_train(
        experiment, data_dir, tmp_path / "resumed", 0, resume=True
    )

    assert resumed_history == full_history
    full_state = dataio.load_checkpoint(full_checkpoint)["model_state"]
    resumed_state = dataio.load_checkpoint(resumed_checkpoint)["model_state"]
    for name, value in full_state.items():
        assert torch.equal(value, resumed_state[name]), name
    assert (tmp_path / "full" / "losses.csv").read_bytes() == (
        tmp_path / "resumed" / "losses.csv"
    ).read_bytes()


@pytest.mark.slow
def test_sweep(tmp_path, monkeypatch):
    monkeypatch.delenv("CDM_THREADS", raising=False)
    out = tmp_path / "runs"
    config_path = tmp_path / "config.json"
    save_config(tiny_experiment(out), config_path)

    assert harness.main(["sweep", "--config", str(config_path), "--quiet"]) == 0
    results = report.read_results(out / "results.csv")
    assert len(results) == 3 * len(METRICS)
    assert sorted(results["gamma"].unique()) == [0.0, 5.0, 10.0]
    assert (results["value"] >= 0).all()
    assert results["config_hash"].nunique() == 3

    text = (out / "report.md").read_text()
    assert "gamma=0 | gamma=5 | gamma=10" in text
    for name in ("metrics.svg", "tails.svg"):
        assert ElementTree.parse(out / name).getroot().tag.endswith("svg")
    timings = pd.read_csv(out / "timings.csv")
    assert set(timings["stage"]) == {"simulate", "train", "evaluate"}

    first = (out / "results.csv").read_bytes()
    assert harness.main(["sweep", "--config", str(config_path), "--quiet"]) == 0
    assert (out / "results.csv").read_bytes() == first


@pytest.mark.slow
def test_ablate(tmp_path, monkeypatch):
    monkeypatch.delenv("CDM_THREADS", raising=False)
    config = tiny_experiment(tmp_path)
    assert harness.cmd_ablate(config) == []

    results = report.read_results(tmp_path / "results.csv")
    assert set(results["variant"]) == set(harness.ABLATIONS)
    assert len(results) == 6 * 3 * len(METRICS)
    # Variants share the simulated datasets
    assert len(list((tmp_path / "data").iterdir())) == 3
    text = (tmp_path / "report.md").read_text()
    assert "# Ablation" in text
    assert "Linear beta schedule" in text


@pytest.mark.slow
def test_seedvar(tmp_path, monkeypatch):
    monkeypatch.delenv("CDM_THREADS", raising=False)
    config = tiny_experiment(tmp_path)
    config.gammas = [0.0]
    config.seeds = [0, 1]
    assert harness.cmd_seedvar(config) == []
    results = report.read_results(tmp_path / "results.csv")
    assert sorted(results["seed"].unique()) == [0, 1]
    assert "# Seed variability" in (tmp_path / "report.md").read_text()


@pytest.mark.slow
def test_tune(tmp_path):
    selected = harness.cmd_tune(tiny_experiment(tmp_path))
    tuning = pd.read_csv(tmp_path / "tuning.csv")
    assert list(tuning.columns) == ["lr0", "embed_dim", "val_loss"]
    assert len(tuning) == 2
    best = tuning.loc[tuning["val_loss"].idxmin()]
    assert selected.model.embed_dim == best["embed_dim"]
    assert load_config(tmp_path / "tuned_config.json") == selected
    data = json.loads((tmp_path / "tuned_config.json").read_text())
    assert data["train"]["lr0"] == 1e-3


@pytest.mark.slow
def test_failing_point_does_not_stop_the_sweep(tmp_path, monkeypatch):
    monkeypatch.delenv("CDM_THREADS", raising=False)
    real_train = harness.cmd_train

    def flaky_train(config, data_dir, model_dir, seed, resume=False):
        if "gamma_5_" in str(model_dir):
            raise TrainingError("Loss diverged in epoch 1", epoch=1)
        return real_train(config, data_dir, model_dir, seed, resume)

    with mock.patch("causaldiffusion.harness.cmd_train", side_effect=flaky_train):
        failures = harness.cmd_sweep(tiny_experiment(tmp_path))

    assert [f[:3] for f in failures] == [("full", 5.0, 0)]
    results = report.read_results(tmp_path / "results.csv")
    assert sorted(results["gamma"].unique()) == [0.0, 10.0]
    assert "diverged" in (tmp_path / "failures.txt").read_text()


def metric_by_gamma(results, metric, variant="full"):
    rows = results[(results["metric"] == metric) & (results["variant"] == variant)]
    return rows.groupby("gamma")["value"].mean()


@pytest.mark.slow
@pytest.mark.desk
def test_desk_sweep_tracks_confounding(tmp_path):
    config = desk_scale()
    config.gammas = [0.0, 5.0, 10.0]
    config.seeds = [0]
    config.out = str(tmp_path)
    assert harness.cmd_sweep(config) == []

    results = report.read_results(tmp_path / "results.csv")
    w1 = metric_by_gamma(results, "w1")
    assert list(w1.index) == [0.0, 5.0, 10.0]
    assert w1.is_monotonic_increasing and w1.is_unique
    assert w1[0.0] < 0.5
    assert metric_by_gamma(results, "rmse_median")[0.0] < 2.0


@pytest.mark.slow
@pytest.mark.desk
def test_desk_ablation_prefers_attention(tmp_path):
    config = desk_scale()
    config.gammas = [5.0]
    config.seeds = [0]
    config.out = str(tmp_path)
    assert harness.cmd_ablate(config) == []

    results = report.read_results(tmp_path / "results.csv")
    full = metric_by_gamma(results, "w1")[5.0]
    simple = metric_by_gamma(results, "w1", variant="simple_nn")[5.0]
    assert 1.5 * full <= simple
