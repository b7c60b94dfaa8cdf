import dataclasses

import pytest
import torch

from causaldiffusion import config as cfg
from causaldiffusion.simulator import simulate_cohort


def tiny_experiment(out="runs"):
    """A configuration small enough to run the whole pipeline in seconds"""
    config = cfg.ExperimentConfig()
    config.sim = dataclasses.replace(config.sim, T=6)
    config.gammas = [0.0, 5.0, 10.0]
    config.cohort = cfg.CohortSizes(train=24, val=8, test=4)
    config.model = cfg.DenoiserConfig(
        embed_dim=8,
        residual_layers=1,
        num_heads=2,
        kernel_size=(3, 3),
        ff_dim=8,
        encoder_cells=1,
        dropout=0.0,
        max_len=6,
    )
    config.train = cfg.TrainHyper(epochs=2, batch_size=16)
    config.eval = cfg.EvalConfig(model_samples=4, truth_samples=10, quantiles=10)
    config.seeds = [0]
    config.out = str(out)
    config.tune = cfg.TuneGrid(lr0=[1e-3], embed_dim=[4, 8])
    return config


def tiny_denoiser_config(**overrides):
    values = dict(
        embed_dim=8,
        residual_layers=1,
        num_heads=2,
        kernel_size=(3, 3),
        ff_dim=8,
        encoder_cells=1,
        dropout=0.0,
        max_len=6,
        diffusion_steps=5,
    )
    values.update(overrides)
    return cfg.DenoiserConfig(**values)


@pytest.fixture
def experiment(tmp_path):
    return tiny_experiment(tmp_path / "runs")


@pytest.fixture(scope="session")
def small_cohort():
    sim = cfg.SimConfig(T=8, gamma_chemo=5.0, gamma_radio=5.0)
    patients, trajectories = simulate_cohort(30, sim, seed=7)
    return sim, patients, trajectories


@pytest.fixture(autouse=True)
def seeded_torch():
    torch.manual_seed(0)
