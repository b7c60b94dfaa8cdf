"""Configuration objects for the simulator, the model and the experiments.

Everything is a dataclass so it can be written to and read from JSON,
hashed for manifests, and overridden from the command line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger("causaldiffusion")


class ConfigurationError(ValueError):
    pass


def sphere_volume(diameter):
    return math.pi / 6.0 * diameter**3


@dataclass
class StageDistribution:
    """Log-normal initial volume for one cancer stage (parameters of log V)."""

    mu: float
    sigma: float


@dataclass
class SimConfig:
    K_cc: float = sphere_volume(30.0)
    V_max: float = sphere_volume(13.0)
    gamma_chemo: float = 0.0
    gamma_radio: float = 0.0
    intercept: float = 13.0 / 2
    # Policy slope is gamma * gamma_scale per cm; 1 / D_max makes gamma
    # dimensionless.
    gamma_scale: float = 1.0 / 13.0
    window: int = 15
    noise_sd: float = 0.01
    chemo_dose: float = 5.0
    radio_dose: float = 2.0
    chemo_half_life: float = 1.0
    recover_prob: float = 0.0
    T: int = 30
    # Stages I, II, III, IV
    stage_weights: list = field(default_factory=lambda: [0.062, 0.006, 0.373, 0.559])
    stage_v0: list = field(
        default_factory=lambda: [
            StageDistribution(1.0, 0.8),
            StageDistribution(1.4, 0.8),
            StageDistribution(2.5, 0.8),
            StageDistribution(3.5, 0.8),
        ]
    )
    v0_low: float = 0.1
    v0_high_fraction: float = 0.95
    # (rho, alpha, beta_c)
    param_means: list = field(default_factory=lambda: [7.0e-5, 0.0398, 0.028])
    param_sds: list = field(default_factory=lambda: [7.23e-3, 0.168, 0.0007])
    param_corr: float = 0.0
    alpha_beta_ratio: float = 10.0

    @property
    def v0_bounds(self):
        return self.v0_low, self.V_max * self.v0_high_fraction

    def with_gamma(self, gamma):
        return dataclasses.replace(self, gamma_chemo=gamma, gamma_radio=gamma)

    def validate(self):
        if self.K_cc <= 0 or self.V_max <= 0:
            raise ConfigurationError("K_cc and V_max must be positive")
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}")
        if self.noise_sd < 0:
            raise ConfigurationError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if not 0 <= self.recover_prob <= 1:
            raise ConfigurationError(
                f"recover_prob must be in [0, 1], got {self.recover_prob}"
            )
        if self.T < 2:
            raise ConfigurationError(f"T must be >= 2, got {self.T}")
        if self.gamma_scale <= 0:
            raise ConfigurationError("gamma_scale must be positive")
        if self.chemo_half_life <= 0:
            raise ConfigurationError("chemo_half_life must be positive")
        if not self.stage_weights:
            raise ConfigurationError("stage_weights can not be empty")
        if len(self.stage_weights) != 4 or len(self.stage_v0) != 4:
            raise ConfigurationError("There must be exactly four cancer stages")
        if any(w < 0 for w in self.stage_weights) or sum(self.stage_weights) <= 0:
            raise ConfigurationError("stage_weights must be nonnegative and not all 0")
        for stage, dist in enumerate(self.stage_v0, start=1):
            if dist.sigma < 0:
                raise ConfigurationError(f"Stage {stage} has a negative sigma")
        low, high = self.v0_bounds
        if not 0 < low < high < self.V_max:
            raise ConfigurationError(
                f"Initial volume bounds must satisfy 0 < {low} < {high} < V_max"
            )
        if len(self.param_means) != 3 or len(self.param_sds) != 3:
            raise ConfigurationError("param_means and param_sds need 3 entries")
        if any(sd < 0 for sd in self.param_sds):
            raise ConfigurationError("param_sds must be >= 0")
        if not -1 < self.param_corr < 1:
            raise ConfigurationError("param_corr must be in (-1, 1)")
        if self.alpha_beta_ratio <= 0:
            raise ConfigurationError("alpha_beta_ratio must be positive")


@dataclass
class DenoiserConfig:
    embed_dim: int = 32
    residual_layers: int = 2
    num_heads: int = 8
    kernel_size: tuple = (3, 7)
    ff_dim: int = 64
    encoder_cells: int = 2
    dropout: float = 0.1
    backbone: str = "rsa"
    num_features: int = 4
    max_len: int = 60
    diffusion_steps: int = 5

    def validate(self):
        if min(self.embed_dim, self.residual_layers, self.num_heads) < 1:
            raise ConfigurationError("embed_dim, residual_layers, num_heads >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by "
                f"num_heads {self.num_heads}"
            )
        if len(self.kernel_size) != 2 or any(k % 2 == 0 for k in self.kernel_size):
            raise ConfigurationError(
                f"kernel_size extents must be odd, got {self.kernel_size}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.backbone not in ("rsa", "mlp"):
            raise ConfigurationError(f"Unknown backbone {self.backbone!r}")


@dataclass
class TrainHyper:
    epochs: int = 25
    batch_size: int = 200
    lr0: float = 1e-3
    lr_decay_factor: float = 0.9
    lr_min: float = 1e-6
    grad_clip: float = 4.0
    patience: int = 1
    plateau_threshold: float = 1e-5
    train_on_prefixes: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("epochs, batch_size and patience must be >= 1")
        if self.lr0 < 0 or self.lr_min <= 0 or self.grad_clip <= 0:
            raise ConfigurationError("lr0 >= 0, lr_min > 0 and grad_clip > 0")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError("lr_decay_factor must be in (0, 1)")


@dataclass
class DiffusionConfig:
    kind: str = "cosine"
    steps: int = 5

    def validate(self):
        if self.kind not in ("cosine", "linear"):
            raise ConfigurationError(f"Unknown schedule kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigurationError(f"Need at least one diffusion step, got {self.steps}")


@dataclass
class EvalConfig:
    model_samples: int = 20
    truth_samples: int = 100
    quantiles: int = 100
    raw_l1: bool = False
    batch_cells: int = 512

    def validate(self):
        if min(self.model_samples, self.truth_samples, self.quantiles) < 1:
            raise ConfigurationError("Sample and quantile counts must be >= 1")


@dataclass
class CohortSizes:
    train: int = 1000
    val: int = 200
    test: int = 200

    def validate(self):
        if min(self.train, self.val, self.test) < 1:
            raise ConfigurationError("Cohort sizes must be >= 1")


@dataclass
class TuneGrid:
    lr0: list = field(default_factory=lambda: [1e-3, 3e-4])
    embed_dim: list = field(default_factory=lambda: [16, 32])


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    gammas: list = field(default_factory=lambda: [0.0, 5.0, 10.0])
    cohort: CohortSizes = field(default_factory=CohortSizes)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    tune: TuneGrid = field(default_factory=TuneGrid)

    def validate(self):
        if not self.gammas:
            raise ConfigurationError("At least one gamma is required")
        if not self.seeds:
            raise ConfigurationError("At least one seed is required")
        if any(g < 0 for g in self.gammas):
            raise ConfigurationError("gammas must be nonnegative")
        self.sim.validate()
        self.cohort.validate()
        self.model.validate()
        self.train.validate()
        self.diffusion.validate()
        self.eval.validate()
        if self.model.max_len < self.sim.T:
            raise ConfigurationError(
                f"model.max_len {self.model.max_len} is shorter than T {self.sim.T}"
            )


def desk_scale(config=None):
    config = config or ExperimentConfig()
    config.cohort = CohortSizes(1000, 200, 200)
    config.sim.T = 30
    return config


def paper_scale(config=None):
    config = config or ExperimentConfig()
    config.cohort = CohortSizes(10000, 1000, 1000)
    config.sim.T = 60
    config.model.max_len = max(config.model.max_len, 60)
    return config


def to_dict(obj):
    data = dataclasses.asdict(obj)
    return json.loads(json.dumps(data))


def canonical_json(obj):
    if dataclasses.is_dataclass(obj):
        obj = to_dict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def from_dict(cls, data):
    """Build a (nested) config dataclass from plain JSON data"""
    if not isinstance(data, dict):
        raise ConfigurationError(f"Expected an object for {cls.__name__}")

    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(
            f"Unknown keys for {cls.__name__}: {', '.join(sorted(unknown))}"
        )

    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if fields[name].default_factory is not dataclasses.MISSING:
            default = fields[name].default_factory()
        if dataclasses.is_dataclass(default):
            value = from_dict(type(default), value)
        elif name == "stage_v0":
            value = [from_dict(StageDistribution, v) for v in value]
        elif name == "kernel_size":
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path):
    path = Path(path)
    logger.info(f"Loading configuration from {path}")
    with open(path, "rt", encoding="utf-8") as infile:
        try:
            data = json.load(infile)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
    config = from_dict(ExperimentConfig, data)
    config.validate()
    return config


def save_config(config, path):
    from causaldiffusion import dataio

    text = json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"
    dataio.atomic_write(path, text.encode("utf-8"))
