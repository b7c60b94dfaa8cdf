"""PK-PD tumour growth simulator with a confounded treatment policy.

Tumour volume follows a Gompertz-like growth term, chemotherapy acts through
an exponentially decaying concentration and radiotherapy through the
linear-quadratic model. Treatments are assigned with a logistic policy on the
recent average tumour diameter; its slope gamma sets the amount of
time-dependent confounding.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from causaldiffusion.config import ConfigurationError

logger = logging.getLogger("causaldiffusion")

# Treatment choices, in the order the counterfactual cells are stored.
CHOICES = ("none", "chemo", "radio", "both")
CHOICE_TREATMENTS = {"none": (0, 0), "chemo": (1, 0), "radio": (0, 1), "both": (1, 1)}
MAX_REDRAWS = 10000


class Terminal(enum.IntEnum):
    ALIVE = 0
    DIED = 1
    RECOVERED = 2


@dataclass
class PatientParams:
    rho: float
    alpha: float
    beta: float
    beta_c: float
    stage: int
    v0: float


@dataclass
class Trajectory:
    """One patient's factual history.

    ``chemo_applied[t]``, ``radio_applied[t]`` and ``chemo_conc[t]`` are the
    decisions taken at step t and act on ``volumes[t + 1]``, so they are one
    entry shorter than ``volumes``.
    """

    volumes: np.ndarray
    chemo_applied: np.ndarray
    radio_applied: np.ndarray
    chemo_conc: np.ndarray
    terminal: Terminal = Terminal.ALIVE

    @property
    def active_len(self):
        return len(self.volumes)


@dataclass
class CounterfactualCell:
    patient_id: int
    t: int
    choice: str
    samples: np.ndarray


def volume_to_diameter(volume):
    return 2.0 * np.cbrt(3.0 * np.asarray(volume) / (4.0 * math.pi))


def diameter_to_volume(diameter):
    return math.pi / 6.0 * np.asarray(diameter) ** 3


def chemo_decay(config):
    return 2.0 ** (-1.0 / config.chemo_half_life)


def sample_patient(rng, config):
    """Draw the biological parameters of one patient"""
    if not config.stage_weights:
        raise ConfigurationError("stage_weights can not be empty")
    weights = np.asarray(config.stage_weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigurationError("stage_weights must be nonnegative and not all 0")
    if any(sd < 0 for sd in config.param_sds):
        raise ConfigurationError("param_sds must be >= 0")

    stage = int(rng.choice(len(weights), p=weights / weights.sum())) + 1
    v0 = _sample_v0(rng, config, stage)

    means = np.asarray(config.param_means, dtype=float)
    sds = np.asarray(config.param_sds, dtype=float)
    corr = np.full((3, 3), config.param_corr)
    np.fill_diagonal(corr, 1.0)
    cov = corr * np.outer(sds, sds)

    if not np.any(sds):
        draw = means
    else:
        # Truncated multivariate normal by rejection: growth and responses
        # must be strictly positive.
        for _ in range(MAX_REDRAWS):
            draw = rng.multivariate_normal(means, cov)
            if np.all(draw[sds > 0] > 0):
                break
        else:
            raise ConfigurationError(
                "Could not draw positive growth/response parameters, "
                "check param_means and param_sds"
            )

    rho, alpha, beta_c = (float(x) for x in draw)
    return PatientParams(
        rho=rho,
        alpha=alpha,
        beta=alpha / config.alpha_beta_ratio,
        beta_c=beta_c,
        stage=stage,
        v0=v0,
    )


def _sample_v0(rng, config, stage):
    dist = config.stage_v0[stage - 1]
    low, high = config.v0_bounds
    if dist.sigma < 0:
        raise ConfigurationError(f"Stage {stage} has a negative sigma")
    if dist.sigma == 0:
        return float(np.clip(math.exp(dist.mu), low, high))

    a = (math.log(low) - dist.mu) / dist.sigma
    b = (math.log(high) - dist.mu) / dist.sigma
    log_v0 = stats.truncnorm.rvs(a, b, loc=dist.mu, scale=dist.sigma, random_state=rng)
    return float(np.clip(math.exp(log_v0), low, high))


def tumor_step(v, chemo_conc, radio, p, config, eps):
    """Advance the tumour volume by one step, clamped to [0, V_max]"""
    if v <= 0:
        raise ValueError(f"Tumour volume must be positive, got {v}")
    growth = p.rho * math.log(config.K_cc / v)
    chemo_kill = p.beta_c * chemo_conc
    radio_kill = p.alpha * radio + p.beta * radio**2
    v_next = v * (1.0 + growth - chemo_kill - radio_kill + eps)
    return min(max(v_next, 0.0), config.V_max)


def treatment_prob(recent_diam, gamma, intercept):
    return float(1.0 / (1.0 + np.exp(-gamma * (recent_diam - intercept))))


def recent_diameter(volumes, t, window):
    start = max(0, t - window + 1)
    return float(np.mean(volume_to_diameter(volumes[start : t + 1])))


def simulate_factual(p, config, rng):
    volumes = [p.v0]
    chemo_applied = []
    radio_applied = []
    chemo_conc = []
    terminal = Terminal.ALIVE
    decay = chemo_decay(config)
    conc = 0.0

    for t in range(config.T - 1):
        diam = recent_diameter(volumes, t, config.window)
        chemo = rng.random() < treatment_prob(
            diam, config.gamma_chemo * config.gamma_scale, config.intercept
        )
        radio = rng.random() < treatment_prob(
            diam, config.gamma_radio * config.gamma_scale, config.intercept
        )
        conc = conc * decay + config.chemo_dose * chemo
        dose = config.radio_dose * radio
        eps = rng.normal(0.0, config.noise_sd) if config.noise_sd > 0 else 0.0

        v_next = tumor_step(volumes[-1], conc, dose, p, config, eps)

        chemo_applied.append(int(chemo))
        radio_applied.append(int(radio))
        chemo_conc.append(conc)
        volumes.append(v_next)

        if v_next >= config.V_max:
            terminal = Terminal.DIED
            break
        if v_next <= 0:
            terminal = Terminal.RECOVERED
            break
        if config.recover_prob > 0 and rng.random() < config.recover_prob:
            terminal = Terminal.RECOVERED
            break

    return Trajectory(
        volumes=np.asarray(volumes, dtype=float),
        chemo_applied=np.asarray(chemo_applied, dtype=np.int8),
        radio_applied=np.asarray(radio_applied, dtype=np.int8),
        chemo_conc=np.asarray(chemo_conc, dtype=float),
        terminal=terminal,
    )


def counterfactual_samples(traj, t, p, config, n, rng, patient_id=0):
    """Sample V_{t+1} under each of the four treatment choices at step t.

    The history through V_t is kept, only the decision at step t changes.
    """
    if not 0 <= t < traj.active_len - 1:
        raise IndexError(
            f"Step {t} is outside the counterfactual range "
            f"[0, {traj.active_len - 2}]"
        )
    if n < 1:
        raise ValueError("Need at least one counterfactual sample")

    prev_conc = traj.chemo_conc[t - 1] if t > 0 else 0.0
    decay = chemo_decay(config)
    v = traj.volumes[t]

    cells = []
    for choice in CHOICES:
        chemo, radio = CHOICE_TREATMENTS[choice]
        conc = prev_conc * decay + config.chemo_dose * chemo
        dose = config.radio_dose * radio
        if config.noise_sd > 0:
            eps = rng.normal(0.0, config.noise_sd, size=n)
        else:
            eps = np.zeros(n)
        samples = np.array(
            [tumor_step(v, conc, dose, p, config, e) for e in eps], dtype=float
        )
        cells.append(CounterfactualCell(patient_id, t, choice, samples))
    return cells


def patient_streams(seed, n):
    """Independent random generators, one per patient"""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(child) for child in children]


def simulate_cohort(n, config, seed):
    """Draw n patients and their factual trajectories.

    Returns the list of PatientParams and the list of Trajectories.
    """
    config.validate()
    patients = []
    trajectories = []
    for rng in patient_streams(seed, n):
        params = sample_patient(rng, config)
        patients.append(params)
        trajectories.append(simulate_factual(params, config, rng))

    died = sum(t.terminal == Terminal.DIED for t in trajectories)
    recovered = sum(t.terminal == Terminal.RECOVERED for t in trajectories)
    logger.info(
        f"Simulated {n} patients (gamma chemo={config.gamma_chemo}, "
        f"radio={config.gamma_radio}): {died} died, {recovered} recovered."
    )
    return patients, trajectories


def cohort_counterfactuals(patients, trajectories, config, n, seed):
    """All one-step-ahead counterfactual cells of a cohort.

    Returns an array of shape (patients, T - 1, 4, n), NaN where the patient
    was no longer active.
    """
    cells = np.full((len(patients), config.T - 1, len(CHOICES), n), np.nan)
    streams = patient_streams(seed, len(patients))
    for i, (params, traj, rng) in enumerate(zip(patients, trajectories, streams)):
        for t in range(traj.active_len - 1):
            for c, cell in enumerate(
                counterfactual_samples(traj, t, params, config, n, rng, patient_id=i)
            ):
                cells[i, t, c] = cell.samples
    return cells
