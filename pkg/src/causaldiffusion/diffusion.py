"""Masked denoising diffusion: schedules, noising, training and sampling.

Only masked coordinates take part in the diffusion. Observed coordinates
(history and planned treatments) are passed to the denoiser clean, both
while training and while sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from causaldiffusion.config import ConfigurationError
from causaldiffusion.denoiser import adam_step, make_optimizer

logger = logging.getLogger("causaldiffusion")

COSINE_OFFSET = 0.008
BETA_CLIP = (1e-5, 0.999)
LINEAR_BETAS = (1e-4, 0.5)
VALIDATION_SEED = 20240229


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class NoiseSchedule:
    """``betas[k - 1]`` is beta_k, ``alpha_bars[k]`` is the cumulative product
    up to k, with ``alpha_bars[0] == 1`` for the clean data."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str

    @property
    def K(self):
        return len(self.betas)

    def beta(self, k):
        return float(self.betas[k - 1])


def make_schedule(kind, K):
    if K < 1:
        raise ConfigurationError(f"Need at least one diffusion step, got {K}")
    if kind == "cosine":
        steps = np.arange(K + 1, dtype=np.float64)
        f = np.cos((steps / K + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        alpha_bars = f / f[0]
        betas = np.clip(1 - alpha_bars[1:] / alpha_bars[:-1], *BETA_CLIP)
    elif kind == "linear":
        betas = np.linspace(*LINEAR_BETAS, K, dtype=np.float64)
    else:
        raise ConfigurationError(f"Unknown schedule kind {kind!r}")

    # Recomputed from the (clipped) betas so both stay consistent.
    alpha_bars = np.concatenate([[1.0], np.cumprod(1 - betas)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, kind=kind)


@dataclass
class MaskedBatch:
    """data and mask are (B, T, F); mask is 1 where values are generated"""

    data: torch.Tensor
    mask: torch.Tensor
    seq_len: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.seq_len is None:
            self.seq_len = torch.full((self.data.shape[0],), self.data.shape[1])
        self.seq_len = torch.as_tensor(self.seq_len, dtype=torch.long)

    def __len__(self):
        return self.data.shape[0]

    def subset(self, index):
        return MaskedBatch(self.data[index], self.mask[index], self.seq_len[index])

    def truncate(self, length):
        return MaskedBatch(
            self.data[:, :length],
            self.mask[:, :length],
            self.seq_len.clamp(max=length),
        )

    def to(self, dtype):
        return MaskedBatch(self.data.to(dtype), self.mask.to(dtype), self.seq_len)


def get_mask(data_shape, seq_len, features_to_impute, last_n_time):
    if len(features_to_impute) != len(last_n_time):
        raise ConfigurationError(
            "features_to_impute and last_n_time must have the same length"
        )
    b, t, f = data_shape
    if any(not 0 <= feature < f for feature in features_to_impute):
        raise ConfigurationError(f"Feature index out of range for {f} features")

    seq_len = torch.as_tensor(seq_len, dtype=torch.long).reshape(-1).expand(b)
    steps = torch.arange(t)[None, :]
    mask = torch.zeros(data_shape)
    for feature, last_n in zip(features_to_impute, last_n_time):
        start = (seq_len - int(last_n)).clamp(min=0)[:, None]
        window = (steps >= start) & (steps < seq_len[:, None])
        mask[:, :, feature] = torch.maximum(mask[:, :, feature], window.float())
    return mask


def noise_batch(batch, k, sched, generator=None):
    """One-shot forward process on the masked coordinates.

    Returns the noised data and the full standard normal draw.
    """
    if not 0 <= int(k) <= sched.K:
        raise IndexError(f"Diffusion step {k} outside [0, {sched.K}]")
    data = batch.data
    eps = torch.randn(data.shape, generator=generator, dtype=data.dtype)
    alpha_bar = float(sched.alpha_bars[int(k)])
    noised = math.sqrt(alpha_bar) * data + math.sqrt(1 - alpha_bar) * eps
    return torch.where(batch.mask.bool(), noised, data), eps


def training_loss(model, batch, sched, generator=None):
    """Masked noise-prediction MSE, averaged over the masked entries only"""
    k = int(torch.randint(1, sched.K + 1, (1,), generator=generator))
    noised, eps = noise_batch(batch, k, sched, generator)
    eps_hat = model(noised, batch.mask, k)
    masked = batch.mask.sum()
    if masked == 0:
        logger.warning("Batch without masked entries, loss is 0.")
        return (eps_hat * 0).sum()
    return (((eps_hat - eps) * batch.mask) ** 2).sum() / masked


def expand_prefixes(batch, features_to_impute=(0,), last_n_time=(1,)):
    """Every prefix of length 2..seq_len of every item, last step masked"""
    items = []
    lengths = []
    for i, length in enumerate(batch.seq_len.tolist()):
        for prefix in range(2, length + 1):
            items.append(i)
            lengths.append(prefix)
    items = torch.tensor(items, dtype=torch.long)
    lengths = torch.tensor(lengths, dtype=torch.long)

    data = batch.data[items].clone()
    beyond = torch.arange(data.shape[1])[None, :] >= lengths[:, None]
    data[beyond] = 0
    mask = get_mask(data.shape, lengths, list(features_to_impute), list(last_n_time))
    return MaskedBatch(data, mask, lengths)


def iterate_batches(batch, batch_size, generator=None):
    """Batches of equal sequence length, truncated to that length.

    With a generator the items and the batch order are shuffled, without
    one the order is deterministic.
    """
    if generator is not None:
        order = torch.randperm(len(batch), generator=generator)
    else:
        order = torch.arange(len(batch))
    seq_len = batch.seq_len[order]
    sorted_len, by_len = torch.sort(seq_len, stable=True)
    order = order[by_len]

    chunks = []
    for length in torch.unique_consecutive(sorted_len).tolist():
        same = order[sorted_len == length]
        for start in range(0, len(same), batch_size):
            chunks.append((same[start : start + batch_size], length))

    if generator is not None:
        chunks = [
            chunks[i] for i in torch.randperm(len(chunks), generator=generator)
        ]
    for index, length in chunks:
        yield batch.subset(index).truncate(length)


def validation_loss(model, val_set, sched, batch_size):
    """Masked loss in eval mode with a fixed noise stream"""
    generator = torch.Generator().manual_seed(VALIDATION_SEED)
    was_training = getattr(model, "training", False)
    if isinstance(model, nn.Module):
        model.eval()
    total = 0.0
    with torch.no_grad():
        for batch in iterate_batches(val_set, batch_size):
            total += float(training_loss(model, batch, sched, generator)) * len(batch)
    if was_training:
        model.train()
    return total / len(val_set)


@dataclass
class TrainState:
    """Everything needed to continue a training run after ``epoch``"""

    epoch: int
    history: list
    model_state: dict
    optimizer_state: dict
    scheduler_state: dict
    generator_state: torch.Tensor
    torch_rng_state: torch.Tensor


def make_plateau_scheduler(optimizer, hyper):
    # patience counts the bad epochs that trigger a decay, torch counts the
    # bad epochs it tolerates.
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=hyper.lr_decay_factor,
        patience=hyper.patience - 1,
        threshold=hyper.plateau_threshold,
        threshold_mode="abs",
        min_lr=hyper.lr_min,
    )


def train(
    model,
    train_set,
    val_set,
    sched,
    hyper,
    generator,
    resume=None,
    on_epoch=None,
):
    """Algorithm: mask, noise, predict, masked MSE, clip, Adam, per batch.

    Returns the trained parameters and the per-epoch loss history.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("Training and validation sets can not be empty")
    hyper.validate()

    if hyper.train_on_prefixes:
        train_set = expand_prefixes(train_set)
        val_set = expand_prefixes(val_set)
    logger.info(
        f"Training on {len(train_set)} sequences, validating on {len(val_set)}."
    )

    optimizer = make_optimizer(model, hyper.lr0)
    scheduler = make_plateau_scheduler(optimizer, hyper)
    history = []
    start_epoch = 0

    if resume is not None:
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        scheduler.load_state_dict(resume.scheduler_state)
        generator.set_state(resume.generator_state)
        torch.set_rng_state(resume.torch_rng_state)
        history = list(resume.history)
        start_epoch = resume.epoch
        logger.info(f"Resuming training after epoch {start_epoch}.")
    else:
        # Dropout draws from the global torch stream
        torch.manual_seed(int(torch.randint(2**31 - 1, (1,), generator=generator)))

    for epoch in range(start_epoch, hyper.epochs):
        model.train()
        total = 0.0
        for batch in iterate_batches(train_set, hyper.batch_size, generator):
            optimizer.zero_grad()
            loss = training_loss(model, batch, sched, generator)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"Loss diverged in epoch {epoch + 1}", epoch=epoch + 1
                )
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
            adam_step(optimizer)
            total += loss.item() * len(batch)
            logger.debug(f"Epoch {epoch + 1} batch loss {loss.item():.6f}")

        train_loss = total / len(train_set)
        val_loss = validation_loss(model, val_set, sched, hyper.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(
                f"Validation loss diverged in epoch {epoch + 1}", epoch=epoch + 1
            )
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step(val_loss)
        new_lr = optimizer.param_groups[0]["lr"]
        if new_lr < lr:
            logger.info(f"Validation loss plateau, learning rate {lr:.3g} -> {new_lr:.3g}")

        history.append(
            {"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        )
        logger.info(
            f"Epoch {epoch + 1}/{hyper.epochs}: train {train_loss:.6f} "
            f"val {val_loss:.6f} lr {lr:.3g}"
        )
        if on_epoch is not None:
            on_epoch(
                TrainState(
                    epoch=epoch + 1,
                    history=list(history),
                    model_state=model.state_dict(),
                    optimizer_state=optimizer.state_dict(),
                    scheduler_state=scheduler.state_dict(),
                    generator_state=generator.get_state(),
                    torch_rng_state=torch.get_rng_state(),
                )
            )

    return model.state_dict(), history


def sample_reverse(model, condition, sched, n_samples, generator=None):
    """Ancestral sampling of the masked coordinates, n chains per item.

    Returns a tensor (n_samples, B, T, F); unmasked coordinates are the
    conditioning values.
    """
    if isinstance(model, nn.Module):
        model.eval()
    b, t, f = condition.data.shape
    data = condition.data.repeat(n_samples, 1, 1)
    mask = condition.mask.repeat(n_samples, 1, 1)
    generate = mask.bool()

    with torch.no_grad():
        z = torch.randn(data.shape, generator=generator, dtype=data.dtype)
        z = torch.where(generate, z, data)
        for k in range(sched.K, 0, -1):
            eps_hat = model(z, mask, k)
            beta = sched.beta(k)
            alpha_bar = float(sched.alpha_bars[k])
            alpha_bar_prev = float(sched.alpha_bars[k - 1])
            mean = (z - beta / math.sqrt(1 - alpha_bar) * eps_hat) / math.sqrt(1 - beta)
            if k > 1:
                sigma = math.sqrt(beta * (1 - alpha_bar_prev) / (1 - alpha_bar))
                noise = torch.randn(data.shape, generator=generator, dtype=data.dtype)
                mean = mean + sigma * noise
            z = torch.where(generate, mean, data)

    return z.reshape(n_samples, b, t, f)
