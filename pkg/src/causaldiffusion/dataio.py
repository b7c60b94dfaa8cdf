"""File formats and tensor assembly.

Tensors are stored in a small binary container ("CDT1" magic, dtype code,
rank, dims, then little-endian float32 payload in row-major order).
Manifests and configs are JSON. All writes go to a temporary file in the
target directory first and are then renamed into place.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from causaldiffusion.diffusion import MaskedBatch, get_mask
from causaldiffusion.simulator import (
    CHOICE_TREATMENTS,
    PatientParams,
    Terminal,
    Trajectory,
)

logger = logging.getLogger("causaldiffusion")

MAGIC = b"CDT1"
DTYPES = {1: np.dtype("<f4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
HEADER = struct.Struct("<4sII")

MANIFEST_VERSION = 1
CHECKPOINT_FORMAT = "causaldiffusion-checkpoint"
CHECKPOINT_VERSION = 1

CHANNELS = ("volume", "chemo", "radio", "stage")
VOLUME, CHEMO, RADIO, STAGE = range(len(CHANNELS))
PATIENT_COLUMNS = (
    "active_len",
    "terminal",
    "stage",
    "rho",
    "alpha",
    "beta",
    "beta_c",
    "v0",
    "patient_id",
)


class FormatError(RuntimeError):
    pass


class CorruptionError(FormatError):
    pass


def file_mode():
    """Mode a plain open() would give a new file under the current umask"""
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmpname = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as outfile:
            outfile.write(data)
        os.chmod(tmpname, file_mode())
        os.replace(tmpname, path)
    except BaseException:
        if os.path.exists(tmpname):
            os.unlink(tmpname)
        raise


def encode_tensor(array):
    array = np.ascontiguousarray(array, dtype=DTYPES[1])
    header = HEADER.pack(MAGIC, DTYPE_CODES[array.dtype], array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + dims + array.tobytes(order="C")


def decode_tensor(data, name="<tensor>"):
    if len(data) < HEADER.size:
        raise CorruptionError(f"{name}: file is too short for a header")
    magic, dtype_code, rank = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if dtype_code not in DTYPES:
        raise FormatError(f"{name}: unknown dtype code {dtype_code}")
    dims_end = HEADER.size + 8 * rank
    if len(data) < dims_end:
        raise CorruptionError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, HEADER.size)
    dtype = DTYPES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{name}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, array):
    atomic_write(path, encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as infile:
        return decode_tensor(infile.read(), name=str(path))


def normalize_volume(volume, V_max):
    return np.clip(np.asarray(volume, dtype=float) / V_max, 0.0, 1.0)


def denormalize_volume(value, V_max):
    return np.asarray(value, dtype=float) * V_max


def encode_stage(stage):
    return (stage - 1) / 3.0


def trajectory_rows(traj, params, V_max, length=None):
    """The (length x 4) channel grid of a trajectory.

    Row r holds V_r and the treatments decided at step r - 1, the ones that
    produced V_r. Row 0 has no treatment.
    """
    length = traj.active_len if length is None else length
    rows = np.zeros((length, len(CHANNELS)))
    rows[:, VOLUME] = normalize_volume(traj.volumes[:length], V_max)
    rows[1:, CHEMO] = traj.chemo_applied[: length - 1]
    rows[1:, RADIO] = traj.radio_applied[: length - 1]
    rows[:, STAGE] = encode_stage(params.stage)
    return rows


def assemble_training_tensor(patients, trajectories, V_max, T):
    """Stack a cohort into one MaskedBatch, last active volume masked"""
    if not trajectories:
        raise ValueError("Can not assemble an empty cohort")
    grids = []
    lengths = []
    skipped = 0
    for params, traj in zip(patients, trajectories):
        if traj.active_len < 2:
            skipped += 1
            continue
        grid = np.zeros((T, len(CHANNELS)))
        grid[: traj.active_len] = trajectory_rows(traj, params, V_max)
        grids.append(grid)
        lengths.append(traj.active_len)
    if skipped:
        logger.warning(f"Skipped {skipped} trajectories shorter than 2 steps.")
    if not grids:
        raise ValueError("No trajectory has at least 2 steps")

    data = torch.tensor(np.stack(grids), dtype=torch.float32)
    mask = get_mask(data.shape, lengths, [VOLUME], [1])
    return MaskedBatch(data, mask, torch.tensor(lengths))


def assemble_eval_tensor(traj, params, t, choice, V_max):
    """History through step t, treatment at t set to ``choice``, V_{t+1}
    masked. Steps after t + 1 are dropped."""
    if not 0 <= t < traj.active_len - 1:
        raise IndexError(
            f"Step {t} is outside the evaluation range [0, {traj.active_len - 2}]"
        )
    chemo, radio = CHOICE_TREATMENTS[choice]
    rows = trajectory_rows(traj, params, V_max, length=t + 2)
    rows[t + 1, VOLUME] = 0.0
    rows[t + 1, CHEMO] = chemo
    rows[t + 1, RADIO] = radio

    data = torch.tensor(rows[None], dtype=torch.float32)
    mask = get_mask(data.shape, [t + 2], [VOLUME], [1])
    return MaskedBatch(data, mask, torch.tensor([t + 2]))


def stack_batches(batches):
    return MaskedBatch(
        torch.cat([b.data for b in batches]),
        torch.cat([b.mask for b in batches]),
        torch.cat([b.seq_len for b in batches]),
    )


def cohort_arrays(patients, trajectories, T):
    traj_array = np.zeros((len(trajectories), T, 4))
    patient_array = np.zeros((len(patients), len(PATIENT_COLUMNS)))
    for i, (params, traj) in enumerate(zip(patients, trajectories)):
        n = traj.active_len
        traj_array[i, :n, 0] = traj.volumes
        traj_array[i, : n - 1, 1] = traj.chemo_applied
        traj_array[i, : n - 1, 2] = traj.radio_applied
        traj_array[i, : n - 1, 3] = traj.chemo_conc
        patient_array[i] = (
            n,
            int(traj.terminal),
            params.stage,
            params.rho,
            params.alpha,
            params.beta,
            params.beta_c,
            params.v0,
            i,
        )
    return traj_array, patient_array


def write_cohort(directory, split, patients, trajectories, T):
    directory = Path(directory)
    traj_array, patient_array = cohort_arrays(patients, trajectories, T)
    write_tensor(directory / f"{split}_trajectories.cdt", traj_array)
    write_tensor(directory / f"{split}_patients.cdt", patient_array)
    logger.info(f"Wrote {len(patients)} {split} patients to {directory}")


def read_cohort(directory, split):
    directory = Path(directory)
    traj_array = read_tensor(directory / f"{split}_trajectories.cdt")
    patient_array = read_tensor(directory / f"{split}_patients.cdt")
    if traj_array.shape[0] != patient_array.shape[0]:
        raise CorruptionError(f"{split} trajectory and patient files disagree")

    patients = []
    trajectories = []
    for traj_row, row in zip(traj_array.astype(float), patient_array.astype(float)):
        n = int(row[0])
        patients.append(
            PatientParams(
                rho=row[3],
                alpha=row[4],
                beta=row[5],
                beta_c=row[6],
                stage=int(row[2]),
                v0=row[7],
            )
        )
        trajectories.append(
            Trajectory(
                volumes=traj_row[:n, 0].copy(),
                chemo_applied=traj_row[: n - 1, 1].astype(np.int8),
                radio_applied=traj_row[: n - 1, 2].astype(np.int8),
                chemo_conc=traj_row[: n - 1, 3].copy(),
                terminal=Terminal(int(row[1])),
            )
        )
    return patients, trajectories


@dataclass
class DatasetManifest:
    sizes: dict
    T: int
    V_max: float
    gamma: float
    sim_config_hash: str
    seed: int
    sim: dict = field(default_factory=dict)
    channels: list = field(default_factory=lambda: list(CHANNELS))
    F: int = len(CHANNELS)
    truth_samples: int = 100
    version: int = MANIFEST_VERSION

    def validate(self):
        if self.version != MANIFEST_VERSION:
            raise FormatError(f"Unknown manifest version {self.version}")
        if len(self.channels) != self.F:
            raise FormatError(
                f"Manifest lists {len(self.channels)} channels for F={self.F}"
            )


def write_manifest(path, manifest):
    manifest.validate()
    text = json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n"
    atomic_write(path, text.encode("utf-8"))


def read_manifest(path):
    with open(path, "rt", encoding="utf-8") as infile:
        try:
            data = json.load(infile)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path} is not a valid manifest: {e}") from e
    try:
        manifest = DatasetManifest(**data)
    except TypeError as e:
        raise FormatError(f"{path} is not a valid manifest: {e}") from e
    manifest.validate()
    return manifest


def save_checkpoint(path, config, train_state):
    """``config`` is the plain-dict experiment configuration"""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "epoch": train_state.epoch,
        "history": train_state.history,
        "model_state": train_state.model_state,
        "optimizer_state": train_state.optimizer_state,
        "scheduler_state": train_state.scheduler_state,
        "generator_state": train_state.generator_state,
        "torch_rng_state": train_state.torch_rng_state,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    atomic_write(path, buffer.getvalue())


def load_checkpoint(path):
    # Our own files; optimizer and scheduler states are plain containers.
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path} has checkpoint version {payload.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload
