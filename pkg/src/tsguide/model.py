"""A trained diffusion model: denoiser parameters + schedule + metadata, and its checkpoint format.

Checkpoint layout::

    line 1   b"tsguide-checkpoint 1\\n"
    line 2   one-line JSON header (config, schedule scalars, metadata, seed, n_params)
    rest     n_params little-endian float32 values
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser
from .denoiser import DenoiserConfig, DenoiserParams
from .errors import ParameterError
from .schedule import NoiseSchedule, build_linear_schedule

CHECKPOINT_MAGIC = b"tsguide-checkpoint 1\n"


@dataclass
class DiffusionModel:
    params: DenoiserParams
    schedule: NoiseSchedule
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> DenoiserConfig:
        return self.params.config

    @property
    def T(self) -> int:
        return self.schedule.T

    def eps(self, x_t, t) -> np.ndarray:
        """Noise prediction as float64."""
        return np.asarray(denoiser.forward(self.params, x_t, t), dtype=np.float64)

    def eps_and_pullback(self, x_t, t):
        """Noise prediction plus a float64 input-VJP closure."""
        out, pullback = denoiser.vjp(self.params, x_t, t)

        def pull(v):
            return np.asarray(pullback(v)[0], dtype=np.float64)

        return np.asarray(out, dtype=np.float64), pull

    def astype(self, dtype) -> "DiffusionModel":
        return DiffusionModel(self.params.astype(dtype), self.schedule, dict(self.metadata))


def save_checkpoint(model: DiffusionModel, path) -> None:
    flat = np.asarray(model.params.flat)
    if flat.dtype != np.float32:
        raise ParameterError("checkpoints store float32 parameters; cast the model first")
    header = {
        "config": model.config.to_dict(),
        "schedule": {"T": model.schedule.T, "beta_1": model.schedule.beta_1, "beta_T": model.schedule.beta_T},
        "metadata": model.metadata,
        "init_seed": model.params.init_seed,
        "n_params": int(flat.size),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(line + b"\n")
        fh.write(flat.astype("<f4").tobytes())


def load_checkpoint(path) -> DiffusionModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ParameterError(f"{path}: not a tsguide checkpoint (bad format tag)")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    newline = rest.index(b"\n")
    header = json.loads(rest[:newline])
    payload = rest[newline + 1 :]
    n = header["n_params"]
    if len(payload) != 4 * n:
        raise ParameterError(f"{path}: expected {4 * n} parameter bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    cfg = DenoiserConfig(**header["config"])
    sched = build_linear_schedule(**header["schedule"])
    params = DenoiserParams(cfg, flat, header["init_seed"])
    return DiffusionModel(params, sched, header["metadata"])
