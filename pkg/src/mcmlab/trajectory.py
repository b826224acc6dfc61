"""Real and simulated high-quality trajectory points, and mixed-source batches."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .consistency import ConsistencyStudent, consistency_apply, draw_timesteps
from .data import VideoDataset
from .diffusion import _per_sample, add_noise
from .schedule import NoiseSchedule


class Source(enum.Enum):
    REAL = "real"
    GENERATED = "generated"


@dataclass(frozen=True)
class TrajectorySample:
    x_t: torch.Tensor
    t: int
    cond: int
    source: Source
    x_start: torch.Tensor
    eps: torch.Tensor


@dataclass
class TrajectoryBatch:
    """Column-wise batch of trajectory points; iterating yields :class:`TrajectorySample`."""

    x_t: torch.Tensor
    t: torch.Tensor
    cond: torch.Tensor
    is_real: torch.Tensor  # bool [B]
    x_start: torch.Tensor
    eps: torch.Tensor

    def __len__(self) -> int:
        return self.x_t.shape[0]

    def __getitem__(self, i: int) -> TrajectorySample:
        return TrajectorySample(self.x_t[i], int(self.t[i]), int(self.cond[i]),
                                Source.REAL if bool(self.is_real[i]) else Source.GENERATED,
                                self.x_start[i], self.eps[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def sources(self) -> list[Source]:
        return [Source.REAL if r else Source.GENERATED for r in self.is_real.tolist()]

    def select(self, mask: torch.Tensor) -> "TrajectoryBatch":
        return TrajectoryBatch(self.x_t[mask], self.t[mask], self.cond[mask], self.is_real[mask],
                               self.x_start[mask], self.eps[mask])

    @staticmethod
    def concat(parts: list["TrajectoryBatch"]) -> "TrajectoryBatch":
        parts = [p for p in parts if len(p)]
        if len(parts) == 1:
            return parts[0]
        return TrajectoryBatch(*(torch.cat([getattr(p, f) for p in parts]) for f in
                                 ("x_t", "t", "cond", "is_real", "x_start", "eps")))


class RngStreams:
    """Independent generators per purpose, so toggling one feature never shifts another's draws."""

    NAMES = ("data", "noise", "mix", "adv")

    def __init__(self, seed: int):
        self.seed = seed
        for k, name in enumerate(self.NAMES):
            setattr(self, name, torch.Generator().manual_seed(int(seed) * 7919 + k))

    def get_state(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).get_state() for name in self.NAMES}

    def set_state(self, state: dict) -> None:
        for name in self.NAMES:
            getattr(self, name).set_state(torch.as_tensor(state[name], dtype=torch.uint8))


def sample_real_point(x0: torch.Tensor, cond, schedule: NoiseSchedule, rng: torch.Generator,
                      t=None) -> TrajectoryBatch:
    """Noise dataset videos at solver-grid timesteps (draw order: t, then eps)."""
    B = x0.shape[0]
    t = draw_timesteps(schedule, B, rng) if t is None else _per_sample(t, B)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, schedule)
    return TrajectoryBatch(x_t, t, _per_sample(cond, B), torch.ones(B, dtype=torch.bool), x0, eps)


def simulate_hq_trajectory(student: ConsistencyStudent, cond, schedule: NoiseSchedule, rng: torch.Generator,
                           shape=None, t=None) -> TrajectoryBatch:
    """Seed a trajectory with a detached one-step generation and re-noise it.

    ``x0_hat = f_theta(x_T, T)`` with ``x_T ~ N(0, I)``, then
    ``x_t = alpha_t x0_hat + sigma_t eps``.  Draw order: x_T, t, eps.
    """
    cond = torch.as_tensor(cond).reshape(-1)
    if shape is None:
        a = student.backbone.arch
        shape = (len(cond), a["frames"], a["channels"], a["height"], a["width"])
    B = shape[0]
    cond = _per_sample(cond if cond.numel() > 1 else cond[0], B)
    dtype = next(student.backbone.parameters()).dtype
    x_T = torch.randn(shape, generator=rng, dtype=dtype)
    with torch.no_grad():
        x0_hat = consistency_apply(student, x_T, schedule.T, cond).detach()
    t = draw_timesteps(schedule, B, rng) if t is None else _per_sample(t, B)
    eps = torch.randn(shape, generator=rng, dtype=dtype)
    x_t = add_noise(x0_hat, eps, t, schedule)
    return TrajectoryBatch(x_t, t, cond, torch.zeros(B, dtype=torch.bool), x0_hat, eps)


def build_mixed_batch(dataset: VideoDataset, student: ConsistencyStudent, n: int, lambda_real: float,
                      streams: RngStreams, videos: torch.Tensor | None = None) -> TrajectoryBatch:
    """Each sample is REAL with probability ``lambda_real``, else GENERATED.

    REAL points come first in the batch.  Draws: sources and generated
    conditions from ``mix``, dataset indices from ``data``, real noise from
    ``noise``, simulated trajectories from ``mix``.
    """
    if not 0.0 <= lambda_real <= 1.0:
        raise ValueError(f"lambda_real must be in [0, 1], got {lambda_real}")
    schedule = student.schedule
    is_real = torch.rand(n, generator=streams.mix) < lambda_real
    n_real = int(is_real.sum())
    n_gen = n - n_real
    parts = []
    if n_real:
        if videos is None:
            videos = torch.from_numpy(dataset.videos)
        idx = torch.randint(len(videos), (n_real,), generator=streams.data)
        labels = torch.from_numpy(np.asarray(dataset.labels))[idx]
        parts.append(sample_real_point(videos[idx], labels, schedule, streams.noise))
    if n_gen:
        cond = torch.randint(dataset.params.num_classes, (n_gen,), generator=streams.mix)
        a = student.backbone.arch
        shape = (n_gen, a["frames"], a["channels"], a["height"], a["width"])
        parts.append(simulate_hq_trajectory(student, cond, schedule, streams.mix, shape=shape))
    return TrajectoryBatch.concat(parts)
