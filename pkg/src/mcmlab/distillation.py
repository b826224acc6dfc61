"""Motion consistency distillation, mixed-trajectory loss assembly and training loops."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .adversarial import Discriminator, FrameSample, discriminator_loss, generator_adv_per_sample, sample_frames
from .consistency import (
    ConsistencyStudent,
    SolverConfig,
    cd_loss,
    consistency_pair,
    draw_guidance,
    ema_update,
    huber_per_sample,
    make_student,
)
from .data import ImageDataset, VideoDataset
from .diffusion import DivergenceError, seeded
from .motion import MotionHead, MotionKind, extract_motion
from .trajectory import RngStreams, TrajectoryBatch, build_mixed_batch

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    lambda_adv: float = 0.3
    lambda_real: float = 0.5
    motion_kind: str = "learnable"
    l_frames: int = 2
    # larger than usual: the toy nets are tiny and the run is short
    lr_student: float = 5e-5
    lr_disc: float = 5e-4
    batch_size: int = 32
    total_steps: int = 1000
    seed: int = 0
    ema_rate: float = 0.95
    sigma_data: float = 0.5
    huber_delta: float = 0.01
    w_min: float = 2.0
    w_max: float = 4.0
    guidance: bool = True
    x0_clip: float | None = 1.0
    freq_cutoff: float = 0.25
    head_hidden: int = 64
    r1_weight: float = 0.0
    d_steps: int = 1
    grad_clip: float = 1.0
    disc_conditional: bool = False
    eval_fraction: float = 0.1
    eval_samples: int = 200
    eval_steps: tuple = (1, 2, 4, 8)

    def __post_init__(self):
        self.motion_kind = MotionKind(self.motion_kind).value
        self.eval_steps = tuple(self.eval_steps)
        if not 0.0 <= self.lambda_real <= 1.0:
            raise ValueError("lambda_real must be in [0, 1]")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.w_min, self.w_max, self.guidance, self.x0_clip, self.huber_delta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_steps"] = list(self.eval_steps)
        return d


def mcd_terms(student: ConsistencyStudent, teacher: nn.Module, batch: TrajectoryBatch, motion_kind,
              w: torch.Tensor, solver: SolverConfig, cutoff: float = 0.25) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample MCD loss and the online x0 prediction ``f_theta(x_t, t)``."""
    online, target, _ = consistency_pair(student, teacher, batch.x_t, batch.t, batch.cond, w, solver)
    m_online = extract_motion(online, motion_kind, student.head, use_twin=False, cutoff=cutoff)
    with torch.no_grad():
        m_target = extract_motion(target, motion_kind, student.head, use_twin=True, cutoff=cutoff)
    return huber_per_sample(m_online, m_target, solver.huber_delta), online


def mcd_loss(student: ConsistencyStudent, teacher: nn.Module, sample: TrajectoryBatch, motion_kind,
             rng: torch.Generator, solver: SolverConfig | None = None, cutoff: float = 0.25) -> torch.Tensor:
    """Batch-mean motion consistency distillation loss.

    Works on REAL and GENERATED points alike; with ``motion_kind=RAW`` it is
    exactly :func:`cd_loss` under the same generator state.
    """
    solver = solver or SolverConfig()
    w = draw_guidance(len(sample), solver, rng)
    per, _ = mcd_terms(student, teacher, sample, motion_kind, w, solver, cutoff)
    return per.mean()


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def mix_sources(per_sample: torch.Tensor, is_real: torch.Tensor, lambda_real: float) -> torch.Tensor:
    """``lambda_real * mean(REAL) + (1 - lambda_real) * mean(GENERATED)``.

    If a batch lacks one source the present one carries the full weight.
    """
    n_real = int(is_real.sum())
    n_gen = len(is_real) - n_real
    terms = []
    if n_real and lambda_real > 0:
        terms.append((lambda_real, per_sample[is_real].mean()))
    if n_gen and lambda_real < 1:
        terms.append((1.0 - lambda_real, per_sample[~is_real].mean()))
    if not terms:
        raise ValueError("batch has no samples from any source with nonzero weight")
    if len(terms) == 1:
        return terms[0][1]
    return terms[0][0] * terms[0][1] + terms[1][0] * terms[1][1]


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> float:
    return float(x[mask].mean()) if bool(mask.any()) else float("nan")


def total_loss(student: ConsistencyStudent, teacher: nn.Module, D: Discriminator, batch: TrajectoryBatch,
               config: DistillConfig, streams: RngStreams, real_images: torch.Tensor):
    """Generator and discriminator losses for one mixed batch.

    Returns ``(loss_G, loss_D, metrics)``.  Draw order: guidance scales from
    ``streams.noise``, then sparse frames from ``streams.adv``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    solver = config.solver
    w = draw_guidance(len(batch), solver, streams.noise)
    per_mcd, online = mcd_terms(student, teacher, batch, config.motion_kind, w, solver, config.freq_cutoff)
    cond = batch.cond if config.disc_conditional else None

    fs = sample_frames(online, config.l_frames, streams.adv)
    # each source contributes mean(MCD) + lambda_adv * mean(adv)
    loss_G = mix_sources(per_mcd, batch.is_real, config.lambda_real)
    if config.lambda_adv > 0:
        with frozen(D):
            adv = generator_adv_per_sample(D, fs, cond)
        loss_G = loss_G + config.lambda_adv * mix_sources(adv, batch.is_real, config.lambda_real)
    else:
        with torch.no_grad():
            adv = generator_adv_per_sample(D, fs, cond)

    fake = FrameSample(fs.frames.detach(), fs.indices)
    loss_D = discriminator_loss(D, fake, real_images, config.r1_weight, cond)
    metrics = {
        "mcd_real": _masked_mean(per_mcd.detach(), batch.is_real),
        "mcd_gen": _masked_mean(per_mcd.detach(), ~batch.is_real),
        "adv_G": float(adv.detach().mean()),
        "n_real": int(batch.is_real.sum()),
        "fake": fake,
        "cond": cond,
    }
    return loss_G, loss_D, metrics


# -- training loops ---------------------------------------------------------

def build_models(teacher: nn.Module, config: DistillConfig, schedule) -> tuple[ConsistencyStudent, Discriminator]:
    a = teacher.arch
    head = None
    if MotionKind(config.motion_kind) is MotionKind.LEARNABLE:
        in_dim = a["channels"] * a["height"] * a["width"]
        with seeded(config.seed + 101):
            head = MotionHead(in_dim, config.head_hidden, ema_rate=config.ema_rate)
    student = make_student(teacher, schedule, config.sigma_data, config.ema_rate, head)
    with seeded(config.seed + 202):
        D = Discriminator(a["channels"], num_classes=a["num_classes"], conditional=config.disc_conditional)
    return student, D


@dataclass
class TrainResult:
    student: ConsistencyStudent
    discriminator: Discriminator | None
    log: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def _check_finite(value: torch.Tensor, name: str, step: int):
    if not torch.isfinite(value):
        raise DivergenceError(f"{name} became {float(value.detach())} at step {step}", checkpoint=step)


def train_mcm(teacher: nn.Module, video_dataset: VideoDataset, image_dataset: ImageDataset, config: DistillConfig,
              schedule, evaluator=None, on_step=None) -> TrainResult:
    """Alternate generator and discriminator updates with EMA after every generator step.

    ``evaluator(student, step)`` returns a metrics dict and runs every
    ``eval_fraction * total_steps`` steps and after the last step.
    ``on_step(step, student, D, row)`` lets callers log and checkpoint.
    """
    if len(video_dataset) == 0 or len(image_dataset) == 0:
        raise ValueError("datasets must be nonempty")
    teacher.eval()
    teacher.requires_grad_(False)
    student, D = build_models(teacher, config, schedule)
    streams = RngStreams(config.seed)
    opt_G = torch.optim.Adam(student.online_parameters(), lr=config.lr_student)
    opt_D = torch.optim.Adam(D.parameters(), lr=config.lr_disc)
    videos = torch.from_numpy(video_dataset.videos)
    images = torch.from_numpy(image_dataset.images)
    result = TrainResult(student, D)
    eval_every = max(1, int(round(config.eval_fraction * config.total_steps))) if config.total_steps else 0

    for step in range(config.total_steps):
        batch = build_mixed_batch(video_dataset, student, config.batch_size, config.lambda_real, streams, videos)
        real = images[torch.randint(len(images), (config.batch_size,), generator=streams.adv)]
        loss_G, loss_D, m = total_loss(student, teacher, D, batch, config, streams, real)
        try:
            _check_finite(loss_G, "loss_G", step)
            _check_finite(loss_D, "loss_D", step)
        except DivergenceError as err:
            # no update has touched the parameters yet, so these are the last good ones
            err.models = (student, D)
            raise

        opt_G.zero_grad(set_to_none=True)
        loss_G.backward()
        if config.grad_clip:
            nn.utils.clip_grad_norm_(student.online_parameters(), config.grad_clip)
        opt_G.step()
        ema_update(student)

        for k in range(config.d_steps):
            if k:
                loss_D = discriminator_loss(D, m["fake"], real, config.r1_weight, m["cond"])
            opt_D.zero_grad(set_to_none=True)
            loss_D.backward()
            opt_D.step()

        row = {"step": step, "loss_G": float(loss_G.detach()), "loss_D": float(loss_D.detach()),
               "mcd_real": m["mcd_real"], "mcd_gen": m["mcd_gen"], "adv_G": m["adv_G"],
               "adv_D": float(loss_D.detach())}
        if evaluator is not None and eval_every and ((step + 1) % eval_every == 0 or step + 1 == config.total_steps):
            metrics = evaluator(student, step + 1)
            row.update(metrics)
            result.evals.append({"step": step + 1, **metrics})
        result.log.append(row)
        if on_step is not None:
            on_step(step, student, D, row)
    return result


def train_lcm(teacher: nn.Module, video_dataset: VideoDataset, config: DistillConfig, schedule) -> TrainResult:
    """Plain latent-consistency distillation baseline (RAW targets, no adversary, real data only).

    Uses the same seeded streams as :func:`train_mcm`, so the two loops
    produce identical losses when MCM is configured as this baseline.
    """
    teacher.eval()
    teacher.requires_grad_(False)
    base = DistillConfig(**{**config.to_dict(), "motion_kind": "raw"})
    student, _ = build_models(teacher, base, schedule)
    streams = RngStreams(config.seed)
    opt = torch.optim.Adam(student.online_parameters(), lr=config.lr_student)
    videos = torch.from_numpy(video_dataset.videos)
    labels = torch.from_numpy(video_dataset.labels)
    result = TrainResult(student, None)
    for step in range(config.total_steps):
        idx = torch.randint(len(videos), (config.batch_size,), generator=streams.data)
        loss = cd_loss(student, teacher, videos[idx], labels[idx], streams.noise, config.solver)
        _check_finite(loss, "cd_loss", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            nn.utils.clip_grad_norm_(student.online_parameters(), config.grad_clip)
        opt.step()
        ema_update(student)
        result.log.append({"step": step, "loss_G": float(loss.detach())})
    return result
