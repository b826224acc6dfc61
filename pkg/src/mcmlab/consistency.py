"""Consistency function, EMA target, plain consistency distillation and multi-step sampling."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffusion import _per_sample, add_noise, ddim_step
from .schedule import ConsistencyWeights, NoiseSchedule


@dataclass
class SolverConfig:
    """Teacher-solver settings shared by every distillation loss."""

    w_min: float = 2.0
    w_max: float = 4.0
    guidance: bool = True
    x0_clip: float | None = None
    huber_delta: float = 0.01


class ConsistencyStudent(nn.Module):
    """Online backbone ``F_theta``, its EMA target and an optional motion head.

    The target backbone never receives gradients; it only moves through
    :func:`ema_update`.
    """

    def __init__(self, backbone: nn.Module, weights: ConsistencyWeights, schedule: NoiseSchedule,
                 ema_rate: float = 0.95, head: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone
        self.target_backbone = copy.deepcopy(backbone)
        self.target_backbone.requires_grad_(False)
        self.weights = weights
        self.schedule = schedule
        self.ema_rate = float(ema_rate)
        self.head = head

    def online_parameters(self):
        """Parameters updated by the generator optimizer (backbone plus head)."""
        params = list(self.backbone.parameters())
        if self.head is not None:
            params += list(self.head.online_parameters())
        return params


class PreconditionedBackbone(nn.Module):
    """``F(x, t) = (x0_hat(x, t) - c_skip(t) x) / c_out(t)`` around an x0-predicting network.

    Plugged into the consistency function this gives ``f = x0_hat`` for
    every ``t > epsilon`` while ``f = x`` still holds exactly at epsilon.
    """

    def __init__(self, net: nn.Module, weights: ConsistencyWeights, schedule: NoiseSchedule):
        super().__init__()
        self.net = net
        self.net.output_kind = "x0"
        self.weights = weights
        self.schedule = schedule

    @property
    def arch(self) -> dict:
        return self.net.arch

    def forward(self, x: torch.Tensor, t, cond) -> torch.Tensor:
        B = x.shape[0]
        t = _per_sample(t, B)
        tn = self.schedule.normalized(t)
        view = (B,) + (1,) * (x.dim() - 1)
        c_skip = self.weights.c_skip(tn).to(x.dtype).reshape(view)
        c_out = self.weights.c_out(tn).to(x.dtype).reshape(view)
        safe = torch.where(c_out == 0, torch.ones_like(c_out), c_out)
        return (self.net(x, t, cond) - c_skip * x) / safe


def make_student(teacher: nn.Module, schedule: NoiseSchedule, sigma_data: float = 0.5, ema_rate: float = 0.95,
                 head: nn.Module | None = None, warm_start: bool = True) -> ConsistencyStudent:
    """Initialize a student backbone from the teacher's weights.

    With ``warm_start`` (velocity-parametrized teachers only) the untrained
    student reproduces the teacher's unguided x0 estimate.  Otherwise the
    last conv is zeroed and the untrained student is ``c_skip(t) x_t``.
    """
    from .schedule import consistency_weights

    weights = consistency_weights(sigma_data, schedule.epsilon_step, schedule.T)
    net = copy.deepcopy(teacher)
    net.requires_grad_(True)
    if warm_start and net.arch.get("parametrization") == "v":
        backbone = PreconditionedBackbone(net, weights, schedule)
    else:
        net.output_kind = "raw"
        with torch.no_grad():
            net.conv_out.weight.zero_()
            net.conv_out.bias.zero_()
        backbone = net
    return ConsistencyStudent(backbone, weights, schedule, ema_rate, head)


def consistency_apply(student: ConsistencyStudent, x_t: torch.Tensor, t, cond, use_target: bool = False) -> torch.Tensor:
    """``f(x_t, t) = c_skip(t) x_t + c_out(t) F(x_t, t)``; identity at ``t = epsilon``."""
    B = x_t.shape[0]
    t = _per_sample(t, B)
    net = student.target_backbone if use_target else student.backbone
    tn = student.schedule.normalized(t)
    view = (B,) + (1,) * (x_t.dim() - 1)
    c_skip = student.weights.c_skip(tn).to(x_t.dtype).reshape(view)
    c_out = student.weights.c_out(tn).to(x_t.dtype).reshape(view)
    return c_skip * x_t + c_out * net(x_t, t, cond)


def huber_distance(a: torch.Tensor, b: torch.Tensor, delta: float = 0.01) -> torch.Tensor:
    """Pseudo-Huber distance ``sqrt(||a - b||^2 + delta^2) - delta`` over the whole tensors."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.sqrt(((a - b) ** 2).sum() + delta**2) - delta


def huber_per_sample(a: torch.Tensor, b: torch.Tensor, delta: float = 0.01) -> torch.Tensor:
    """Pseudo-Huber distance per leading-axis sample."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = ((a - b) ** 2).reshape(a.shape[0], -1).sum(dim=1)
    return torch.sqrt(sq + delta**2) - delta


def draw_timesteps(schedule: NoiseSchedule, n: int, rng: torch.Generator) -> torch.Tensor:
    grid = torch.from_numpy(schedule.solver_timesteps())
    return grid[torch.randint(len(grid), (n,), generator=rng)]


def draw_guidance(n: int, solver: SolverConfig, rng: torch.Generator) -> torch.Tensor:
    return solver.w_min + (solver.w_max - solver.w_min) * torch.rand(n, generator=rng, dtype=torch.float64)


def consistency_pair(student: ConsistencyStudent, teacher: nn.Module, x_t: torch.Tensor, t: torch.Tensor,
                     cond, w, solver: SolverConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Online prediction at ``t`` and EMA-target prediction at the teacher's ``t - s``.

    Returns ``(online, target, t_prev)``; only ``online`` carries gradients.
    """
    schedule = student.schedule
    t_prev = (t - schedule.stride).clamp_min(schedule.epsilon_step)
    if (t_prev == t).any():
        raise ValueError("degenerate solver step: t - s == t (t is already at epsilon)")
    with torch.no_grad():
        x_prev = ddim_step(teacher, x_t, t, t_prev, cond, w.to(x_t.dtype) if torch.is_tensor(w) else w,
                           schedule, guidance=solver.guidance, x0_clip=solver.x0_clip)
        target = consistency_apply(student, x_prev, t_prev, cond, use_target=True)
    online = consistency_apply(student, x_t, t, cond)
    return online, target, t_prev


def cd_loss(student: ConsistencyStudent, teacher: nn.Module, x0: torch.Tensor, cond, rng: torch.Generator,
            solver: SolverConfig | None = None, t=None) -> torch.Tensor:
    """Batch-mean consistency distillation loss on real data.

    Draw order from ``rng``: timesteps, noise, guidance scales.
    """
    solver = solver or SolverConfig()
    B = x0.shape[0]
    t = draw_timesteps(student.schedule, B, rng) if t is None else _per_sample(t, B)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, student.schedule)
    w = draw_guidance(B, solver, rng)
    online, target, _ = consistency_pair(student, teacher, x_t, t, cond, w, solver)
    return huber_per_sample(online, target, solver.huber_delta).mean()


@torch.no_grad()
def ema_update(student: ConsistencyStudent) -> ConsistencyStudent:
    """``theta_minus <- mu theta_minus + (1 - mu) theta`` for backbone and head."""
    mu = student.ema_rate
    for p_tgt, p in zip(student.target_backbone.parameters(), student.backbone.parameters()):
        p_tgt.lerp_(p, 1.0 - mu)
    if student.head is not None:
        student.head.ema_update()
    return student


def cm_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Uniform index ladder over ``[epsilon, T]``, largest first, snapped to the solver lattice."""
    span = schedule.T - schedule.epsilon_step
    return [schedule.snap(round(schedule.T - i * span / num_steps)) for i in range(num_steps)]


@torch.no_grad()
def cm_sample(student: ConsistencyStudent, num_steps: int, cond, rng: torch.Generator, shape=None,
              clip: bool = True, x_T: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-step consistency sampling.

    ``shape`` is the batch video shape ``[B, F, C, H, W]``; it defaults to a
    batch the size of ``cond`` with the backbone geometry.
    """
    if num_steps not in (1, 2, 4, 8):
        raise ValueError(f"num_steps must be one of 1, 2, 4, 8; got {num_steps}")
    schedule = student.schedule
    if shape is None:
        a = student.backbone.arch
        B = len(cond) if torch.is_tensor(cond) and cond.dim() > 0 else 1
        shape = (B, a["frames"], a["channels"], a["height"], a["width"])
    if x_T is None:
        x_T = torch.randn(shape, generator=rng)
    ladder = cm_timesteps(schedule, num_steps)
    x0 = consistency_apply(student, x_T, ladder[0], cond)
    for t in ladder[1:]:
        z = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        x0 = consistency_apply(student, add_noise(x0, z, t, schedule), t, cond)
    return x0.clamp(-1.0, 1.0) if clip else x0
