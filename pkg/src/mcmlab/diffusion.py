"""Forward process, epsilon-prediction denoisers, guidance, DDIM steps, teacher training."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NULL_CLASS, VideoDataset
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-4


class ShapeError(ValueError):
    pass


class SingularStepError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Non-finite loss.  ``checkpoint`` names the last good checkpoint (a step or a path)."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@contextlib.contextmanager
def seeded(seed: int):
    """Run module construction under a fixed seed without touching the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _per_sample(value, batch: int, dtype=torch.long) -> torch.Tensor:
    value = torch.as_tensor(value, dtype=dtype)
    if value.dim() == 0:
        value = value.expand(batch)
    return value


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """``x_t = alpha_t x0 + sigma_t eps``; ``t`` is an int or a per-sample tensor."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t)
    return schedule.alpha(t, like=x0) * x0 + schedule.sigma(t, like=x0) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t)
    alpha = schedule.alpha(t, like=x_t)
    if (alpha <= 0).any():
        raise SingularStepError("alpha_t = 0: x0 is not recoverable from an epsilon prediction")
    return (x_t - schedule.sigma(t, like=x_t) * eps_hat) / alpha


def _cond_index(cond: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.where(cond == NULL_CLASS, torch.full_like(cond, num_classes), cond)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of normalized time ``t`` in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


OUTPUT_KINDS = ("eps", "x0", "raw")


class Denoiser(nn.Module):
    """Small conv net over frames-as-channels ``[B, F*C, H, W]``.

    Time enters through a sinusoidal embedding and the class through an
    additive embedding (index ``num_classes`` is the NULL token).  The
    output has the same shape as the input video.

    With ``parametrization="v"`` the network body predicts the velocity
    ``v = alpha eps - sigma x0`` and ``forward`` returns
    ``eps = sigma x_t + alpha v``, which stays exact at zero-SNR timesteps.
    ``output_kind`` switches ``forward`` to the implied x0 estimate
    ``alpha x_t - sigma v`` or to the raw body output.
    """

    def __init__(self, frames: int = 8, channels: int = 1, height: int = 16, width: int = 16,
                 hidden: int = 32, time_dim: int = 32, num_classes: int = 8, num_train_steps: int = 1000,
                 schedule: NoiseSchedule | None = None, parametrization: str = "eps"):
        super().__init__()
        if parametrization not in ("eps", "v"):
            raise ValueError(f"unknown parametrization {parametrization!r}")
        if parametrization == "v" and schedule is None:
            raise ValueError("velocity parametrization needs the noise schedule")
        self.arch = dict(frames=frames, channels=channels, height=height, width=width, hidden=hidden,
                         time_dim=time_dim, num_classes=num_classes, num_train_steps=num_train_steps,
                         parametrization=parametrization)
        self.output_kind = "eps"
        if schedule is not None:
            self.register_buffer("alpha_table", schedule._alpha_t.clone(), persistent=False)
            self.register_buffer("sigma_table", schedule._sigma_t.clone(), persistent=False)
        else:
            self.alpha_table = self.sigma_table = None
        in_ch = frames * channels
        emb = 2 * hidden
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_emb = nn.Embedding(num_classes + 1, emb)
        self.conv_in = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.block1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, hidden)
        self.down = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, 2 * hidden)
        self.up = nn.Conv2d(2 * hidden, hidden, 3, padding=1)
        self.block2 = nn.Conv2d(2 * hidden, hidden, 3, padding=1)
        self.norm3 = nn.GroupNorm(8, hidden)
        self.conv_out = nn.Conv2d(hidden, in_ch, 3, padding=1)

    @property
    def num_classes(self) -> int:
        return self.arch["num_classes"]

    def forward(self, x: torch.Tensor, t, cond) -> torch.Tensor:
        out = self.body(x, t, cond)
        if self.output_kind == "raw":
            return out
        if self.arch["parametrization"] == "eps":
            if self.output_kind == "x0":
                raise ValueError("x0 output needs the velocity parametrization")
            return out
        B = x.shape[0]
        t = _per_sample(t, B).to(x.device)
        view = (B,) + (1,) * (x.dim() - 1)
        alpha = self.alpha_table[t].to(x.dtype).reshape(view)
        sigma = self.sigma_table[t].to(x.dtype).reshape(view)
        if self.output_kind == "x0":
            return alpha * x - sigma * out
        return sigma * x + alpha * out

    def body(self, x: torch.Tensor, t, cond) -> torch.Tensor:
        """Raw network output (epsilon or velocity, depending on the parametrization)."""
        shape = x.shape
        B = shape[0]
        a = self.arch
        h = x.reshape(B, a["frames"] * a["channels"], a["height"], a["width"])
        t = _per_sample(t, B).to(x.device)
        cond = _per_sample(NULL_CLASS if cond is None else cond, B).to(x.device)
        t_norm = t.to(x.dtype) / a["num_train_steps"]
        emb = self.time_mlp(timestep_embedding(t_norm, a["time_dim"])) + self.class_emb(_cond_index(cond, self.num_classes))
        hid = a["hidden"]

        h1 = F.silu(self.conv_in(h))
        h1 = h1 + emb[:, :hid, None, None]
        h1 = F.silu(self.norm1(self.block1(h1)))
        h2 = F.silu(self.down(h1))
        h2 = h2 + emb[:, :, None, None]
        h2 = F.silu(self.norm2(self.mid(h2)))
        u = F.silu(self.up(F.interpolate(h2, scale_factor=2, mode="nearest")))
        u = F.silu(self.norm3(self.block2(torch.cat([u, h1], dim=1))))
        return self.conv_out(u).reshape(shape)

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat_parameters(self, vec) -> None:
        nn.utils.vector_to_parameters(torch.as_tensor(vec, dtype=next(self.parameters()).dtype), self.parameters())


class AnalyticGaussianDenoiser(nn.Module):
    """Optimal epsilon predictor for data ``N(mu, s^2 I)``; ignores the condition."""

    def __init__(self, schedule: NoiseSchedule, mu: float, s: float):
        super().__init__()
        self.schedule = schedule
        self.mu = float(mu)
        self.s = float(s)

    def forward(self, x, t, cond=None):
        t = _per_sample(t, x.shape[0])
        a = self.schedule.alpha(t, like=x)
        sg = self.schedule.sigma(t, like=x)
        return (x - a * self.mu) * sg / (sg**2 + a**2 * self.s**2)


def guided_eps(denoiser: nn.Module, x_t: torch.Tensor, t, cond, w) -> torch.Tensor:
    """Classifier-free guidance ``eps_u + w (eps_c - eps_u)``.

    Conditional and NULL branches run in one batched forward pass.
    """
    B = x_t.shape[0]
    cond = _per_sample(cond, B).to(x_t.device)
    if (cond == NULL_CLASS).any():
        raise ValueError("guided_eps needs a non-NULL condition")
    t = _per_sample(t, B).to(x_t.device)
    both = denoiser(torch.cat([x_t, x_t]), torch.cat([t, t]), torch.cat([cond, torch.full_like(cond, NULL_CLASS)]))
    eps_c, eps_u = both[:B], both[B:]
    w = torch.as_tensor(w, dtype=x_t.dtype, device=x_t.device)
    if w.dim() > 0:
        w = w.reshape((B,) + (1,) * (x_t.dim() - 1))
    # lerp is exact at w=0, w=1 and when eps_c == eps_u
    return torch.lerp(eps_u, eps_c, w.expand_as(eps_c))


def ddim_step(denoiser: nn.Module, x_t: torch.Tensor, t, t_prev, cond, w, schedule: NoiseSchedule,
              guidance: bool = True, alpha_floor: float = ALPHA_FLOOR,
              x0_clip: float | None = None) -> torch.Tensor:
    """One deterministic DDIM step from ``t`` to ``t_prev`` (per-sample).

    At zero-SNR timesteps the x0 inversion divides by ``max(alpha_t,
    alpha_floor)``.  ``x0_clip`` optionally clamps the x0 estimate to
    ``[-x0_clip, x0_clip]``.  Samples with ``t_prev == t`` are returned
    unchanged.
    """
    B = x_t.shape[0]
    t = _per_sample(t, B)
    t_prev = _per_sample(t_prev, B)
    if (t_prev > t).any():
        raise ValueError("ddim_step requires t_prev <= t")
    if guidance:
        eps_hat = guided_eps(denoiser, x_t, t, cond, w)
    else:
        eps_hat = denoiser(x_t, t, cond)
    alpha = schedule.alpha(t, like=x_t).clamp_min(alpha_floor)
    x0_hat = (x_t - schedule.sigma(t, like=x_t) * eps_hat) / alpha
    if x0_clip is not None:
        x0_hat = x0_hat.clamp(-x0_clip, x0_clip)
    x_prev = schedule.alpha(t_prev, like=x_t) * x0_hat + schedule.sigma(t_prev, like=x_t) * eps_hat
    same = (t_prev == t).reshape((B,) + (1,) * (x_t.dim() - 1)).to(x_t.device)
    return torch.where(same, x_t, x_prev)


@torch.no_grad()
def ddim_sample(denoiser: nn.Module, shape, cond, schedule: NoiseSchedule, num_steps: int = 50,
                w: float = 1.0, generator: torch.Generator | None = None, x_T: torch.Tensor | None = None,
                guidance: bool = True, x0_clip: float | None = None) -> torch.Tensor:
    """Integrate the empirical PF-ODE from ``T`` to ``epsilon_step`` in ``num_steps`` DDIM steps."""
    if x_T is None:
        x_T = torch.randn(shape, generator=generator, dtype=torch.float32)
    ts = np.linspace(schedule.T, schedule.epsilon_step, num_steps + 1).round().astype(np.int64)
    x = x_T
    for t, tp in zip(ts[:-1], ts[1:]):
        x = ddim_step(denoiser, x, int(t), int(tp), cond, w, schedule, guidance=guidance, x0_clip=x0_clip)
    return x


# -- teacher training -------------------------------------------------------

@dataclass
class TeacherConfig:
    hidden: int = 32
    time_dim: int = 32
    lr: float = 2e-3
    batch_size: int = 64
    steps: int = 3000
    cond_drop: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    parametrization: str = "v"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TeacherState:
    """Everything needed to resume teacher training bit-compatibly."""

    model: Denoiser
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    log: list = field(default_factory=list)


def init_teacher_state(dataset: VideoDataset, config: TeacherConfig, schedule: NoiseSchedule) -> TeacherState:
    if len(dataset) == 0:
        raise ValueError("teacher training needs a nonempty dataset")
    p = dataset.params
    with seeded(config.seed):
        model = Denoiser(p.frames, p.channels, p.height, p.width, config.hidden, config.time_dim,
                         p.num_classes, schedule.T, schedule, config.parametrization)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    return TeacherState(model, opt, gen)


def teacher_loss(model: nn.Module, x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared epsilon-prediction error.

    Velocity-parametrized models are scored in velocity space, which is the
    epsilon error weighted by ``1 / alpha_t^2``; unweighted, the zero-SNR
    end of the schedule would receive no gradient at all.
    """
    x_t = add_noise(x0, eps, t, schedule)
    if getattr(model, "arch", {}).get("parametrization") == "v":
        v = schedule.alpha(t, like=x0) * eps - schedule.sigma(t, like=x0) * x0
        return F.mse_loss(model.body(x_t, t, cond), v)
    return F.mse_loss(model(x_t, t, cond), eps)


def train_teacher(dataset: VideoDataset, config: TeacherConfig, schedule: NoiseSchedule,
                  state: TeacherState | None = None, on_checkpoint=None,
                  checkpoint_every: int = 0) -> tuple[Denoiser, list[dict]]:
    """Minimize the epsilon-prediction MSE with 10% (configurable) condition dropout.

    Pass ``state`` to resume; ``on_checkpoint(state)`` is called every
    ``checkpoint_every`` steps.  Returns the model and the loss log.
    """
    if state is None:
        state = init_teacher_state(dataset, config, schedule)
    videos = torch.from_numpy(dataset.videos)
    labels = torch.from_numpy(dataset.labels)
    model, opt, gen = state.model, state.optimizer, state.generator
    model.train()
    last_good = state.step if checkpoint_every else None
    while state.step < config.steps:
        idx = torch.randint(len(videos), (config.batch_size,), generator=gen)
        x0 = videos[idx]
        cond = labels[idx].clone()
        drop = torch.rand(config.batch_size, generator=gen) < config.cond_drop
        cond[drop] = NULL_CLASS
        t = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = teacher_loss(model, x0, eps, t, cond, schedule)
        if not torch.isfinite(loss):
            raise DivergenceError(f"teacher loss became {loss.item()} at step {state.step}", last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        if state.step % config.log_every == 0:
            state.log.append({"step": state.step, "loss": float(loss.item())})
        state.step += 1
        if checkpoint_every and state.step % checkpoint_every == 0:
            last_good = state.step
            if on_checkpoint is not None:
                on_checkpoint(state)
    model.eval()
    return model, state.log


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
