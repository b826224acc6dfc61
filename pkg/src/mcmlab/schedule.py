"""Linear-beta noise schedule, solver sub-grid and consistency boundary weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete variance-preserving schedule over integer timesteps ``0..T``.

    Index 0 is the clean data point (alpha=1, sigma=0); index ``T`` is pure
    noise (alpha=0, sigma=1).  ``epsilon_step`` is the smallest timestep the
    consistency function is evaluated at.
    """

    num_train_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray
    epsilon_step: int = 0
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    solver_points: int = 50
    _alpha_t: torch.Tensor = field(init=False, repr=False, compare=False)
    _sigma_t: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_alpha_t", torch.from_numpy(np.asarray(self.alphas, dtype=np.float64)))
        object.__setattr__(self, "_sigma_t", torch.from_numpy(np.asarray(self.sigmas, dtype=np.float64)))

    @property
    def T(self) -> int:
        return self.num_train_steps

    @property
    def stride(self) -> int:
        """Solver skip ``s`` in index units."""
        return max(1, (self.num_train_steps - self.epsilon_step) // self.solver_points)

    def solver_timesteps(self) -> np.ndarray:
        """Start timesteps of the distillation solver, largest first.

        Every entry ``t`` satisfies ``t - stride >= epsilon_step``.
        """
        ts = []
        t = self.num_train_steps
        while t - self.stride >= self.epsilon_step:
            ts.append(t)
            t -= self.stride
        return np.asarray(ts, dtype=np.int64)

    def snap(self, t: int) -> int:
        """Round a timestep to the nearest point of the solver lattice."""
        k = round((t - self.epsilon_step) / self.stride)
        return int(min(self.num_train_steps, self.epsilon_step + k * self.stride))

    def alpha(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        return _lookup(self._alpha_t, t, like)

    def sigma(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        return _lookup(self._sigma_t, t, like)

    def normalized(self, t) -> torch.Tensor:
        """Map integer timesteps to the continuous axis ``t / T``."""
        t = torch.as_tensor(t)
        return t.to(torch.float64) / self.num_train_steps

    def to_config(self) -> dict:
        return {
            "num_train_steps": self.num_train_steps,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "epsilon_step": self.epsilon_step,
            "solver_points": self.solver_points,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return build_linear_schedule(
            cfg["num_train_steps"],
            cfg["beta_min"],
            cfg["beta_max"],
            epsilon_step=cfg.get("epsilon_step", 0),
            solver_points=cfg.get("solver_points", 50),
        )


def _lookup(table: torch.Tensor, t, like: torch.Tensor | None) -> torch.Tensor:
    idx = torch.as_tensor(t, dtype=torch.long)
    out = table[idx]
    if like is not None:
        out = out.to(dtype=like.dtype, device=like.device)
        # broadcast per-sample coefficients over trailing video dims
        out = out.reshape(out.shape + (1,) * (like.dim() - out.dim()))
    return out


def build_linear_schedule(
    num_train_steps: int,
    beta_min: float,
    beta_max: float,
    epsilon_step: int = 0,
    solver_points: int = 50,
) -> NoiseSchedule:
    """Build a linear-beta VP schedule with zero terminal SNR.

    ``alpha_t = sqrt(prod_{i<=t}(1 - beta_i))``; the terminal entry is
    rescaled to ``alpha_T = 0, sigma_T = 1``.
    """
    if num_train_steps < 2:
        raise ScheduleError(f"num_train_steps must be >= 2, got {num_train_steps}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ScheduleError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    if not (0 <= epsilon_step < num_train_steps):
        raise ScheduleError(f"epsilon_step {epsilon_step} outside [0, {num_train_steps})")

    betas = np.linspace(beta_min, beta_max, num_train_steps, dtype=np.float64)
    alphas_cumprod = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alphas = np.sqrt(alphas_cumprod)
    sigmas = np.sqrt(1.0 - alphas_cumprod)
    alphas[-1] = 0.0
    sigmas[-1] = 1.0
    return NoiseSchedule(
        num_train_steps=num_train_steps,
        alphas=alphas,
        sigmas=sigmas,
        epsilon_step=epsilon_step,
        beta_min=beta_min,
        beta_max=beta_max,
        solver_points=solver_points,
    )


@dataclass(frozen=True)
class ConsistencyWeights:
    """Boundary-satisfying skip/output weights on the normalized time axis.

    ``c_skip(t) = sd^2 / ((t - eps)^2 + sd^2)`` and
    ``c_out(t) = sd (t - eps) / sqrt(sd^2 + t^2)``.
    """

    sigma_data: float
    epsilon: float  # normalized, i.e. epsilon_step / T

    def c_skip(self, t):
        t = torch.as_tensor(t, dtype=torch.float64)
        sd2 = self.sigma_data**2
        return sd2 / ((t - self.epsilon) ** 2 + sd2)

    def c_out(self, t):
        t = torch.as_tensor(t, dtype=torch.float64)
        return self.sigma_data * (t - self.epsilon) / torch.sqrt(self.sigma_data**2 + t**2)

    def __call__(self, t):
        return self.c_skip(t), self.c_out(t)


def consistency_weights(sigma_data: float, epsilon_step: int, num_train_steps: int | None = None) -> ConsistencyWeights:
    """Consistency weights with ``epsilon_step`` mapped onto ``[0, 1]``.

    Without ``num_train_steps`` the epsilon is taken as already normalized.
    """
    if not sigma_data > 0 or not math.isfinite(sigma_data):
        raise ScheduleError(f"sigma_data must be positive, got {sigma_data}")
    eps = epsilon_step / num_train_steps if num_train_steps else float(epsilon_step)
    return ConsistencyWeights(sigma_data=float(sigma_data), epsilon=eps)
