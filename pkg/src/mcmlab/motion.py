"""Motion representations extracted from (batched) videos ``[..., F, C, H, W]``."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class MotionKind(str, enum.Enum):
    RAW = "raw"
    DIFF = "diff"
    CORR = "corr"
    LOW_FREQ = "lowfreq"
    HIGH_FREQ = "highfreq"
    LEARNABLE = "learnable"


@dataclass
class MotionRepr:
    kind: MotionKind
    payload: torch.Tensor


def _need_frames(v: torch.Tensor) -> None:
    if v.dim() < 4 or v.shape[-4] < 2:
        raise ValueError(f"motion extraction needs at least 2 frames, got shape {tuple(v.shape)}")


def motion_difference(v: torch.Tensor) -> MotionRepr:
    """Consecutive-frame differences, ``payload[i] = v[i+1] - v[i]``."""
    _need_frames(v)
    return MotionRepr(MotionKind.DIFF, v[..., 1:, :, :, :] - v[..., :-1, :, :, :])


def motion_correlation(v: torch.Tensor) -> MotionRepr:
    """Cost volume between consecutive frames.

    ``payload[i, p, q] = sum_c v[i+1, c, p] v[i, c, q] / C`` over every pair of
    spatial positions; shape ``[..., F-1, H, W, H, W]``.
    """
    _need_frames(v)
    C = v.shape[-3]
    nxt, cur = v[..., 1:, :, :, :], v[..., :-1, :, :, :]
    return MotionRepr(MotionKind.CORR, torch.einsum("...chw,...cxy->...hwxy", nxt, cur) / C)


def _radial_lowpass(H: int, W: int, cutoff: float, dtype, device) -> torch.Tensor:
    fy = torch.fft.fftfreq(H, dtype=torch.float64)
    fx = torch.fft.fftfreq(W, dtype=torch.float64)
    r = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return (r <= cutoff * 0.5).to(device=device)  # Nyquist radius is 0.5 cycles / pixel


def motion_freq_split(v: torch.Tensor, cutoff: float = 0.25) -> tuple[MotionRepr, MotionRepr]:
    """Split every frame into low and high spatial-frequency bands; ``low + high = v``."""
    if not 0.0 < cutoff <= 1.0:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    H, W = v.shape[-2:]
    mask = _radial_lowpass(H, W, cutoff, v.dtype, v.device)
    spec = torch.fft.fft2(v)
    low = torch.fft.ifft2(spec * mask).real
    high = v - low
    return MotionRepr(MotionKind.LOW_FREQ, low), MotionRepr(MotionKind.HIGH_FREQ, high)


class MotionHead(nn.Module):
    """Per-frame two-layer perceptron with an EMA twin.

    Frames are mapped independently (no temporal mixing); output is
    ``[..., F, D_out]`` with ``D_out = C*H*W // 4`` by default.
    """

    def __init__(self, in_dim: int, hidden: int = 64, out_dim: int | None = None, ema_rate: float = 0.95,
                 zero_init: bool = False):
        super().__init__()
        out_dim = out_dim or max(1, in_dim // 4)
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))
        if zero_init:
            nn.init.zeros_(self.net[2].weight)
            nn.init.zeros_(self.net[2].bias)
        self.twin = copy.deepcopy(self.net)
        self.twin.requires_grad_(False)
        self.ema_rate = float(ema_rate)
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim

    def online_parameters(self):
        return self.net.parameters()

    def forward(self, v: torch.Tensor, use_twin: bool = False) -> torch.Tensor:
        frames = v.flatten(start_dim=-3)
        return (self.twin if use_twin else self.net)(frames)

    @torch.no_grad()
    def ema_update(self) -> None:
        for p_tgt, p in zip(self.twin.parameters(), self.net.parameters()):
            p_tgt.lerp_(p, 1.0 - self.ema_rate)


def motion_head_apply(head: MotionHead, v: torch.Tensor, use_twin: bool = False) -> MotionRepr:
    return MotionRepr(MotionKind.LEARNABLE, head(v, use_twin=use_twin))


def extract_motion(v: torch.Tensor, kind: MotionKind | str, head: MotionHead | None = None,
                   use_twin: bool = False, cutoff: float = 0.25) -> torch.Tensor:
    """Payload of the requested motion representation (RAW is the identity)."""
    kind = MotionKind(kind)
    if kind is MotionKind.RAW:
        return v
    if kind is MotionKind.DIFF:
        return motion_difference(v).payload
    if kind is MotionKind.CORR:
        return motion_correlation(v).payload
    if kind is MotionKind.LOW_FREQ:
        return motion_freq_split(v, cutoff)[0].payload
    if kind is MotionKind.HIGH_FREQ:
        return motion_freq_split(v, cutoff)[1].payload
    if head is None:
        raise ValueError("LEARNABLE motion needs a MotionHead")
    return motion_head_apply(head, v, use_twin).payload
