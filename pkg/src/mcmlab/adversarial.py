"""Sparse-frame image discriminator and hinge adversarial losses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NULL_CLASS


class FrozenEncoder(nn.Module):
    """Seeded random conv feature extractor with a tap after every layer.

    Parameters are buffers, so no optimizer can ever touch them.
    """

    def __init__(self, channels: int = 1, widths=(16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.strides = (1, 2, 2)
        c_in = channels
        for i, w in enumerate(widths):
            fan_in = c_in * 9
            weight = torch.randn((w, c_in, 3, 3), generator=gen) * (2.0 / fan_in) ** 0.5
            self.register_buffer(f"weight{i}", weight)
            self.register_buffer(f"bias{i}", torch.zeros(w))
            c_in = w
        self.widths = tuple(widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for i, stride in enumerate(self.strides[: len(self.widths)]):
            h = F.leaky_relu(F.conv2d(h, getattr(self, f"weight{i}"), getattr(self, f"bias{i}"),
                                      stride=stride, padding=1), 0.2)
            taps.append(h)
        return taps

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, buf in sorted(self.named_buffers()):
            h.update(name.encode())
            h.update(buf.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class Discriminator(nn.Module):
    """Frozen multi-scale features scored by trainable per-patch heads.

    A frame's score is the mean over scales of the mean patch score.  With
    ``conditional=True`` a class-embedding projection term is added per
    patch; NULL conditions contribute nothing.
    """

    def __init__(self, channels: int = 1, widths=(16, 32, 32), head_hidden: int = 32, num_classes: int = 8,
                 encoder_seed: int = 1234, conditional: bool = False):
        super().__init__()
        self.encoder = FrozenEncoder(channels, widths, encoder_seed)
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Conv2d(w, head_hidden, 1), nn.LeakyReLU(0.2), nn.Conv2d(head_hidden, 1, 1))
            for w in widths
        )
        self.conditional = conditional
        self.num_classes = num_classes
        if conditional:
            self.class_proj = nn.ModuleList(nn.Embedding(num_classes + 1, w) for w in widths)
            for emb in self.class_proj:
                nn.init.zeros_(emb.weight)
        self.config = dict(channels=channels, widths=list(widths), head_hidden=head_hidden,
                           num_classes=num_classes, encoder_seed=encoder_seed, conditional=conditional)

    def forward(self, frames: torch.Tensor, cond=None) -> torch.Tensor:
        lead = frames.shape[:-3]
        x = frames.reshape((-1,) + frames.shape[-3:])
        feats = self.encoder(x)
        scores = 0.0
        for i, (f, head) in enumerate(zip(feats, self.heads)):
            s = head(f).mean(dim=(1, 2, 3))
            if self.conditional and cond is not None:
                c = torch.as_tensor(cond).reshape(-1)
                c = c.repeat_interleave(x.shape[0] // c.numel())
                idx = torch.where(c == NULL_CLASS, torch.full_like(c, self.num_classes), c)
                proj = self.class_proj[i](idx)
                s = s + (f * proj[:, :, None, None]).sum(dim=1).mean(dim=(1, 2))
            scores = scores + s
        return (scores / len(self.heads)).reshape(lead)


@dataclass
class FrameSample:
    frames: torch.Tensor  # [..., l, C, H, W]
    indices: torch.Tensor  # [..., l], strictly increasing


def sample_frames(v: torch.Tensor, l: int, rng: torch.Generator) -> FrameSample:
    """Uniformly pick ``l`` distinct frames, kept in temporal order.

    ``v`` is a video ``[F, C, H, W]`` or a batch ``[B, F, C, H, W]``; every
    video of a batch gets its own draw.
    """
    n_frames = v.shape[-4]
    if not 1 <= l <= n_frames:
        raise ValueError(f"need 1 <= l <= F={n_frames}, got l={l}")
    batched = v.dim() == 5
    vb = v if batched else v.unsqueeze(0)
    keys = torch.rand((vb.shape[0], n_frames), generator=rng)
    idx = keys.argsort(dim=1)[:, :l].sort(dim=1).values
    frames = vb[torch.arange(vb.shape[0])[:, None], idx]
    if not batched:
        return FrameSample(frames[0], idx[0])
    return FrameSample(frames, idx)


def _scores(D, fs: FrameSample, cond=None) -> torch.Tensor:
    if cond is None:
        return D(fs.frames)
    return D(fs.frames, cond)


def generator_adv_per_sample(D, fs: FrameSample, cond=None) -> torch.Tensor:
    """``-(1/l) sum_i D(frame_i)`` for each video of the sample."""
    return -_scores(D, fs, cond).mean(dim=-1)


def generator_adv_loss(D, fs: FrameSample, cond=None) -> torch.Tensor:
    return generator_adv_per_sample(D, fs, cond).mean()


def r1_penalty(D, real_images: torch.Tensor) -> torch.Tensor:
    real = real_images.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(D(real).sum(), real, create_graph=True)
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()


def discriminator_loss(D, fake: FrameSample, real_images: torch.Tensor, r1_weight: float = 0.0,
                       cond=None, return_parts: bool = False):
    """Hinge loss: push mean fake-frame scores below -1 and real scores above +1."""
    fake_frames = FrameSample(fake.frames.detach(), fake.indices)
    fake_term = F.relu(1.0 + _scores(D, fake_frames, cond).mean(dim=-1)).mean()
    real_term = F.relu(1.0 - D(real_images)).mean()
    loss = fake_term + real_term
    if r1_weight:
        loss = loss + r1_weight * r1_penalty(D, real_images)
    if return_parts:
        return loss, {"fake": fake_term.detach(), "real": real_term.detach()}
    return loss
