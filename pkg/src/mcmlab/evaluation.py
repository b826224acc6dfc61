"""Step-sweep evaluation of a consistency student against a reference video set."""

from __future__ import annotations

import numpy as np
import torch

from .consistency import ConsistencyStudent, cm_sample
from .data import DataParams, VideoDataset, class_velocity
from .metrics import FeatureEmbedder, frechet_distance, mean_motion_error, near_dark_fraction, watermark_energy


def eval_conditions(n: int, num_classes: int) -> torch.Tensor:
    """Balanced class labels ``0, 1, ..., K-1, 0, 1, ...``."""
    return torch.arange(n) % num_classes


def generate(student: ConsistencyStudent, num_steps: int, n: int, seed: int, num_classes: int,
             batch: int = 250) -> tuple[torch.Tensor, torch.Tensor]:
    """``n`` class-balanced samples; the same seed gives paired noise across students."""
    cond = eval_conditions(n, num_classes)
    gen = torch.Generator().manual_seed(seed)
    out = []
    for start in range(0, n, batch):
        c = cond[start:start + batch]
        out.append(cm_sample(student, num_steps, c, gen))
    return torch.cat(out), cond


class Evaluator:
    """Callable ``(student, step) -> metrics`` producing the ``metric@k`` columns."""

    def __init__(self, reference: VideoDataset, params: DataParams, n_samples: int = 200,
                 steps=(1, 2, 4, 8), seed: int = 12345, embedder: FeatureEmbedder | None = None):
        self.params = params
        self.n = n_samples
        self.steps = tuple(steps)
        self.seed = seed
        self.embedder = embedder or FeatureEmbedder(params.channels)
        need = self.embedder.video_dim + 1
        if n_samples < need or len(reference) < need:
            raise ValueError(f"the Frechet proxy needs at least {need} samples and reference clips, "
                             f"got n_samples={n_samples}, reference={len(reference)}")
        self.reference_features = self.embedder.video_features(reference.videos[: max(n_samples, 1)])
        self.region = params.watermark_region

    def expected_velocities(self, cond: torch.Tensor) -> np.ndarray:
        return np.array([class_velocity(int(c), self.params.num_classes, self.params.speed) for c in cond])

    def measure(self, videos: torch.Tensor, cond: torch.Tensor) -> dict:
        feats = self.embedder.video_features(videos)
        err, undefined = mean_motion_error(videos, self.expected_velocities(cond), exclude=self.region)
        return {
            "fvd_proxy": frechet_distance(feats, self.reference_features),
            "watermark_energy": watermark_energy(videos, self.region),
            "motion_err": err,
            "dark_frac": near_dark_fraction(videos, exclude=self.region),
            "motion_undefined": undefined,
        }

    @torch.no_grad()
    def __call__(self, student: ConsistencyStudent, step: int | None = None) -> dict:
        metrics = {}
        for k in self.steps:
            videos, cond = generate(student, k, self.n, self.seed, self.params.num_classes)
            for name, value in self.measure(videos, cond).items():
                metrics[f"{name}@{k}"] = value
        return metrics
