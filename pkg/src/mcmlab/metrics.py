"""Frechet-distance quality proxies plus watermark and motion measurements."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

RIDGE = 1e-6


class MotionUndefinedError(ValueError):
    pass


def _to_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    feats = _to_numpy(features)
    if feats.ndim == 1:
        feats = feats[:, None]
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """``Tr((Sa Sb)^(1/2))`` via the similar symmetric matrix ``Sa^(1/2) Sb Sa^(1/2)``."""
    ra = _sqrt_psd(sigma_a)
    vals = np.linalg.eigvalsh(ra @ sigma_b @ ra)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_from_stats(mu_a, sigma_a, mu_b, sigma_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt_product(sigma_a, sigma_b)
    return float(max(val, 0.0))


def _regularize(sigma: np.ndarray, name: str) -> np.ndarray:
    if np.linalg.eigvalsh(sigma).min() < RIDGE * 1e-3:
        log.warning("covariance of %s is rank deficient; adding %.0e ridge", name, RIDGE)
        sigma = sigma + RIDGE * np.eye(len(sigma))
    return sigma


def frechet_distance(set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets ``[n, D]``."""
    a, b = _to_numpy(set_a), _to_numpy(set_b)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    D = a.shape[1]
    if len(a) < D + 1 or len(b) < D + 1:
        raise ValueError(f"each set needs at least D+1={D + 1} samples, got {len(a)} and {len(b)}")
    mu_a, sig_a = gaussian_stats(a)
    mu_b, sig_b = gaussian_stats(b)
    return frechet_from_stats(mu_a, _regularize(sig_a, "set_a"), mu_b, _regularize(sig_b, "set_b"))


class FeatureEmbedder:
    """Frozen random-feature embedder for the FVD / FID proxies.

    Video features concatenate frame-appearance features with features of
    consecutive-frame differences, so the video proxy reacts to motion.
    """

    def __init__(self, channels: int = 1, filters: int = 8, pool: int = 4, dim_per_branch: int = 16, seed: int = 7):
        gen = torch.Generator().manual_seed(seed)
        self.kernel = torch.randn((filters, channels, 3, 3), generator=gen, dtype=torch.float64) / 3.0
        self.pool = pool
        self.seed = seed
        self._proj: dict[int, torch.Tensor] = {}
        self.dim_per_branch = dim_per_branch
        self.filters = filters

    @property
    def video_dim(self) -> int:
        return 2 * self.dim_per_branch

    def _projection(self, in_dim: int, branch: int) -> torch.Tensor:
        key = (in_dim, branch)
        if key not in self._proj:
            gen = torch.Generator().manual_seed(self.seed * 1000 + branch)
            self._proj[key] = torch.randn((in_dim, self.dim_per_branch), generator=gen, dtype=torch.float64) / in_dim**0.5
        return self._proj[key]

    def _pooled(self, frames: torch.Tensor) -> torch.Tensor:
        # frames [N, C, H, W] -> [N, filters * (H/pool) * (W/pool)]
        h = torch.tanh(F.conv2d(frames, self.kernel, padding=1))
        return F.avg_pool2d(h, self.pool).flatten(1)

    @torch.no_grad()
    def frame_features(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images).to(torch.float64)
        x = x.reshape((-1,) + tuple(x.shape[-3:]))
        pooled = self._pooled(x)
        return torch.tanh(pooled @ self._projection(pooled.shape[1], 0)).numpy()

    @torch.no_grad()
    def video_features(self, videos) -> np.ndarray:
        v = torch.as_tensor(np.asarray(videos) if not torch.is_tensor(videos) else videos).to(torch.float64)
        B, Fr = v.shape[:2]
        app = self._pooled(v.reshape((-1,) + tuple(v.shape[-3:]))).reshape(B, Fr, -1).mean(dim=1)
        diff = v[:, 1:] - v[:, :-1]
        mot = self._pooled(diff.reshape((-1,) + tuple(v.shape[-3:]))).reshape(B, Fr - 1, -1).abs().mean(dim=1)
        f_app = torch.tanh(app @ self._projection(app.shape[1], 0))
        f_mot = torch.tanh(4.0 * mot @ self._projection(mot.shape[1], 1))
        return torch.cat([f_app, f_mot], dim=1).numpy()


def fvd_proxy(embedder: FeatureEmbedder, videos_a, videos_b) -> float:
    return frechet_distance(embedder.video_features(videos_a), embedder.video_features(videos_b))


def fid_proxy(embedder: FeatureEmbedder, images_a, images_b) -> float:
    return frechet_distance(embedder.frame_features(images_a), embedder.frame_features(images_b))


def watermark_energy(v, region) -> float:
    """Mean absolute intensity inside ``region = (row0, row1, col0, col1)`` over all frames."""
    r0, r1, c0, c1 = region
    arr = _to_numpy(v)
    return float(np.abs(arr[..., r0:r1, c0:c1]).mean())


def _centroids(video: np.ndarray, exclude, min_mass: float, floor: float = 0.1) -> np.ndarray:
    frames = video.mean(axis=1)  # [F, H, W]
    keep = np.ones(frames.shape[1:], dtype=bool)
    if exclude is not None:
        r0, r1, c0, c1 = exclude
        keep[r0:r1, c0:c1] = False
    # weight = intensity above the frame's median background plus a floor
    bg = np.median(frames[:, keep], axis=1)[:, None, None]
    w = np.clip(frames - bg - floor, 0.0, None) * keep
    mass = w.sum(axis=(1, 2))
    if (mass < min_mass).any():
        raise MotionUndefinedError(f"frame intensity mass {mass.min():.3g} below {min_mass}")
    H, W = w.shape[1:]
    yy, xx = np.mgrid[0:H, 0:W]
    cx = (w * xx).sum(axis=(1, 2)) / mass
    cy = (w * yy).sum(axis=(1, 2)) / mass
    return np.stack([cx, cy], axis=1)


def motion_error(v, expected_velocity, exclude=None, min_mass: float = 0.25) -> float:
    """RMSE (px / frame) between centroid displacements and ``expected_velocity``.

    Centroids weight pixels by their intensity above the frame's median
    background (plus a 0.1 floor), so a uniform haze cannot drag them to
    the frame center.  ``exclude`` zeroes a region (e.g. the watermark).
    """
    video = _to_numpy(v)
    disp = np.diff(_centroids(video, exclude, min_mass), axis=0)
    err = disp - np.asarray(expected_velocity, dtype=np.float64)[None, :]
    return float(np.sqrt((err**2).sum(axis=1).mean()))


def mean_motion_error(videos, velocities, exclude=None, min_mass: float = 0.25) -> tuple[float, int]:
    """Average motion error over a batch, skipping undefined videos; returns (mean, n_undefined)."""
    vids = _to_numpy(videos)
    vel = _to_numpy(velocities)
    errs, undefined = [], 0
    for v, e in zip(vids, vel):
        try:
            errs.append(motion_error(v, e, exclude, min_mass))
        except MotionUndefinedError:
            undefined += 1
    return (float(np.mean(errs)) if errs else float("nan")), undefined


def near_dark_fraction(videos, threshold: float = 0.25, exclude=None) -> float:
    """Fraction of videos whose frame-averaged peak intensity stays below ``threshold``."""
    vids = _to_numpy(videos).copy()
    if exclude is not None:
        r0, r1, c0, c1 = exclude
        vids[..., r0:r1, c0:c1] = 0.0
    peak = vids.reshape(vids.shape[0], vids.shape[1], -1).max(axis=2).mean(axis=1)
    return float((peak < threshold).mean())
