"""Synthetic moving-blob videos (low quality) and still images (high quality).

Both datasets draw blob dynamics from the same scene sampler; they differ
only in degradations (watermark, blur, sensor noise) and in temporal extent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

NULL_CLASS = -1


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Degradation:
    watermark: bool = False
    region: tuple[int, int, int, int] = (12, 16, 10, 16)  # row0, row1, col0, col1
    intensity: float = 0.8
    blur_sigma: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    blob_center0: tuple[float, float]  # (x, y) in pixels
    velocity: tuple[float, float]  # (dx, dy) pixels / frame
    blob_sigma: float
    class_id: int
    degradation: Degradation = field(default_factory=Degradation)


@dataclass(frozen=True)
class DataParams:
    frames: int = 8
    channels: int = 1
    height: int = 16
    width: int = 16
    num_classes: int = 8
    speed: float = 1.0
    blob_sigma: float = 1.5
    amplitude: float = 1.0
    margin: float = 2.0
    watermark_region: tuple[int, int, int, int] = (12, 16, 10, 16)
    watermark_intensity: float = 0.8
    lq_blur_sigma: float = 0.8
    lq_noise_std: float = 0.05
    hq_noise_std: float = 0.01

    def __post_init__(self):
        for name in ("frames", "channels", "height", "width", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.frames < 2:
            raise ParameterError("clips need at least two frames to carry motion")
        y0, y1, x0, x1 = self.watermark_region
        if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
            raise ParameterError(f"watermark_region {self.watermark_region} outside a {self.height}x{self.width} frame")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["watermark_region"] = list(self.watermark_region)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataParams":
        d = dict(d)
        if "watermark_region" in d:
            d["watermark_region"] = tuple(d["watermark_region"])
        return cls(**d)

    def lq_degradation(self) -> Degradation:
        return Degradation(True, self.watermark_region, self.watermark_intensity,
                           self.lq_blur_sigma, self.lq_noise_std)

    def hq_degradation(self) -> Degradation:
        return Degradation(False, self.watermark_region, self.watermark_intensity,
                           0.0, self.hq_noise_std)


def class_velocity(class_id: int, num_classes: int = 8, speed: float = 1.0) -> tuple[float, float]:
    """Direction class ``k`` moves at angle ``2 pi k / K``; y points down the rows."""
    angle = 2.0 * math.pi * class_id / num_classes
    return (speed * math.cos(angle), speed * math.sin(angle))


def sample_scene(params: DataParams, rng: np.random.Generator, degradation: Degradation,
                 class_id: int | None = None) -> SceneSpec:
    if class_id is None:
        class_id = int(rng.integers(params.num_classes))
    vx, vy = class_velocity(class_id, params.num_classes, params.speed)
    travel = params.frames - 1
    center = []
    for v, size in ((vx, params.width), (vy, params.height)):
        lo = params.margin - min(0.0, travel * v)
        hi = size - 1 - params.margin - max(0.0, travel * v)
        if hi < lo:
            raise ParameterError("blob trajectory cannot fit in the frame")
        center.append(float(rng.uniform(lo, hi)))
    return SceneSpec((center[0], center[1]), (vx, vy), params.blob_sigma, class_id, degradation)


def _blob(cx: float, cy: float, sigma: float, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))


def render_clip(scene: SceneSpec, F: int, H: int, W: int, rng: np.random.Generator,
                channels: int = 1, amplitude: float = 1.0) -> tuple[np.ndarray, int]:
    """Render one clip ``[F, C, H, W]`` and return it with its class label."""
    cx0, cy0 = scene.blob_center0
    vx, vy = scene.velocity
    for f in range(F):
        cx, cy = cx0 + f * vx, cy0 + f * vy
        if not (0.0 <= cx <= W - 1 and 0.0 <= cy <= H - 1):
            raise ParameterError(f"blob leaves the frame at frame {f}: ({cx:.2f}, {cy:.2f})")

    deg = scene.degradation
    video = np.empty((F, channels, H, W), dtype=np.float64)
    for f in range(F):
        frame = amplitude * _blob(cx0 + f * vx, cy0 + f * vy, scene.blob_sigma, H, W)
        if deg.blur_sigma > 0:
            frame = gaussian_filter(frame, deg.blur_sigma, mode="constant")
        if deg.watermark:
            r0, r1, c0, c1 = deg.region
            frame[r0:r1, c0:c1] = deg.intensity
        video[f] = frame
    if deg.noise_std > 0:
        video = video + rng.normal(0.0, deg.noise_std, size=video.shape)
    return np.clip(video, -1.0, 1.0).astype(np.float32), scene.class_id


@dataclass
class VideoDataset:
    videos: np.ndarray  # [n, F, C, H, W] float32
    labels: np.ndarray  # [n] int64
    velocities: np.ndarray  # [n, 2]
    params: DataParams
    seed: int
    kind: str = "lq"

    def __len__(self) -> int:
        return len(self.videos)


@dataclass
class ImageDataset:
    images: np.ndarray  # [n, C, H, W] float32
    params: DataParams
    seed: int
    kind: str = "hq"

    def __len__(self) -> int:
        return len(self.images)


def _make_videos(n: int, params: DataParams, seed: int, degradation: Degradation, kind: str) -> VideoDataset:
    rng = np.random.default_rng(seed)
    videos = np.empty((n, params.frames, params.channels, params.height, params.width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    velocities = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        scene = sample_scene(params, rng, degradation)
        videos[i], labels[i] = render_clip(scene, params.frames, params.height, params.width, rng,
                                           params.channels, params.amplitude)
        velocities[i] = scene.velocity
    return VideoDataset(videos, labels, velocities, params, seed, kind)


def make_lq_video_dataset(n: int, params: DataParams | None = None, seed: int = 0) -> VideoDataset:
    """Low-quality clips: watermark, blur and noise all on."""
    params = params or DataParams()
    return _make_videos(n, params, seed, params.lq_degradation(), "lq")


def make_reference_video_dataset(n: int, params: DataParams | None = None, seed: int = 0) -> VideoDataset:
    """Clips with high-quality appearance; used only as an evaluation reference."""
    params = params or DataParams()
    return _make_videos(n, params, seed, params.hq_degradation(), "reference")


def make_hq_image_dataset(n: int, params: DataParams | None = None, seed: int = 0) -> ImageDataset:
    """High-quality stills: one random frame of an undegraded clip each."""
    params = params or DataParams()
    rng = np.random.default_rng(seed)
    images = np.empty((n, params.channels, params.height, params.width), dtype=np.float32)
    deg = params.hq_degradation()
    for i in range(n):
        scene = sample_scene(params, rng, deg)
        f = int(rng.integers(params.frames))
        cx = scene.blob_center0[0] + f * scene.velocity[0]
        cy = scene.blob_center0[1] + f * scene.velocity[1]
        still = replace(scene, blob_center0=(cx, cy), velocity=(0.0, 0.0))
        clip, _ = render_clip(still, 1, params.height, params.width, rng, params.channels, params.amplitude)
        images[i] = clip[0]
    return ImageDataset(images, params, seed)


def sharpness(frames: np.ndarray) -> float:
    """Mean gradient magnitude over the two trailing (spatial) axes."""
    gy, gx = np.gradient(np.asarray(frames, dtype=np.float64), axis=(-2, -1))
    return float(np.mean(np.hypot(gx, gy)))


# -- persistence -----------------------------------------------------------

def save_video_dataset(ds: VideoDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (clip, label, vel) in enumerate(zip(ds.videos, ds.labels, ds.velocities)):
        name = f"clip_{i:05d}.npy"
        np.save(directory / name, clip)
        items.append({"file": name, "class_id": int(label), "velocity": [float(v) for v in vel]})
    manifest = {"kind": ds.kind, "seed": ds.seed, "params": ds.params.to_dict(), "n": len(ds), "items": items}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def save_image_dataset(ds: ImageDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for i, img in enumerate(ds.images):
        name = f"image_{i:05d}.npy"
        np.save(directory / name, img)
        items.append({"file": name, "class_id": NULL_CLASS})
    manifest = {"kind": ds.kind, "seed": ds.seed, "params": ds.params.to_dict(), "n": len(ds), "items": items}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_dataset(directory) -> VideoDataset | ImageDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    params = DataParams.from_dict(manifest["params"])
    arrays = np.stack([np.load(directory / item["file"]) for item in manifest["items"]])
    if manifest["kind"] == "hq":
        return ImageDataset(arrays, params, manifest["seed"], manifest["kind"])
    labels = np.array([item["class_id"] for item in manifest["items"]], dtype=np.int64)
    velocities = np.array([item["velocity"] for item in manifest["items"]], dtype=np.float64)
    return VideoDataset(arrays, labels, velocities, params, manifest["seed"], manifest["kind"])
