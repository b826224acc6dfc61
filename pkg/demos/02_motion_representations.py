"""What each motion representation keeps from a clip.

A clean clip and its watermarked, blurred copy share the same motion.  A
good motion representation should be close for the pair, while raw pixels
are far apart because of the watermark.
"""

from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from mcmlab.data import DataParams, render_clip, sample_scene
from mcmlab.motion import MotionHead, MotionKind, extract_motion

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

params = DataParams()
rng = np.random.default_rng(3)
scene = sample_scene(params, rng, params.hq_degradation(), class_id=2)
clean, _ = render_clip(scene, params.frames, params.height, params.width, np.random.default_rng(0))
dirty, _ = render_clip(replace(scene, degradation=params.lq_degradation()), params.frames, params.height,
                       params.width, np.random.default_rng(0))
pair = torch.from_numpy(np.stack([clean, dirty])).double()

head = MotionHead(params.height * params.width, hidden=32).double()
print(f"{'representation':>14}  relative gap between clean and watermarked clip")
for kind in MotionKind:
    with torch.no_grad():
        m = extract_motion(pair, kind, head if kind is MotionKind.LEARNABLE else None)
    gap = float((m[0] - m[1]).norm() / m[0].norm().clamp_min(1e-12))
    print(f"{kind.value:>14}  {gap:.3f}")

fig, axes = plt.subplots(3, params.frames, figsize=(1.4 * params.frames, 4.4))
diff = (pair[0, 1:] - pair[0, :-1]).numpy()
for f in range(params.frames):
    axes[0, f].imshow(clean[f, 0], cmap="gray", vmin=-1, vmax=1)
    axes[1, f].imshow(dirty[f, 0], cmap="gray", vmin=-1, vmax=1)
    if f < params.frames - 1:
        axes[2, f].imshow(diff[f, 0], cmap="coolwarm", vmin=-1, vmax=1)
    for r in range(3):
        axes[r, f].axis("off")
axes[0, 0].set_title("clean", fontsize=8, loc="left")
axes[1, 0].set_title("watermarked", fontsize=8, loc="left")
axes[2, 0].set_title("frame difference", fontsize=8, loc="left")
fig.tight_layout()
fig.savefig(OUT / "motion.png", dpi=100)
print(f"figure -> {OUT / 'motion.png'}")
