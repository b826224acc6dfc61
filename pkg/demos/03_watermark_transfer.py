"""Distil a watermarked teacher two ways and look at the samples.

The teacher only ever sees low-quality clips, so its samples carry the
watermark.  The LCM student copies the teacher, watermark included.  The
MCM student matches the teacher's motion only, and takes its appearance
from a discriminator trained on clean stills, so the watermark fades.

Takes a few minutes on one CPU core (shorter runs than the acceptance suite).
"""

import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from mcmlab.data import DataParams, make_hq_image_dataset, make_lq_video_dataset, make_reference_video_dataset
from mcmlab.diffusion import TeacherConfig, train_teacher
from mcmlab.distillation import DistillConfig, train_lcm, train_mcm
from mcmlab.evaluation import Evaluator, generate
from mcmlab.schedule import build_linear_schedule

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
torch.set_num_threads(1)

params = DataParams()
sched = build_linear_schedule(1000, 1e-4, 2e-2)
lq = make_lq_video_dataset(2000, params, seed=0)
hq = make_hq_image_dataset(2000, params, seed=1)
ref = make_reference_video_dataset(400, params, seed=2)
print(f"{len(lq)} watermarked clips, {len(hq)} clean stills, {len(ref)} clean reference clips")

t0 = time.time()
teacher, log = train_teacher(lq, TeacherConfig(steps=1500), sched)
print(f"teacher: 1500 steps in {time.time() - t0:.0f}s, loss {log[0]['loss']:.3f} -> {log[-1]['loss']:.3f}")

cfg = DistillConfig(total_steps=600)
t0 = time.time()
lcm = train_lcm(teacher, lq, DistillConfig(**{**cfg.to_dict(), "motion_kind": "raw"}), sched).student
print(f"LCM student: {time.time() - t0:.0f}s")
t0 = time.time()
mcm = train_mcm(teacher, lq, hq, cfg, sched).student
print(f"MCM student ({cfg.motion_kind} motion, lambda_real={cfg.lambda_real}, "
      f"lambda_adv={cfg.lambda_adv}): {time.time() - t0:.0f}s")

ev = Evaluator(ref, params, n_samples=200, steps=(1, 2, 4))
print(f"\n{'':6}" + "".join(f"{m + '@4':>20}" for m in ("fvd_proxy", "watermark_energy", "motion_err")))
for name, student in (("LCM", lcm), ("MCM", mcm)):
    m = ev(student)
    print(f"{name:6}" + "".join(f"{m[k + '@4']:20.3f}" for k in ("fvd_proxy", "watermark_energy", "motion_err")))

# same noise for both students, one row per student
rows = [("LCM", generate(lcm, 4, 8, seed=7, num_classes=params.num_classes)[0]),
        ("MCM", generate(mcm, 4, 8, seed=7, num_classes=params.num_classes)[0])]
fig, axes = plt.subplots(2, 8, figsize=(11, 3))
for r, (name, vids) in enumerate(rows):
    for c in range(8):
        axes[r, c].imshow(vids[c, 0, 0].numpy(), cmap="gray", vmin=-1, vmax=1)
        axes[r, c].axis("off")
    axes[r, 0].set_title(name, fontsize=8, loc="left")
fig.suptitle("first frame of 4-step samples; watermark sits bottom right")
fig.tight_layout()
fig.savefig(OUT / "watermark.png", dpi=100)
print(f"\nfigure -> {OUT / 'watermark.png'}")
