"""The noise schedule, the solver grid and a flow we can solve by hand.

For Gaussian data the optimal noise predictor is affine in x_t, so every
DDIM step is an affine map and a whole sampling run collapses to one
``x -> A x + B``.  That gives an exact reference for the sampler, and a
consistency function we can write down and score with the distillation loss.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from oracles import closed_form_student, continuous_consistency, trajectory_map  # noqa: E402

from mcmlab.consistency import SolverConfig, cd_loss  # noqa: E402
from mcmlab.diffusion import AnalyticGaussianDenoiser, ddim_sample  # noqa: E402
from mcmlab.schedule import build_linear_schedule, consistency_weights  # noqa: E402

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

sched = build_linear_schedule(1000, 1e-4, 2e-2)
print(f"T={sched.T}  alpha_T={sched.alphas[-1]}  sigma_T={sched.sigmas[-1]}  (zero terminal SNR)")
print(f"solver stride {sched.stride}; {len(sched.solver_timesteps())} solver start points, {sched.solver_timesteps()[:4].tolist()} ...")

w = consistency_weights(0.5, 0, sched.T)
t = torch.linspace(0, 1, 201, dtype=torch.float64)
fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
ax[0].plot(sched.alphas, label="alpha_t")
ax[0].plot(sched.sigmas, label="sigma_t")
ax[0].set_xlabel("t")
ax[0].legend()
ax[1].plot(t, w.c_skip(t), label="c_skip")
ax[1].plot(t, w.c_out(t), label="c_out")
ax[1].set_xlabel("t / T")
ax[1].legend()
fig.tight_layout()
fig.savefig(OUT / "schedule.png", dpi=100)
print(f"c_skip(0)={float(w.c_skip(0.0))}, c_out(0)={float(w.c_out(0.0))}; figure -> {OUT / 'schedule.png'}")

mu, s = 0.5, 0.5
den = AnalyticGaussianDenoiser(sched, mu, s)
z = torch.randn(20000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
for n in (10, 50, 250):
    x = ddim_sample(den, None, None, sched, num_steps=n, x_T=z, guidance=False)
    A, B = trajectory_map(sched.alphas.tolist(), sched.sigmas.tolist(),
                          np.linspace(sched.T, 0, n + 1).round().astype(int), mu, s)
    lattice = float(torch.sqrt(((x - (A * z + B)) ** 2).mean()))
    flow = float(torch.sqrt(((x - continuous_consistency(z, 0.0, 1.0, mu, s)) ** 2).mean()))
    print(f"{n:4d} DDIM steps: RMSE vs affine composition {lattice:.1e}, vs continuous flow {flow:.4f}")

student = closed_form_student(sched, mu, s)
x0 = mu + s * torch.randn((128, 8, 1, 4, 4), dtype=torch.float64, generator=torch.Generator().manual_seed(1))
loss = cd_loss(student, den, x0, torch.zeros(128, dtype=torch.long), torch.Generator().manual_seed(2),
               SolverConfig(guidance=False))
print(f"closed-form consistency function: cd_loss = {float(loss.detach()):.2e}")
