"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 and 7 train a real teacher and the full ablation grid through the
CLI code paths (roughly half an hour on one CPU core).  Set
``MCMLAB_ACCEPTANCE_DIR`` to keep and reuse those runs between invocations.
"""

from __future__ import annotations

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import gradcases
import test_distillation as td
from conftest import ACCEPTANCE, make_denoiser
from mcmlab import cli
from mcmlab.config import apply_overrides, load_config
from mcmlab.data import make_hq_image_dataset, make_lq_video_dataset
from mcmlab.consistency import SolverConfig, cd_loss, consistency_apply, make_student
from mcmlab.diffusion import AnalyticGaussianDenoiser, add_noise, ddim_sample, predict_x0
from mcmlab.distillation import DistillConfig, mcd_loss
from mcmlab.metrics import frechet_distance, frechet_from_stats
from mcmlab.motion import MotionHead, motion_correlation, motion_difference, motion_freq_split
from mcmlab.schedule import consistency_weights
from mcmlab.trajectory import sample_real_point
from oracles import closed_form_student, continuous_consistency, trajectory_map

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "default.json"


def record(k: int, ok: bool, detail: str, started: float) -> None:
    line = f"{detail}  ({time.perf_counter() - started:.1f}s)"
    ACCEPTANCE[k] = (bool(ok), line)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {line}")
    assert ok, line


# -- 1. boundary and identity ----------------------------------------------------

def test_criterion_1_boundary_identities(schedule, small_params):
    t0 = time.perf_counter()
    w = consistency_weights(0.5, schedule.epsilon_step, schedule.T)
    eps_n = schedule.epsilon_step / schedule.T
    weights_exact = float(w.c_skip(eps_n)) == 1.0 and float(w.c_out(eps_n)) == 0.0

    x = torch.randn((4, 4, 1, 8, 8), generator=torch.Generator().manual_seed(0))
    cond = torch.arange(4)
    identity = all(
        torch.equal(consistency_apply(make_student(make_denoiser(schedule, small_params), schedule, warm_start=ws),
                                      x, schedule.epsilon_step, cond, use_target=tgt), x)
        for ws in (True, False) for tgt in (False, True))

    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn((8, 8, 1, 16, 16), generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    worst = 0.0
    for t in (1, 20, 250, 500, 750, 900, 980, 999):
        worst = max(worst, float((predict_x0(add_noise(x0, eps, t, schedule), eps, t, schedule) - x0).abs().max()))
    ok = weights_exact and identity and worst < 1e-6
    record(1, ok, f"c_skip/c_out exact={weights_exact} identity={identity} round-trip max err={worst:.2e}", t0)
    assert time.perf_counter() - t0 < 10


# -- 2. analytic PF-ODE oracle ---------------------------------------------------

def test_criterion_2_analytic_pf_ode(schedule):
    t0 = time.perf_counter()
    mu, s = 0.5, 0.5
    teacher = AnalyticGaussianDenoiser(schedule, mu, s)
    x_T = torch.randn(20000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = ddim_sample(teacher, None, None, schedule, num_steps=50, x_T=x_T, guidance=False)
    ts = np.linspace(schedule.T, schedule.epsilon_step, 51).round().astype(int)
    A, B = trajectory_map(schedule.alphas.tolist(), schedule.sigmas.tolist(), ts, mu, s)
    rmse = float(torch.sqrt(((out - (A * x_T + B)) ** 2).mean()))
    # informational: distance to the exact continuous-time flow endpoint
    cont = float(torch.sqrt(((out - continuous_consistency(x_T, 0.0, 1.0, mu, s)) ** 2).mean()))

    student = closed_form_student(schedule, mu, s)
    x0 = mu + s * torch.randn((256, 8, 1, 4, 4), generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    cond = torch.zeros(256, dtype=torch.long)
    solver = SolverConfig(guidance=False)
    cd = float(cd_loss(student, teacher, x0, cond, torch.Generator().manual_seed(3), solver).detach())
    g = torch.Generator().manual_seed(4)
    mcd = float(mcd_loss(student, teacher, sample_real_point(x0, cond, schedule, g), "diff", g, solver).detach())
    ok = rmse < 1e-3 and cd < 1e-3 and mcd < 1e-3
    record(2, ok, f"50-step DDIM RMSE={rmse:.2e} cd_loss={cd:.2e} mcd_loss(diff)={mcd:.2e} "
                  f"[continuous-flow RMSE {cont:.3f}, informational]", t0)
    assert time.perf_counter() - t0 < 60


# -- 3. gradients ------------------------------------------------------------------

def test_criterion_3_gradient_suite(schedule):
    t0 = time.perf_counter()
    errors = gradcases.all_cases(schedule)
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values())
    record(3, ok, "max relative error " + f"{errors[worst]:.1e} ({worst}); "
           + ", ".join(f"{k}={v:.0e}" for k, v in errors.items()), t0)
    assert time.perf_counter() - t0 < 120


# -- 4. motion representations -------------------------------------------------------

def test_criterion_4_motion_invariants():
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    # integer-valued float64 keeps every DIFF operation exact
    u = torch.randint(-50, 51, (3, 6, 2, 5, 5), generator=gen).to(torch.float64)
    v = torch.randint(-50, 51, (3, 6, 2, 5, 5), generator=gen).to(torch.float64)
    off = torch.randint(-9, 10, (3, 1, 1, 1, 1), generator=gen).to(torch.float64).expand_as(u)
    diff_ok = torch.equal(motion_difference(u + off).payload, motion_difference(u).payload)
    diff_ok &= torch.equal(motion_difference(3 * u - 2 * v).payload,
                           3 * motion_difference(u).payload - 2 * motion_difference(v).payload)

    w = torch.randn((3, 4, 1, 16, 16), generator=gen, dtype=torch.float64)
    low, high = motion_freq_split(w, 0.25)
    recon = float((low.payload + high.payload - w).abs().max())
    total = (w**2).sum(dim=(-2, -1))
    parseval = float((((low.payload**2).sum(dim=(-2, -1)) + (high.payload**2).sum(dim=(-2, -1)) - total)
                      / total).abs().max())

    F_, C, H, W = 3, 2, 4, 4
    one_hot = torch.zeros(F_, C, H, W, dtype=torch.float64)
    for f, (y, x) in enumerate([(0, 1), (2, 3), (3, 0)]):
        one_hot[f, 0, y, x] = 1.0
    payload = motion_correlation(one_hot).payload
    expect = torch.zeros_like(payload)
    for i in range(F_ - 1):
        for p in itertools.product(range(H), range(W)):
            for q in itertools.product(range(H), range(W)):
                expect[(i,) + p + q] = sum(one_hot[i + 1, c][p] * one_hot[i, c][q] for c in range(C)) / C
    corr_ok = torch.equal(payload, expect)

    torch.manual_seed(0)
    head = MotionHead(1 * 6 * 6, hidden=16).double()
    clip = torch.randn((2, 5, 1, 6, 6), generator=gen, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    equi_ok = torch.equal(head(clip[:, perm]), head(clip)[:, perm])

    ok = diff_ok and corr_ok and equi_ok and recon < 1e-6 and parseval < 1e-6
    record(4, ok, f"diff exact={diff_ok} freq recon={recon:.1e} parseval={parseval:.1e} "
                  f"corr exact={corr_ok} learnable equivariant={equi_ok}", t0)
    assert time.perf_counter() - t0 < 30


# -- 5. loss collapse --------------------------------------------------------------------

def test_criterion_5_loss_collapse(schedule, small_params):
    t0 = time.perf_counter()
    teacher = make_denoiser(schedule, small_params, seed=7).requires_grad_(False)
    world = (teacher, make_lq_video_dataset(32, small_params, seed=0), make_hq_image_dataset(32, small_params, seed=1))
    failures = []
    for lam, kind in itertools.product((0.0, 1.0), ("raw", "diff", "learnable")):
        try:
            td.test_total_loss_collapses_to_single_source(world, schedule, lam, kind)
        except AssertionError:
            failures.append(f"lambda_real={lam} {kind}")
    try:
        td.test_mcm_with_baseline_settings_reproduces_lcm_loop(world, schedule)
        lcm_ok = True
    except AssertionError:
        lcm_ok = False
    ok = not failures and lcm_ok
    record(5, ok, f"single-source identities exact ({6 - len(failures)}/6); "
                  f"MCM(raw, no adv, all real) == LCM loop bitwise: {lcm_ok}", t0)
    assert time.perf_counter() - t0 < 60


# -- 8. metric correctness (cheap, so before the long runs) ---------------------------

def test_criterion_8_metric_correctness():
    t0 = time.perf_counter()
    one_d = frechet_from_stats([0.0], [[1.0]], [1.0], [[1.0]])
    x = np.random.default_rng(0).normal(size=(400, 6))
    same = frechet_distance(x, x)
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    sa, sb = A @ A.T + 0.1 * np.eye(5), B @ B.T + 0.1 * np.eye(5)
    mu_a, mu_b = rng.normal(size=5), rng.normal(size=5)
    # oracle: tr sqrt(sa sb) from the eigenvalues of sqrt(sa) sb sqrt(sa)
    ev, V = np.linalg.eigh(sa)
    root = V @ np.diag(np.sqrt(ev)) @ V.T
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(root @ sb @ root), 0, None)).sum()
    oracle = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt)
    err5 = abs(frechet_from_stats(mu_a, sa, mu_b, sb) - oracle)
    ok = one_d == 1.0 and same < 1e-6 and err5 < 1e-6
    record(8, ok, f"1-D case={one_d!r} identical-set={same:.1e} 5-D vs eigen oracle={err5:.1e}", t0)
    assert time.perf_counter() - t0 < 10


# -- shared end-to-end experiment for 6 and 7 ---------------------------------------

@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = os.environ.get("MCMLAB_ACCEPTANCE_DIR")
    out = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    cfg = apply_overrides(load_config(CONFIG), out=out)
    timings = {}
    t = time.perf_counter()
    if not (out / "data" / "reference" / "manifest.json").exists():
        cli.cmd_gen_data(cfg, force=True)
    timings["data"] = time.perf_counter() - t
    t = time.perf_counter()
    if not (out / "teacher" / "teacher.ckpt").exists():
        cli.cmd_train_teacher(cfg)
    timings["teacher"] = time.perf_counter() - t
    return cfg, out, timings


def _cell(cfg, out, **overrides) -> dict:
    d = DistillConfig(**{**cfg.distill.to_dict(), **overrides})
    run_dir = out / "distill" / cli.run_name(d)
    cached = cli._cached_row(run_dir, d.eval_steps)
    return cached if cached is not None else cli.distill_run(cfg, d, run_dir)


def test_criterion_6_appearance_transfer(experiment):
    t0 = time.perf_counter()
    cfg, out, timings = experiment
    lcm = _cell(cfg, out, motion_kind="raw", lambda_adv=0.0, lambda_real=1.0, seed=0)
    mcm = _cell(cfg, out, seed=0)
    wm_l, wm_m = lcm["watermark_energy@4"], mcm["watermark_energy@4"]
    me_l, me_m = lcm["motion_err@4"], mcm["motion_err@4"]
    wm_drop = 1.0 - wm_m / wm_l
    me_rise = me_m / me_l - 1.0
    elapsed = time.perf_counter() - t0 + timings["data"] + timings["teacher"]
    ok = wm_drop >= 0.30 and me_rise <= 0.25 and elapsed <= 45 * 60
    record(6, ok, f"4-step watermark energy LCM={wm_l:.3f} MCM={wm_m:.3f} (-{100 * wm_drop:.0f}%, need >=30%); "
                  f"motion error LCM={me_l:.3f} MCM={me_m:.3f} ({100 * me_rise:+.0f}%, need <=+25%); "
                  f"n={cfg.eval.n_samples} paired; {elapsed / 60:.1f} min incl. teacher", t0)


def test_criterion_7_ablation_trends(experiment):
    t0 = time.perf_counter()
    cfg, out, timings = experiment
    seeds = cfg.ablate.seeds
    adv = {s: _cell(cfg, out, motion_kind="raw", lambda_real=1.0, seed=s) for s in seeds}
    lam = {(s, lr): _cell(cfg, out, motion_kind="learnable", lambda_real=lr, seed=s)
           for s in seeds for lr in (1.0, 0.5, 0.0)}
    steps_1_4 = (1, 2, 4)

    # (a) Adv+MCD beats Adv-only at every step count 1..4
    wins_a = [all(lam[s, 1.0][f"fvd_proxy@{k}"] < adv[s][f"fvd_proxy@{k}"] for k in steps_1_4) for s in seeds]
    # (b) mixed real/generated is no worse than either pure source at 2 steps
    wins_b = [lam[s, 0.5]["fvd_proxy@2"] <= min(lam[s, 1.0]["fvd_proxy@2"], lam[s, 0.0]["fvd_proxy@2"])
              for s in seeds]
    # (c) generated-only runs produce more near-dark samples (pooled over seeds and steps 1..4)
    dark0 = float(np.mean([lam[s, 0.0][f"dark_frac@{k}"] for s in seeds for k in steps_1_4]))
    dark5 = float(np.mean([lam[s, 0.5][f"dark_frac@{k}"] for s in seeds for k in steps_1_4]))
    elapsed = time.perf_counter() - t0 + timings["teacher"]

    def fvds(row):
        return "/".join(f"{row[f'fvd_proxy@{k}']:.3f}" for k in steps_1_4)

    detail = (f"(a) {sum(wins_a)}/3 seeds [" + "; ".join(f"Adv {fvds(adv[s])} vs +MCD {fvds(lam[s, 1.0])}"
                                                        for s in seeds) + "] "
              f"(b) {sum(wins_b)}/3 seeds [" + "; ".join(
                  f"{lam[s, 1.0]['fvd_proxy@2']:.3f}/{lam[s, 0.5]['fvd_proxy@2']:.3f}/{lam[s, 0.0]['fvd_proxy@2']:.3f}"
                  for s in seeds) + " for lambda_real 1/0.5/0] "
              f"(c) near-dark fraction lambda_real=0: {dark0:.3f} vs 0.5: {dark5:.3f}; {elapsed / 60:.1f} min")
    ok = sum(wins_a) >= 2 and sum(wins_b) >= 2 and dark0 > dark5 and elapsed <= 3 * 3600
    record(7, ok, detail, t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
