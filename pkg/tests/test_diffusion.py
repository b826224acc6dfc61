import numpy as np
import pytest
import torch

from mcmlab.data import NULL_CLASS, make_lq_video_dataset
from mcmlab.diffusion import (
    AnalyticGaussianDenoiser,
    DivergenceError,
    ShapeError,
    SingularStepError,
    TeacherConfig,
    add_noise,
    ddim_sample,
    ddim_step,
    guided_eps,
    init_teacher_state,
    predict_x0,
    teacher_loss,
    train_teacher,
)
from conftest import make_denoiser
from oracles import trajectory_map


def test_add_noise_predict_x0_round_trip(schedule):
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn((6, 8, 1, 16, 16), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    for t in (1, 20, 500, 999):
        x_t = add_noise(x0, eps, t, schedule)
        assert (predict_x0(x_t, eps, t, schedule) - x0).abs().max() < 1e-6 * max(1.0, 1 / schedule.alphas[t])
    t = torch.tensor([1, 100, 400, 700, 900, 999])
    x_t = add_noise(x0, eps, t, schedule)
    assert (predict_x0(x_t, eps, t, schedule) - x0).abs().max() < 1e-3


def test_add_noise_shape_mismatch(schedule):
    with pytest.raises(ShapeError):
        add_noise(torch.zeros(2, 3), torch.zeros(2, 4), 5, schedule)


def test_predict_x0_singular_at_terminal(schedule):
    with pytest.raises(SingularStepError):
        predict_x0(torch.zeros(1, 4), torch.zeros(1, 4), schedule.T, schedule)


def test_guidance_identities(schedule, small_params):
    net = make_denoiser(schedule, small_params)
    gen = torch.Generator().manual_seed(0)
    x = torch.randn((3, 4, 1, 8, 8), generator=gen)
    cond = torch.tensor([0, 1, 2])
    t = torch.tensor([10, 500, 1000])
    with torch.no_grad():
        eps_c = net(x, t, cond)
        eps_u = net(x, t, torch.full_like(cond, NULL_CLASS))
        assert torch.equal(guided_eps(net, x, t, cond, 1.0), eps_c)
        assert torch.equal(guided_eps(net, x, t, cond, 0.0), eps_u)
        w = torch.tensor([2.0, 5.0, 9.0])
        expect = eps_u + w.reshape(3, 1, 1, 1, 1) * (eps_c - eps_u)
        torch.testing.assert_close(guided_eps(net, x, t, cond, w), expect, rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        guided_eps(net, x, t, torch.full_like(cond, NULL_CLASS), 2.0)


def test_velocity_parametrization_is_exact_at_terminal(schedule, small_params):
    net = make_denoiser(schedule, small_params)
    x = torch.randn((2, 4, 1, 8, 8), generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        assert torch.equal(net(x, schedule.T, torch.tensor([0, 1])), x)
        net.output_kind = "x0"
        v = net.body(x, 300, torch.tensor([0, 1]))
        a, s = schedule.alphas[300], schedule.sigmas[300]
        torch.testing.assert_close(net(x, 300, torch.tensor([0, 1])), (a * x - s * v).float())


def test_ddim_step_same_timestep_is_identity(schedule):
    den = AnalyticGaussianDenoiser(schedule, 0.3, 0.5)
    x = torch.randn(4, 16, dtype=torch.float64)
    assert torch.equal(ddim_step(den, x, 500, 500, None, 1.0, schedule, guidance=False), x)
    with pytest.raises(ValueError):
        ddim_step(den, x, 400, 500, None, 1.0, schedule, guidance=False)


def test_ddim_sample_matches_affine_composition(schedule):
    mu, s = 0.5, 0.5
    den = AnalyticGaussianDenoiser(schedule, mu, s)
    x_T = torch.randn(20000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    out = ddim_sample(den, None, None, schedule, num_steps=50, x_T=x_T, guidance=False)
    ts = np.linspace(schedule.T, 0, 51).round().astype(int)
    A, B = trajectory_map(schedule.alphas.tolist(), schedule.sigmas.tolist(), ts, mu, s)
    assert float(torch.sqrt(((out - (A * x_T + B)) ** 2).mean())) < 1e-10


def test_ddim_approaches_continuous_flow_with_more_steps(schedule):
    mu, s = 0.5, 0.5
    den = AnalyticGaussianDenoiser(schedule, mu, s)
    z = torch.randn(20000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    rmse = []
    for n in (10, 50, 250):
        out = ddim_sample(den, None, None, schedule, num_steps=n, x_T=z, guidance=False)
        rmse.append(float(torch.sqrt(((out - (mu + s * z)) ** 2).mean())))
    assert rmse[0] > rmse[1] > rmse[2]


def test_teacher_loss_finite_and_resume_is_bit_compatible(schedule, small_params):
    ds = make_lq_video_dataset(64, small_params, seed=0)
    cfg = TeacherConfig(hidden=8, time_dim=8, steps=6, batch_size=8, log_every=1)
    full, log_full = train_teacher(ds, cfg, schedule)
    assert np.isfinite(log_full[0]["loss"])

    half = TeacherConfig(**{**cfg.to_dict(), "steps": 3})
    state = init_teacher_state(ds, half, schedule)
    train_teacher(ds, half, schedule, state=state)
    resumed, log_resumed = train_teacher(ds, cfg, schedule, state=state)
    assert [r["loss"] for r in log_resumed] == [r["loss"] for r in log_full]
    for p, q in zip(full.parameters(), resumed.parameters()):
        assert torch.equal(p, q)


def test_teacher_divergence_raises(schedule, small_params):
    ds = make_lq_video_dataset(16, small_params, seed=0)
    ds.videos[:] = np.nan
    with pytest.raises(DivergenceError):
        train_teacher(ds, TeacherConfig(hidden=8, time_dim=8, steps=2, batch_size=4), schedule)


def test_teacher_rejects_empty_dataset(schedule, small_params):
    ds = make_lq_video_dataset(0, small_params, seed=0)
    with pytest.raises(ValueError):
        train_teacher(ds, TeacherConfig(steps=1), schedule)


def test_velocity_loss_is_weighted_eps_loss(schedule, small_params):
    net = make_denoiser(schedule, small_params, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn((4, 4, 1, 8, 8), generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    t = torch.tensor([300, 300, 300, 300])
    cond = torch.tensor([0, 1, 2, 3])
    with torch.no_grad():
        eps_mse = ((net(add_noise(x0, eps, t, schedule), t, cond) - eps) ** 2).mean()
        v_loss = teacher_loss(net, x0, eps, t, cond, schedule)
    assert float(v_loss) == pytest.approx(float(eps_mse) / schedule.alphas[300] ** 2, rel=1e-9)
