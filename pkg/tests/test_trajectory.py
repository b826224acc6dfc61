import numpy as np
import pytest
import torch
from scipy import stats

from mcmlab.consistency import consistency_apply, make_student
from mcmlab.data import make_lq_video_dataset
from mcmlab.trajectory import (
    RngStreams,
    Source,
    TrajectoryBatch,
    build_mixed_batch,
    sample_real_point,
    simulate_hq_trajectory,
)
from conftest import make_denoiser


@pytest.fixture(scope="module")
def setup(schedule, small_params):
    ds = make_lq_video_dataset(32, small_params, seed=0)
    student = make_student(make_denoiser(schedule, small_params), schedule)
    return ds, student


def test_real_points_follow_forward_process(schedule):
    x0 = torch.randn(4, 3, 1, 2, 2)
    batch = sample_real_point(x0, torch.tensor([0, 1, 2, 3]), schedule, torch.Generator().manual_seed(0))
    a = schedule.alpha(batch.t, like=x0)
    s = schedule.sigma(batch.t, like=x0)
    torch.testing.assert_close(batch.x_t, a * x0 + s * batch.eps)
    assert set(batch.t.tolist()) <= set(schedule.solver_timesteps().tolist())
    assert batch.sources == [Source.REAL] * 4


def test_simulated_trajectory_renoises_one_step_generation(setup, schedule):
    _, student = setup
    gen = torch.Generator().manual_seed(4)
    batch = simulate_hq_trajectory(student, torch.tensor([1, 2, 3]), schedule, gen, t=500)
    replay = torch.Generator().manual_seed(4)
    x_T = torch.randn(batch.x_t.shape, generator=replay)
    with torch.no_grad():
        x0_hat = consistency_apply(student, x_T, schedule.T, torch.tensor([1, 2, 3]))
    torch.testing.assert_close(batch.x_start, x0_hat)
    a, s = schedule.alphas[500], schedule.sigmas[500]
    torch.testing.assert_close(batch.x_t, (a * x0_hat + s * batch.eps).float(), rtol=1e-5, atol=1e-6)
    assert not batch.x_start.requires_grad
    assert all(src is Source.GENERATED for src in batch.sources)


def test_mixing_proportion_is_binomial(setup):
    ds, student = setup
    streams = RngStreams(11)
    n_real = 0
    draws = 0
    for _ in range(60):
        batch = build_mixed_batch(ds, student, 16, 0.3, streams)
        n_real += int(batch.is_real.sum())
        draws += len(batch)
    assert stats.binomtest(n_real, draws, 0.3).pvalue > 1e-3


@pytest.mark.parametrize("lam,expect", [(1.0, True), (0.0, False)])
def test_extreme_lambdas_give_single_source(setup, lam, expect):
    ds, student = setup
    batch = build_mixed_batch(ds, student, 8, lam, RngStreams(0))
    assert bool(batch.is_real.all()) is expect and bool(batch.is_real.any()) is expect


def test_invalid_lambda(setup):
    ds, student = setup
    with pytest.raises(ValueError):
        build_mixed_batch(ds, student, 4, 1.5, RngStreams(0))


def test_batch_iteration_and_concat(setup):
    ds, student = setup
    batch = build_mixed_batch(ds, student, 6, 0.5, RngStreams(2))
    items = list(batch)
    assert len(items) == 6 and items[0].x_t.shape == batch.x_t.shape[1:]
    assert [s.source for s in items] == batch.sources
    real = batch.select(batch.is_real)
    assert len(TrajectoryBatch.concat([real, batch.select(~batch.is_real)])) == 6


def test_streams_are_independent_and_restorable():
    a = RngStreams(3)
    first = torch.rand(3, generator=a.noise)
    b = RngStreams(3)
    torch.rand(100, generator=b.mix)
    assert torch.equal(torch.rand(3, generator=b.noise), first)
    state = a.get_state()
    x = torch.rand(2, generator=a.adv)
    a.set_state(state)
    assert torch.equal(torch.rand(2, generator=a.adv), x)
