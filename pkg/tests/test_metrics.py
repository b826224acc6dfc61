import numpy as np
import pytest
import scipy.linalg
import torch

from mcmlab.data import DataParams, SceneSpec, render_clip
from mcmlab.metrics import (
    FeatureEmbedder,
    MotionUndefinedError,
    fid_proxy,
    frechet_distance,
    frechet_from_stats,
    fvd_proxy,
    mean_motion_error,
    motion_error,
    near_dark_fraction,
    watermark_energy,
)


def scipy_frechet(mu_a, sa, mu_b, sb):
    covmean = scipy.linalg.sqrtm(sa @ sb)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2 * covmean.real))


def test_one_dimensional_closed_form_is_exact():
    assert frechet_from_stats([0.0], [[1.0]], [1.0], [[1.0]]) == 1.0
    assert frechet_from_stats([0.0], [[1.0]], [0.0], [[4.0]]) == 1.0


def test_identical_sets_give_zero():
    x = np.random.default_rng(0).normal(size=(300, 6))
    assert frechet_distance(x, x) < 1e-6


def test_random_5d_against_eigen_oracle():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    sa, sb = A @ A.T + 0.1 * np.eye(5), B @ B.T + 0.1 * np.eye(5)
    mu_a, mu_b = rng.normal(size=5), rng.normal(size=5)
    ours = frechet_from_stats(mu_a, sa, mu_b, sb)
    assert abs(ours - scipy_frechet(mu_a, sa, mu_b, sb)) < 1e-6
    assert abs(ours - frechet_from_stats(mu_b, sb, mu_a, sa)) < 1e-6


def test_sample_count_precondition_and_rank_deficient_warning(caplog):
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((3, 4)), np.zeros((3, 4)))
    x = np.random.default_rng(2).normal(size=(50, 3))
    x[:, 2] = x[:, 0]
    with caplog.at_level("WARNING"):
        assert frechet_distance(x, x) >= 0
    assert "rank deficient" in caplog.text


def test_proxies_are_deterministic_and_sensitive():
    rng = np.random.default_rng(3)
    vids = rng.normal(size=(60, 8, 1, 16, 16)).astype(np.float32) * 0.1
    emb = FeatureEmbedder()
    assert fvd_proxy(emb, vids, vids) < 1e-6
    shifted = vids + 0.5
    assert fvd_proxy(FeatureEmbedder(), vids, shifted) == pytest.approx(fvd_proxy(emb, vids, shifted))
    assert fvd_proxy(emb, vids, shifted) > 0.1
    assert fid_proxy(emb, vids[:, 0], vids[:, 0]) < 1e-6


def test_watermark_energy_region():
    v = np.zeros((2, 8, 1, 16, 16))
    v[..., 12:16, 10:16] = -0.5
    assert watermark_energy(v, (12, 16, 10, 16)) == pytest.approx(0.5)
    assert watermark_energy(v, (0, 4, 0, 4)) == 0.0


def _clip(velocity, watermark=False):
    from mcmlab.data import Degradation

    spec = SceneSpec((4.0, 5.0), velocity, 1.5, 0, Degradation(watermark=watermark))
    clip, _ = render_clip(spec, 8, 16, 16, np.random.default_rng(0))
    return clip


@pytest.mark.parametrize("vel", [(1.0, 0.0), (0.0, 1.0), (0.7071, 0.7071)])
def test_centroid_round_trip(vel):
    assert motion_error(_clip(vel), vel) < 0.2


def test_watermark_excluded_from_centroid():
    clip = _clip((1.0, 0.0), watermark=True)
    assert motion_error(clip, (1.0, 0.0), exclude=(12, 16, 10, 16)) < 0.2


def test_static_blob_error_equals_speed():
    clip = _clip((0.0, 0.0))
    assert motion_error(clip, (1.0, 0.0)) == pytest.approx(1.0, abs=1e-6)


def test_undefined_motion_on_empty_frames():
    with pytest.raises(MotionUndefinedError):
        motion_error(np.zeros((8, 1, 16, 16)), (1.0, 0.0))
    vids = np.stack([_clip((1.0, 0.0)), np.zeros((8, 1, 16, 16), dtype=np.float32)])
    err, undefined = mean_motion_error(vids, np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert undefined == 1 and err < 0.2


def test_near_dark_fraction():
    bright = _clip((1.0, 0.0))
    dark = 0.1 * bright
    vids = np.stack([bright, dark, dark, bright])
    assert near_dark_fraction(vids) == 0.5
    wm = _clip((1.0, 0.0), watermark=True) * 0.1
    wm[..., 12:16, 10:16] = 0.8
    assert near_dark_fraction(wm[None], exclude=(12, 16, 10, 16)) == 1.0
