import pytest

import gradcases

TOL = 1e-4


@pytest.mark.parametrize("name", ["huber", "huber_small_residual", "hinge_discriminator", "hinge_generator",
                                  "motion_head"])
def test_loss_gradients_match_finite_differences(name):
    assert getattr(gradcases, f"case_{name}")() < TOL


def test_cd_loss_gradient(schedule):
    assert gradcases.case_cd_loss(schedule) < TOL


def test_teacher_loss_gradient(schedule):
    assert gradcases.case_teacher_loss(schedule) < TOL
