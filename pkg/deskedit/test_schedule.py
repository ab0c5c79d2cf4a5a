import math

import numpy as np
import pytest

from deskedit.app.services.sampler_service import ddim_invert_step, ddim_step
from deskedit.app.services.schedule_service import (
    NoiseSchedule, build_schedule, ddpm_posterior_std, q_sample, sigma,
)
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError, RangeError
from deskedit.app.utils.tensor import Tensor


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


def toy_schedule() -> NoiseSchedule:
    alpha_bar = np.array([1.0, 0.7, 0.5])
    beta = np.concatenate([[0.0], 1.0 - alpha_bar[1:] / alpha_bar[:-1]])
    return NoiseSchedule(2, 0.3, 0.3, beta, alpha_bar, (2, 1))


def test_default_schedule_geometry(schedule):
    assert schedule.infer_count == 50
    assert schedule.infer_steps[0] == 981
    assert schedule.infer_steps[-1] == 1
    assert np.all(np.diff(schedule.infer_steps) == -20)
    assert schedule.alpha_bar[0] == 1.0
    assert schedule.beta[1] == pytest.approx(1e-4)
    assert schedule.beta[1000] == pytest.approx(0.02)
    assert schedule.alpha_bar[1000] == pytest.approx(4.04e-5, rel=0.01)
    assert np.all(np.diff(schedule.alpha_bar) < 0)


def test_step_pairs_end_at_zero(schedule):
    pairs = schedule.step_pairs()
    assert pairs[0] == (981, 961)
    assert pairs[-1] == (1, 0)
    assert all(t > tp for t, tp in pairs)


@pytest.mark.parametrize("kwargs", [
    {"t_train": 0},
    {"beta_min": 0.0},
    {"beta_min": 0.1, "beta_max": 0.01},
    {"infer_count": 0},
    {"t_train": 10, "infer_count": 11},
])
def test_invalid_schedules_raise(kwargs):
    with pytest.raises(ConfigurationError):
        build_schedule(**kwargs)


def test_alpha_bar_lookup_outside_range(schedule):
    with pytest.raises(RangeError):
        schedule.ab(1001)
    with pytest.raises(RangeError):
        schedule.ab(-1)


def test_q_sample_mixes_image_and_noise(schedule):
    x0, eps = Tensor(np.full((2, 2), 0.5)), Tensor(np.ones((2, 2)))
    a = schedule.ab(500)
    np.testing.assert_allclose(q_sample(schedule, x0, 500, eps).data, math.sqrt(a) * 0.5 + math.sqrt(1 - a))
    np.testing.assert_array_equal(q_sample(schedule, x0, 0, eps).data, x0.data)
    with pytest.raises(DimensionError):
        q_sample(schedule, x0, 10, Tensor(np.ones(3)))


def test_sigma_limits(schedule):
    for t, tp in schedule.step_pairs():
        assert sigma(schedule, t, tp, 0.0) == 0.0
        assert sigma(schedule, t, tp, 1.0) == pytest.approx(ddpm_posterior_std(schedule, t, tp), abs=1e-12)
    assert sigma(schedule, 981, 961, 0.5) == pytest.approx(0.5 * sigma(schedule, 981, 961, 1.0))


def test_sigma_rejects_bad_arguments(schedule):
    with pytest.raises(RangeError):
        sigma(schedule, 500, 500, 0.5)
    with pytest.raises(ConfigurationError):
        sigma(schedule, 500, 480, -0.1)


def test_hand_worked_deterministic_step():
    toy = toy_schedule()
    out = ddim_step(toy, Tensor([[1.0]]), Tensor([[1.0]]), 2, 1)
    assert out.item() == pytest.approx(0.8942784876, abs=1e-9)


def test_hand_worked_inversion_step():
    toy = toy_schedule()
    out = ddim_invert_step(toy, Tensor([[2.0]]), Tensor([[0.5]]), 2, 1)
    assert out.item() == pytest.approx(1.8124068751, abs=1e-9)


def test_hand_worked_stochastic_step():
    toy = toy_schedule()
    s = sigma(toy, 2, 1, 0.5)
    assert s == pytest.approx(0.2070196678, abs=1e-9)
    out = ddim_step(toy, Tensor([[1.0]]), Tensor([[1.0]]), 2, 1, s, Tensor([[2.0]]))
    assert out.item() == pytest.approx(1.2676878185, abs=1e-9)
