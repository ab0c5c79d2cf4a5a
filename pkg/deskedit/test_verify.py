import numpy as np
import pytest

from deskedit.app.services.denoiser_service import AnalyticGmmDenoiser, ConditionBundle, GmmPrior
from deskedit.app.services.sampler_service import reconstruct
from deskedit.app.services.schedule_service import build_schedule
from deskedit.app.services.verify_service import (
    SUITES, blob_move_experiment, check, marginal_checks, ode_variance_factor, run_suite,
)
from deskedit.app.utils.exceptions import SuiteError
from deskedit.app.utils.tensor import Tensor

FAST = ["limits", "inverse", "oracle", "roundtrip", "gradcheck", "masking", "fused"]
SLOW = ["marginals", "sde", "blobmove", "training"]


def test_every_suite_is_registered():
    assert sorted(SUITES) == sorted(FAST + SLOW)


def test_check_thresholds():
    assert check("a", 0.5, 1.0).passed
    assert not check("a", 1.5, 1.0).passed
    assert not check("a", 0.5, 1.0, passed=False).passed


@pytest.mark.parametrize("name", FAST)
def test_fast_suites_pass(name):
    report = run_suite(name)
    failed = [c for c in report.checks if not c.passed]
    assert report.passed, failed
    assert report.suite == name and report.checks


@pytest.mark.slow
@pytest.mark.parametrize("name", SLOW)
def test_slow_suites_pass(name):
    report = run_suite(name)
    assert report.passed, [c for c in report.checks if not c.passed]


@pytest.mark.slow
def test_blob_move_identity_is_exact():
    outcome = blob_move_experiment(seeds=(0,))
    assert outcome.identity_exact
    assert len(outcome.errors) == 1


def test_unknown_suite_raises():
    with pytest.raises(SuiteError):
        run_suite("everything")


def whitened(rng, count: int, dim: int = 2) -> np.ndarray:
    x = rng.standard_normal((count, dim))
    x = x - x.mean(axis=0)
    return x @ np.linalg.inv(np.linalg.cholesky(np.cov(x, rowvar=False))).T


def test_ode_variance_factor_on_default_schedule():
    schedule = build_schedule()
    assert ode_variance_factor(schedule, 1.0) == pytest.approx(0.92945, rel=1e-4)
    assert ode_variance_factor(schedule, 0.8) == pytest.approx(1.0 - 0.0789, abs=5e-4)
    # no prior scale keeps fifty deterministic steps within 5% of the prior variance
    assert all(1.0 - ode_variance_factor(schedule, s) > 0.05 for s in (0.5, 1.0, 2.0, 3.0, 5.0))


def test_reconstructed_covariance_matches_the_shrunk_prior(rng):
    schedule = build_schedule()
    denoiser = AnalyticGmmDenoiser(GmmPrior(np.ones(1), np.zeros((1, 2)), 1.0), schedule)
    x = reconstruct(Tensor(whitened(rng, 200)), ConditionBundle(), denoiser, schedule).data
    kappa = ode_variance_factor(schedule, 1.0)
    np.testing.assert_allclose(np.cov(x, rowvar=False), kappa * np.eye(2), atol=1e-9)


def test_marginal_checks_gate_every_covariance_entry(rng):
    mean = np.array([0.5, -0.3])
    samples = whitened(rng, 4000) + mean
    assert all(c.passed for c in marginal_checks(samples, mean, np.eye(2)))

    shrunk = {c.name: c for c in marginal_checks((samples - mean) * np.sqrt(0.92) + mean, mean, np.eye(2))}
    assert shrunk["sample_mean_abs_error"].passed
    assert not shrunk["sample_covariance_rel_error"].passed
    assert shrunk["sample_covariance_rel_error"].value == pytest.approx(0.08, abs=1e-9)

    shear = np.array([[1.0, 0.2], [0.0, 1.0]])
    correlated = {c.name: c for c in marginal_checks(samples @ shear, mean @ shear, np.eye(2))}
    assert not correlated["sample_covariance_rel_error"].passed
