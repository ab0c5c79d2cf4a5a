import numpy as np
import pytest

from deskedit.app.models.schemas import DenoiserConfig, SamplerConfig
from deskedit.app.services.dataset_service import blob_mask, blob_position_prior, render_blob
from deskedit.app.services.denoiser_service import AnalyticGmmDenoiser, ConditionBundle, TinyAttentionDenoiser
from deskedit.app.services.guidance_service import identity_spec
from deskedit.app.services.sampler_service import (
    BankRecord, MemoryBank, ddim_invert_step, ddim_step, invert, load_bank, random_rollback, reconstruct,
    regional_sde_step, run_edit, save_bank, time_travel_rollback,
)
from deskedit.app.services.schedule_service import build_schedule, sigma
from deskedit.app.services.task_service import build_move_spec, build_paste_spec
from deskedit.app.utils.exceptions import BankError, ConfigurationError, DimensionError, SamplingError
from deskedit.app.utils.tensor import Tensor

COND = ConditionBundle()


@pytest.fixture(scope="module")
def schedule():
    return build_schedule()


@pytest.fixture(scope="module")
def denoiser(schedule):
    positions = [(y, x) for y in (6, 8, 10) for x in (4, 6, 8, 10, 12)]
    return AnalyticGmmDenoiser(blob_position_prior(16, positions=positions, std=0.1), schedule)


@pytest.fixture(scope="module")
def source():
    return render_blob(16, (8, 6), 2.0)


@pytest.fixture(scope="module")
def move_spec(source):
    return build_move_spec(blob_mask(source), (0, 4))


@pytest.fixture(scope="module")
def inversion(source, denoiser, schedule):
    return invert(Tensor(source), COND, denoiser, schedule)


def test_bank_rejects_wrong_shapes_and_missing_steps(schedule):
    bank = MemoryBank((4, 4))
    with pytest.raises(DimensionError):
        bank.put(BankRecord(1, np.zeros((3, 3))))
    bank.put(BankRecord(21, np.zeros((4, 4))))
    bank.put(BankRecord(1, np.zeros((4, 4))))
    assert bank.timesteps == [21, 1]
    assert 21 in bank and 41 not in bank
    with pytest.raises(BankError):
        bank.get(41)
    with pytest.raises(BankError):
        bank.check_complete(schedule)


def test_inversion_step_undoes_deterministic_step(schedule, rng):
    for t, tp in schedule.step_pairs()[::7]:
        z, eps = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
        back = ddim_invert_step(schedule, ddim_step(schedule, z, eps, t, tp), eps, t, tp)
        np.testing.assert_allclose(back.data, z.data, atol=1e-12)
        rolled = time_travel_rollback(schedule, ddim_step(schedule, z, eps, t, tp), eps, t, tp)
        np.testing.assert_allclose(rolled.data, z.data, atol=1e-12)


def test_stochastic_step_needs_matching_noise(schedule):
    z = Tensor(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        ddim_step(schedule, z, z, 981, 961, 0.1)
    with pytest.raises(ConfigurationError):
        ddim_step(schedule, z, z, 981, 961, 2.0, z)


def test_random_rollback_is_seeded(schedule, rng):
    z = Tensor(rng.standard_normal((4, 4)))
    a = random_rollback(schedule, z, 501, 481, np.random.default_rng(3))
    b = random_rollback(schedule, z, 501, 481, np.random.default_rng(3))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, z.data)


def test_regional_sde_blends_one_shared_draw(schedule, rng):
    t, tp = schedule.step_pairs()[5]
    z, eps = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
    mask = np.zeros((4, 4))
    mask[:2] = 1.0
    out = regional_sde_step(schedule, z, eps, t, tp, mask, 0.6, 0.3, True, np.random.default_rng(9)).data
    noise = Tensor(np.random.default_rng(9).standard_normal((4, 4)))
    inside = ddim_step(schedule, z, eps, t, tp, sigma(schedule, t, tp, 0.6), noise).data
    outside = ddim_step(schedule, z, eps, t, tp, sigma(schedule, t, tp, 0.3), noise).data
    np.testing.assert_allclose(out[:2], inside[:2], rtol=1e-12)
    np.testing.assert_allclose(out[2:], outside[2:], rtol=1e-12)


def test_regional_sde_without_noise_is_the_ode_step(schedule, rng):
    t, tp = schedule.step_pairs()[5]
    z, eps = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
    plain = ddim_step(schedule, z, eps, t, tp).data
    mask = np.ones((4, 4))
    quiet = regional_sde_step(schedule, z, eps, t, tp, mask, 0.0, 0.0, True, rng).data
    outside = regional_sde_step(schedule, z, eps, t, tp, mask, 0.6, 0.3, False, rng).data
    np.testing.assert_array_equal(quiet, plain)
    np.testing.assert_array_equal(outside, plain)


def test_inversion_reconstructs_prior_samples(schedule, denoiser, rng):
    x0 = denoiser.prior.sample(5, rng)
    z_T, bank = invert(Tensor(x0), COND, denoiser, schedule)
    rec = reconstruct(z_T, COND, denoiser, schedule).data
    rel = ((rec - x0) ** 2).sum(axis=(1, 2)) / (x0 ** 2).sum(axis=(1, 2))
    assert rel.max() <= 1e-2
    assert bank.timesteps == list(schedule.infer_steps)
    np.testing.assert_array_equal(bank.get(schedule.infer_steps[0]).z_gud, z_T.data)


def test_reference_inversion_fills_reference_entries(schedule, denoiser, source):
    reference = render_blob(16, (10, 12), 2.0)
    z_T, bank = invert(Tensor(source), COND, denoiser, schedule, Tensor(reference))
    ref_T, _ = invert(Tensor(reference), COND, denoiser, schedule)
    np.testing.assert_array_equal(bank.get(schedule.infer_steps[0]).z_ref, ref_T.data)
    with pytest.raises(DimensionError):
        invert(Tensor(source), COND, denoiser, schedule, Tensor(np.zeros((8, 8))))


def test_bank_file_keeps_latents_and_attention(tmp_path, rng):
    schedule = build_schedule(infer_count=5)
    model = TinyAttentionDenoiser.init(DenoiserConfig(image_size=8, patch_size=4, width=8, num_labels=2,
                                                      zero_init_output=False, seed=1))
    x0, ref = Tensor(rng.uniform(-1, 1, (8, 8))), Tensor(rng.uniform(-1, 1, (8, 8)))
    _, bank = invert(x0, COND, model, schedule, ref)
    save_bank(tmp_path / "bank.bundle", bank)
    loaded = load_bank(tmp_path / "bank.bundle", schedule)
    assert loaded.timesteps == bank.timesteps
    for t in bank.timesteps:
        a, b = bank.get(t), loaded.get(t)
        np.testing.assert_array_equal(a.z_gud, b.z_gud)
        np.testing.assert_array_equal(a.z_ref, b.z_ref)
        assert sorted(b.kv_gud) == sorted(b.kv_ref) == [0, 1]
        np.testing.assert_array_equal(a.kv_ref[1][1].data, b.kv_ref[1][1].data)
    with pytest.raises(BankError):
        load_bank(tmp_path / "bank.bundle", build_schedule(infer_count=10))


def test_identity_edit_is_plain_reconstruction(schedule, denoiser, source, inversion):
    result = run_edit(Tensor(source), None, identity_spec(source.shape), COND, denoiser, schedule, SamplerConfig(),
                      inversion=inversion)
    np.testing.assert_array_equal(result.image.data, reconstruct(inversion[0], COND, denoiser, schedule).data)
    assert not any(s.guidance_applied for s in result.steps)


def test_ode_limit_without_guidance_is_reconstruction(schedule, denoiser, source, move_spec, inversion):
    cfg = SamplerConfig(n=0, eta1=0.0, eta2=0.0)
    result = run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, cfg, inversion=inversion)
    np.testing.assert_array_equal(result.image.data, reconstruct(inversion[0], COND, denoiser, schedule).data)


def test_unguided_edit_follows_the_regional_sde(schedule, denoiser, source, move_spec, inversion):
    cfg = SamplerConfig(n=0, eta1=0.5, eta2=0.1, tau_sde=(0, 20), rng_seed=11)
    result = run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, cfg, inversion=inversion)

    rng = np.random.default_rng(11)
    z = inversion[0]
    for i, (t, tp) in enumerate(schedule.step_pairs()):
        eps = denoiser.predict_eps(z, t, COND)
        z = regional_sde_step(schedule, z, eps, t, tp, move_spec.mask, 0.5, 0.1, i < 20, rng)
    np.testing.assert_array_equal(result.image.data, z.data)


def test_step_log_follows_the_gating_rules(schedule, denoiser, source, move_spec, inversion):
    cfg = SamplerConfig(n=30, guidance_stride=2, tau_sde=(0, 25), tau_tt=(0, 25), U=3, eta1=0.4, eta2=0.2)
    result = run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, cfg, inversion=inversion)
    assert len(result.steps) == schedule.infer_count
    for s in result.steps:
        guided = s.step < 30 and s.step % 2 == 0
        assert s.guidance_applied == guided
        assert s.time_travel_iters == (3 if guided and s.step < 25 else 1)
        assert (s.sigma_inside > s.sigma_outside > 0.0) == (s.step < 25)
        assert (s.e_edit is not None) == guided
    log = result.run_log("move", 0, cfg.model_dump(mode="json"))
    assert log.config["U"] == 3


def test_single_iteration_equals_time_travel_off(schedule, denoiser, source, move_spec, inversion):
    single = SamplerConfig(U=1, rng_seed=4)
    off = SamplerConfig(U=3, time_travel="off", rng_seed=4)
    a = run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, single, inversion=inversion).image
    b = run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, off, inversion=inversion).image
    np.testing.assert_array_equal(a.data, b.data)


def test_edits_are_seeded(schedule, denoiser, source, move_spec, inversion):
    def edit(**kw):
        cfg = SamplerConfig(n=10, tau_sde=(0, 10), tau_tt=(0, 4), **kw)
        return run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, cfg, inversion=inversion).image.data

    np.testing.assert_array_equal(edit(rng_seed=1), edit(rng_seed=1))
    assert not np.array_equal(edit(rng_seed=1), edit(rng_seed=2))
    assert not np.array_equal(edit(rng_seed=1, time_travel="random"), edit(rng_seed=1))
    assert not np.array_equal(edit(rng_seed=1, random_init=True), edit(rng_seed=1))
    assert not np.array_equal(edit(rng_seed=1, regional_guidance=False), edit(rng_seed=1))


def test_edit_argument_checks(schedule, denoiser, source, move_spec, inversion):
    with pytest.raises(DimensionError):
        run_edit(Tensor(np.zeros((8, 8))), None, move_spec, COND, denoiser, schedule, SamplerConfig(),
                 inversion=inversion)
    with pytest.raises(ConfigurationError):
        run_edit(Tensor(source), None, move_spec, COND, denoiser, schedule, SamplerConfig(n=51), inversion=inversion)
    paste = build_paste_spec(blob_mask(source), (2, 4))
    with pytest.raises(ConfigurationError):
        run_edit(Tensor(source), None, paste, COND, denoiser, schedule, SamplerConfig())


def test_component_failure_surfaces_as_sampling_error(schedule, denoiser, source, inversion):
    paste = build_paste_spec(blob_mask(source), (2, 4))
    with pytest.raises(SamplingError) as info:
        run_edit(Tensor(source), None, paste, COND, denoiser, schedule, SamplerConfig(), inversion=inversion)
    assert str(schedule.infer_steps[0]) in info.value.message


def test_visual_cross_attention_changes_attention_based_edits(rng):
    schedule = build_schedule(infer_count=6)
    model = TinyAttentionDenoiser.init(DenoiserConfig(image_size=8, patch_size=4, width=8, num_labels=2,
                                                      zero_init_output=False, seed=2))
    source = render_blob(8, (4, 3), 1.2)
    spec = build_move_spec(blob_mask(source), (0, 2))
    cond = ConditionBundle(text_tokens=model.label_tokens(0))
    inversion = invert(Tensor(source), cond, model, schedule)
    base = dict(n=4, guidance_stride=1, tau_sde=(0, 3), tau_tt=(0, 2), U=2, rng_seed=0)
    with_vca = run_edit(Tensor(source), None, spec, cond, model, schedule, SamplerConfig(**base), inversion=inversion)
    without = run_edit(Tensor(source), None, spec, cond, model, schedule,
                       SamplerConfig(visual_cross_attention=False, **base), inversion=inversion)
    assert with_vca.image.shape == (8, 8)
    assert not np.array_equal(with_vca.image.data, without.image.data)
