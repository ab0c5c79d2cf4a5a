import numpy as np
import pytest

from deskedit.app.models.schemas import DenoiserConfig, PromptConfig, TrainConfig
from deskedit.app.services.dataset_service import generate_blobs, render_blob
from deskedit.app.services.denoiser_service import AnalyticGmmDenoiser, GmmPrior, TinyAttentionDenoiser
from deskedit.app.services.prompt_service import (
    PromptEncoder, build_condition, load_prompt_encoder, qformer_forward, save_prompt_encoder, tokenize_image,
    train_prompt_encoder,
)
from deskedit.app.services.schedule_service import build_schedule
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError, TrainingError
from deskedit.app.utils.tensor import Tensor

PROMPT = PromptConfig(image_size=8, patch_size=4, token_width=6, width=8, num_queries=3, num_blocks=2, seed=2)
DENOISER = DenoiserConfig(image_size=8, patch_size=4, width=8, num_labels=4, zero_init_output=False, seed=1)


@pytest.fixture(scope="module")
def prompt():
    return PromptEncoder.init(PROMPT)


@pytest.fixture(scope="module")
def denoiser():
    return TinyAttentionDenoiser.init(DENOISER)


def test_tokenizer_prepends_pooled_token(prompt):
    tokens = tokenize_image(prompt.tokenizer, render_blob(8, (4, 4), 1.5)).data
    assert tokens.shape == (prompt.tokenizer.num_tokens, PROMPT.token_width)
    assert prompt.tokenizer.num_tokens == 5
    np.testing.assert_allclose(tokens[0], tokens[1:].mean(axis=0), rtol=1e-12)


def test_tokenizer_rejects_other_image_sizes(prompt):
    with pytest.raises(ConfigurationError):
        tokenize_image(prompt.tokenizer, np.zeros((12, 12)))
    with pytest.raises(ConfigurationError):
        tokenize_image(prompt.tokenizer, np.zeros((8, 6)))


def test_pooled_token_ignores_placement_without_positional_codes():
    plain = PromptEncoder.init(PROMPT.model_copy(update={"positional": False}))
    left, right = np.full((8, 8), -1.0), np.full((8, 8), -1.0)
    left[:, :4], right[:, 4:] = 1.0, 1.0
    a, b = tokenize_image(plain.tokenizer, left).data, tokenize_image(plain.tokenizer, right).data
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)


def test_qformer_output_shape_and_batching(prompt, rng):
    images = rng.uniform(-1, 1, size=(2, 8, 8))
    batched = prompt.encode(images).data
    assert batched.shape == (2, PROMPT.num_queries, PROMPT.width)
    for i in range(2):
        np.testing.assert_allclose(batched[i], prompt.encode(images[i]).data, rtol=1e-10, atol=1e-12)


def test_qformer_rejects_wrong_token_width(prompt):
    with pytest.raises(DimensionError):
        qformer_forward(prompt.qformer, Tensor(np.zeros((5, PROMPT.token_width + 1))))


def test_null_tokens_encode_the_zero_image(prompt):
    np.testing.assert_array_equal(prompt.null_tokens().data, prompt.encode(np.zeros((8, 8))).data)


def test_condition_for_analytic_denoiser_is_empty():
    schedule = build_schedule()
    denoiser = AnalyticGmmDenoiser(GmmPrior(np.ones(1), np.zeros((1, 8, 8)), 0.5), schedule)
    cond = build_condition(denoiser, 1, cfg_scale=4.0, gamma=0.5)
    assert cond.text_tokens is None and cond.image_tokens is None
    assert cond.cfg_scale == 4.0
    assert not cond.has_unconditional


def test_condition_concatenates_source_and_reference_prompts(denoiser, prompt):
    source, reference = render_blob(8, (3, 3), 1.5), render_blob(8, (5, 5), 1.5, label=1)
    cond = build_condition(denoiser, 2, cfg_scale=5.0, gamma=0.5, prompt=prompt, image=source, reference=reference)
    assert cond.image_tokens.shape == (2 * PROMPT.num_queries, PROMPT.width)
    np.testing.assert_array_equal(cond.image_tokens.data[:PROMPT.num_queries], prompt.encode(source).data)
    np.testing.assert_array_equal(cond.image_tokens.data[PROMPT.num_queries:], prompt.encode(reference).data)
    null = prompt.null_tokens().data
    np.testing.assert_array_equal(cond.uncond_image_tokens.data, np.concatenate([null, null]))
    np.testing.assert_array_equal(cond.uncond_text_tokens.data, denoiser.null_tokens().data)
    assert cond.gamma == 0.5


def test_condition_without_prompt_drops_gamma(denoiser):
    cond = build_condition(denoiser, 0, gamma=0.7)
    assert cond.image_tokens is None
    assert cond.gamma == 0.0


def test_prompt_training_only_updates_the_qformer(denoiser, prompt):
    data = generate_blobs(8, image_size=8, seed=3, scale_range=(1.0, 1.5))
    cfg = TrainConfig(steps=2, batch_size=4, learning_rate=1e-2, drop_prob=1.0, seed=1)
    trained, report = train_prompt_encoder(prompt, denoiser, data, build_schedule(), cfg)
    assert report.dropped_prompts == 8
    assert trained.tokenizer is prompt.tokenizer
    assert not np.array_equal(trained.qformer.params["queries"].data, prompt.qformer.params["queries"].data)


def test_prompt_bundle_reload_encodes_identically(prompt, tmp_path):
    save_prompt_encoder(tmp_path / "prompt.bundle", prompt)
    loaded = load_prompt_encoder(tmp_path / "prompt.bundle")
    image = render_blob(8, (4, 3), 1.2)
    np.testing.assert_array_equal(loaded.encode(image).data, prompt.encode(image).data)


def test_zero_prompt_steps_leave_the_encoder_untouched(denoiser, prompt):
    data = generate_blobs(4, image_size=8, seed=3, scale_range=(1.0, 1.5))
    trained, report = train_prompt_encoder(prompt, denoiser, data, build_schedule(), TrainConfig(steps=0))
    assert report.losses == [] and report.dropped_prompts == 0
    for name, value in prompt.qformer.params.items():
        np.testing.assert_array_equal(trained.qformer.params[name].data, value.data)


def test_divergent_prompt_training_names_the_step(denoiser, prompt):
    data = generate_blobs(8, image_size=8, seed=3, scale_range=(1.0, 1.5))
    cfg = TrainConfig(steps=5, batch_size=4, learning_rate=1e200, drop_prob=0.0, seed=1)
    with pytest.raises(TrainingError, match="training failed at step [0-4]"):
        train_prompt_encoder(prompt, denoiser, data, build_schedule(), cfg)
