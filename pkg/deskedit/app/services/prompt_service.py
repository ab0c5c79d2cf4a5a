import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import numpy as np

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import PromptConfig, TrainConfig, TrainReport
from deskedit.app.services.attention_service import attention, fused_attention  # noqa: F401 (re-export)
from deskedit.app.services.denoiser_service import (
    ConditionBundle, TinyAttentionDenoiser, eps_loss, noisy_batch, patchify, sgd_step, tiny_denoiser_forward,
)
from deskedit.app.services.schedule_service import NoiseSchedule
from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError, NumericsError, TrainingError
from deskedit.app.utils.tensor import GradientTape, Tensor
from deskedit.app.utils.tensor_io import load_bundle, save_bundle

if TYPE_CHECKING:
    from deskedit.app.services.dataset_service import BlobDataset

logger = setup_logger("prompt_service")

ImageLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class ImageTokenizer:
    """Frozen patch embedder standing in for a pretrained image encoder.

    Produces one token per patch plus a leading mean-pooled global token.
    """
    image_size: int
    patch_size: int
    projection: Tensor
    positional: Optional[Tensor] = None

    @property
    def token_width(self) -> int:
        return self.projection.shape[1]

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @classmethod
    def build(cls, config: PromptConfig) -> "ImageTokenizer":
        if config.image_size % config.patch_size:
            raise ConfigurationError(f"image size {config.image_size} is not divisible by patch {config.patch_size}")
        rng = np.random.default_rng(config.seed + 7919)
        p2 = config.patch_size ** 2
        projection = Tensor(rng.standard_normal((p2, config.token_width)) / math.sqrt(p2))
        positional = None
        if config.positional:
            n = (config.image_size // config.patch_size) ** 2
            positional = Tensor(0.5 * _sinusoid_table(n, config.token_width))
        return cls(config.image_size, config.patch_size, projection, positional)

    def to_bundle(self) -> Dict[str, Tensor]:
        named = {"tok.projection": self.projection, "tok.geometry": Tensor([self.image_size, self.patch_size])}
        if self.positional is not None:
            named["tok.positional"] = self.positional
        return named

    @classmethod
    def from_bundle(cls, named: Dict[str, Tensor]) -> "ImageTokenizer":
        image_size, patch_size = (int(v) for v in named["tok.geometry"].data)
        return cls(image_size, patch_size, named["tok.projection"], named.get("tok.positional"))


def _sinusoid_table(count: int, width: int) -> np.ndarray:
    pos = np.arange(count, dtype=np.float64)[:, None]
    i = np.arange(width, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def tokenize_image(tok: ImageTokenizer, image: ImageLike) -> Tensor:
    """(H, W) -> (P + 1, w); a leading batch axis is kept."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    single = image.ndim == 2
    x = tensor.reshape(image, (1,) + image.shape) if single else image
    if x.shape[1] % tok.patch_size or x.shape[2] % tok.patch_size:
        raise ConfigurationError(f"image {image.shape} is not divisible into {tok.patch_size}x{tok.patch_size} patches")
    if x.shape[1] * x.shape[2] != tok.image_size ** 2:
        raise ConfigurationError(f"tokenizer expects {tok.image_size}x{tok.image_size} images, got {image.shape}")

    patches = tensor.matmul(patchify(x, tok.patch_size), tok.projection)
    if tok.positional is not None:
        patches = tensor.add(patches, tok.positional)
    tokens = tensor.concat([tensor.mean(patches, axis=1, keepdims=True), patches], axis=1)
    return tensor.reshape(tokens, tokens.shape[1:]) if single else tokens


@dataclass(frozen=True)
class QFormerEncoder:
    """Learnable queries cross-attending to image tokens; no self-attention."""
    config: PromptConfig
    params: Dict[str, Tensor]

    @classmethod
    def init(cls, config: PromptConfig) -> "QFormerEncoder":
        rng = np.random.default_rng(config.seed)
        d, w = config.width, config.token_width

        def dense(fan_in: int, fan_out: int) -> Tensor:
            return Tensor(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))

        params: Dict[str, Tensor] = {
            "proj.w": dense(w, d), "proj.b": Tensor(np.zeros(d)),
            "queries": Tensor(0.5 * rng.standard_normal((config.num_queries, d))),
        }
        for i in range(config.num_blocks):
            params[f"q{i}.ln.g"] = Tensor(np.ones(d))
            params[f"q{i}.ln.b"] = Tensor(np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                params[f"q{i}.attn.{name}"] = dense(d, d)
            params[f"q{i}.ln_ff.g"] = Tensor(np.ones(d))
            params[f"q{i}.ln_ff.b"] = Tensor(np.zeros(d))
            params[f"q{i}.ffn.w1"] = dense(d, 2 * d)
            params[f"q{i}.ffn.b1"] = Tensor(np.zeros(2 * d))
            params[f"q{i}.ffn.w2"] = dense(2 * d, d)
            params[f"q{i}.ffn.b2"] = Tensor(np.zeros(d))
        params["out.w"] = dense(d, d)
        params["out.b"] = Tensor(np.zeros(d))
        return cls(config, params)

    def with_params(self, params: Dict[str, Tensor]) -> "QFormerEncoder":
        return replace(self, params=params)


def _norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return tensor.add(tensor.mul(tensor.layer_norm(x), g), b)


def qformer_forward(enc: QFormerEncoder, image_tokens: Tensor) -> Tensor:
    """(L, w) -> (Q_n, d); a leading batch axis is kept."""
    p = enc.params
    if image_tokens.shape[-1] != p["proj.w"].shape[0]:
        raise DimensionError("image token width does not match the encoder", image_tokens.shape, p["proj.w"].shape)
    if image_tokens.shape[-2] < 1:
        raise DimensionError("at least one image token is required", image_tokens.shape)

    x = tensor.add(tensor.matmul(image_tokens, p["proj.w"]), p["proj.b"])
    q = p["queries"]
    if image_tokens.ndim == 3:
        q = tensor.expand(tensor.reshape(q, (1,) + q.shape), (image_tokens.shape[0],) + q.shape)

    for i in range(enc.config.num_blocks):
        a = _norm(q, p[f"q{i}.ln.g"], p[f"q{i}.ln.b"])
        att = attention(tensor.matmul(a, p[f"q{i}.attn.wq"]),
                        tensor.matmul(x, p[f"q{i}.attn.wk"]),
                        tensor.matmul(x, p[f"q{i}.attn.wv"]))
        q = tensor.add(q, tensor.matmul(att, p[f"q{i}.attn.wo"]))
        a = _norm(q, p[f"q{i}.ln_ff.g"], p[f"q{i}.ln_ff.b"])
        ff = tensor.gelu(tensor.add(tensor.matmul(a, p[f"q{i}.ffn.w1"]), p[f"q{i}.ffn.b1"]))
        q = tensor.add(q, tensor.add(tensor.matmul(ff, p[f"q{i}.ffn.w2"]), p[f"q{i}.ffn.b2"]))

    return tensor.add(tensor.matmul(q, p["out.w"]), p["out.b"])


@dataclass(frozen=True)
class PromptEncoder:
    """Tokenizer and QFormer applied together."""
    tokenizer: ImageTokenizer
    qformer: QFormerEncoder

    @classmethod
    def init(cls, config: PromptConfig) -> "PromptEncoder":
        return cls(ImageTokenizer.build(config), QFormerEncoder.init(config))

    def encode(self, image: ImageLike) -> Tensor:
        return qformer_forward(self.qformer, tokenize_image(self.tokenizer, image))

    def null_tokens(self) -> Tensor:
        size = self.tokenizer.image_size
        return self.encode(np.zeros((size, size)))

    def to_bundle(self) -> Dict[str, Tensor]:
        c = self.qformer.config
        named = dict(self.qformer.params)
        named["qformer.config"] = Tensor([c.num_queries, c.num_blocks, c.width, c.token_width])
        named.update(self.tokenizer.to_bundle())
        return named

    @classmethod
    def from_bundle(cls, named: Dict[str, Tensor]) -> "PromptEncoder":
        tok = ImageTokenizer.from_bundle(named)
        num_queries, num_blocks, width, token_width = (int(v) for v in named["qformer.config"].data)
        config = PromptConfig(image_size=tok.image_size, patch_size=tok.patch_size, token_width=token_width,
                              width=width, num_queries=num_queries, num_blocks=num_blocks,
                              positional=tok.positional is not None)
        params = {k: v for k, v in named.items() if not k.startswith(("tok.", "qformer."))}
        return cls(tok, QFormerEncoder(config, params))


def build_condition(denoiser, label: Optional[int] = None, cfg_scale: float = 1.0, gamma: float = 0.0,
                    prompt: Optional[PromptEncoder] = None, image: Optional[ImageLike] = None,
                    reference: Optional[ImageLike] = None) -> ConditionBundle:
    """Conditioning for an edit run.

    Text tokens come from the label; image tokens from the prompt encoder,
    with the reference image's tokens appended after the source's. The
    unconditional branch uses the null label and the zero-image prompt.
    """
    if not isinstance(denoiser, TinyAttentionDenoiser):
        return ConditionBundle(cfg_scale=cfg_scale)
    text = denoiser.label_tokens(label) if label is not None else denoiser.null_tokens()
    image_tokens = uncond_image = None
    if prompt is not None and image is not None:
        parts = [prompt.encode(image)] + ([prompt.encode(reference)] if reference is not None else [])
        image_tokens = tensor.concat(parts, axis=0)
        null = prompt.null_tokens()
        uncond_image = tensor.concat([null] * len(parts), axis=0)
    return ConditionBundle(text_tokens=text, image_tokens=image_tokens, cfg_scale=cfg_scale,
                           gamma=gamma if image_tokens is not None else 0.0,
                           uncond_text_tokens=denoiser.null_tokens(), uncond_image_tokens=uncond_image)


def train_prompt_encoder(prompt: PromptEncoder, denoiser: TinyAttentionDenoiser, dataset: "BlobDataset",
                         schedule: NoiseSchedule, cfg: TrainConfig) -> Tuple[PromptEncoder, TrainReport]:
    """SGD on the prompt-conditioned noise objective with the denoiser frozen.

    With probability ``cfg.drop_prob`` a sample's prompt image is replaced by
    the zero image. Only the QFormer (including its input projection) is
    updated; the tokenizer stays fixed.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    enc = prompt.qformer
    names = sorted(enc.params)
    losses: List[float] = []
    dropped = 0
    logger.info(f"Training prompt encoder for {cfg.steps} steps (drop_prob={cfg.drop_prob}, gamma={cfg.gamma})")

    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x0 = dataset.images[idx]
        drop = rng.random(cfg.batch_size) < cfg.drop_prob
        dropped += int(drop.sum())
        prompt_images = np.where(drop[:, None, None], 0.0, x0)
        tokens = tokenize_image(prompt.tokenizer, prompt_images)
        ts, eps, z = noisy_batch(schedule, x0, rng)

        params = enc.params
        try:
            with GradientTape() as tape:
                tape.watch(*params.values())
                c_im = qformer_forward(enc, tokens)
                cond = ConditionBundle(text_tokens=denoiser.label_tokens(dataset.labels[idx]), image_tokens=c_im,
                                       gamma=cfg.gamma)
                loss = eps_loss(tiny_denoiser_forward(denoiser, Tensor(z), ts, cond), Tensor(eps))
            grads = dict(zip(names, tape.gradients(loss, [params[n] for n in names])))
            enc = enc.with_params(sgd_step(params, grads, cfg.learning_rate, cfg.grad_clip))
        except NumericsError as e:
            logger.exception(f"Prompt training diverged at step {step}: {e.message}")
            raise TrainingError(e.message, step=step)
        value = loss.item()
        losses.append(value / x0[0].size)
        if (step + 1) % cfg.log_every == 0:
            logger.info(f"step {step + 1}/{cfg.steps}: per-pixel loss {np.mean(losses[-cfg.log_every:]):.4f}")

    report = TrainReport(steps=cfg.steps, losses=losses, dropped_prompts=dropped,
                         initial_loss=losses[0] if losses else None, final_loss=losses[-1] if losses else None)
    return PromptEncoder(prompt.tokenizer, enc), report


def save_prompt_encoder(path, prompt: PromptEncoder) -> None:
    save_bundle(path, prompt.to_bundle())


def load_prompt_encoder(path) -> PromptEncoder:
    return PromptEncoder.from_bundle(load_bundle(path))
