import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import DenoiserConfig, TrainConfig, TrainReport
from deskedit.app.services.attention_service import attention, fused_attention
from deskedit.app.services.schedule_service import NoiseSchedule
from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError, NumericsError, TrainingError
from deskedit.app.utils.tensor import GradientTape, Tensor
from deskedit.app.utils.tensor_io import load_bundle, save_bundle

if TYPE_CHECKING:
    from deskedit.app.services.dataset_service import BlobDataset

logger = setup_logger("denoiser_service")

Timestep = Union[int, Sequence[int], np.ndarray]
KV = Tuple[Tensor, Tensor]


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning for one noise prediction.

    ``text_tokens`` are class-label embeddings, ``image_tokens`` the prompt
    encoder output. The ``uncond_*`` tokens feed the unconditional branch of
    classifier-free guidance.
    """
    text_tokens: Optional[Tensor] = None
    image_tokens: Optional[Tensor] = None
    cfg_scale: float = 1.0
    gamma: float = 0.0
    uncond_text_tokens: Optional[Tensor] = None
    uncond_image_tokens: Optional[Tensor] = None

    @property
    def has_unconditional(self) -> bool:
        return self.uncond_text_tokens is not None or self.uncond_image_tokens is not None

    def unconditional(self) -> "ConditionBundle":
        text = self.uncond_text_tokens if self.uncond_text_tokens is not None else self.text_tokens
        image = self.uncond_image_tokens if self.uncond_image_tokens is not None else self.image_tokens
        return ConditionBundle(text_tokens=text, image_tokens=image, cfg_scale=1.0, gamma=self.gamma)


@dataclass
class AttentionHooks:
    """Self-attention taps.

    With ``capture`` set, every layer stores its own (K, V) in ``captured``.
    ``inject`` maps a layer index to extra (K, V) pairs concatenated after the
    layer's own keys and values.
    """
    capture: bool = False
    inject: Dict[int, List[KV]] = field(default_factory=dict)
    captured: Dict[int, KV] = field(default_factory=dict)

    def passive(self) -> "AttentionHooks":
        """Same injection, no capture."""
        return AttentionHooks(capture=False, inject=self.inject)


class Denoiser(ABC):
    """Noise predictor eps_theta(z_t, t, cond)."""

    attention_based: bool = False
    conditional: bool = False

    @abstractmethod
    def predict_eps(self, z_t: Tensor, t: Timestep, cond: ConditionBundle,
                    hooks: Optional[AttentionHooks] = None) -> Tensor:
        ...


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, scale: float) -> Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionError("cfg_combine predictions differ in shape", eps_uncond.shape, eps_cond.shape)
    return tensor.add(eps_uncond, tensor.scale(tensor.sub(eps_cond, eps_uncond), scale))


def predict_eps(denoiser: Denoiser, z_t: Tensor, t: Timestep, cond: ConditionBundle,
                hooks: Optional[AttentionHooks] = None) -> Tensor:
    """Conditional prediction, extrapolated with CFG when the bundle carries an unconditional branch."""
    eps_cond = denoiser.predict_eps(z_t, t, cond, hooks)
    if not denoiser.conditional or not cond.has_unconditional or cond.cfg_scale == 1.0:
        return eps_cond
    eps_uncond = denoiser.predict_eps(z_t, t, cond.unconditional(), hooks.passive() if hooks else None)
    return cfg_combine(eps_uncond, eps_cond, cond.cfg_scale)


# --- closed-form Gaussian mixture oracle ---

@dataclass(frozen=True)
class GmmPrior:
    """Isotropic Gaussian mixture over images: sum_k w_k N(mu_k, s^2 I)."""
    weights: np.ndarray
    means: np.ndarray
    std: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] != self.means.shape[0]:
            raise DimensionError("one weight per component is required", w.shape, self.means.shape)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must be nonnegative and sum to 1")
        if not self.std > 0:
            raise ConfigurationError(f"mixture std must be positive, got {self.std}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.means.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(len(self.weights), size=count, p=self.weights)
        return self.means[ks] + self.std * rng.standard_normal((count,) + self.shape)

    def to_bundle(self) -> Dict[str, Tensor]:
        return {"weights": Tensor(self.weights), "means": Tensor(self.means), "std": Tensor(self.std)}

    @classmethod
    def from_bundle(cls, named: Dict[str, Tensor]) -> "GmmPrior":
        return cls(named["weights"].numpy(), named["means"].numpy(), named["std"].item())


def _flatten_batch(prior: GmmPrior, z: np.ndarray) -> Tuple[np.ndarray, bool]:
    if z.shape == prior.shape:
        return z.reshape(1, -1), False
    if z.shape[1:] == prior.shape:
        return z.reshape(z.shape[0], -1), True
    raise DimensionError("latent does not match the prior's image shape", z.shape, prior.shape)


def _diffused(prior: GmmPrior, schedule: NoiseSchedule, x: np.ndarray, t: int):
    a = schedule.ab(t)
    var = a * prior.std ** 2 + 1.0 - a
    assert var > 0, "diffused variance must be positive"
    mu = prior.means.reshape(len(prior.weights), -1) * math.sqrt(a)
    d2 = (x * x).sum(axis=1, keepdims=True) - 2.0 * x @ mu.T + (mu * mu).sum(axis=1)[None, :]
    d2 = np.maximum(d2, 0.0)
    with np.errstate(divide="ignore"):
        logits = np.log(prior.weights)[None, :] - d2 / (2.0 * var)
    return a, var, mu, logits


def gmm_log_density(prior: GmmPrior, schedule: NoiseSchedule, z_t: Tensor, t: int) -> np.ndarray:
    """log q_t(z_t) of the diffused mixture; one value per batch row."""
    x, _ = _flatten_batch(prior, z_t.data)
    _, var, _, logits = _diffused(prior, schedule, x, t)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return lse - 0.5 * x.shape[1] * math.log(2.0 * math.pi * var)


def analytic_gmm_eps(prior: GmmPrior, schedule: NoiseSchedule, z_t: Tensor, t: int) -> Tensor:
    """eps = -sqrt(1 - ab_t) * grad log q_t(z_t), responsibilities via log-sum-exp."""
    x, batched = _flatten_batch(prior, z_t.data)
    a, var, mu, logits = _diffused(prior, schedule, x, t)
    r = np.exp(logits - logits.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    score = (r @ mu - x) / var
    eps = -math.sqrt(1.0 - a) * score
    return Tensor(eps.reshape(z_t.shape) if batched else eps.reshape(prior.shape))


class AnalyticGmmDenoiser(Denoiser):
    """Exact noise prediction for data drawn from a GmmPrior; ignores conditioning."""

    def __init__(self, prior: GmmPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule

    def predict_eps(self, z_t: Tensor, t: Timestep, cond: ConditionBundle,
                    hooks: Optional[AttentionHooks] = None) -> Tensor:
        if not np.isscalar(t):
            ts = np.asarray(t)
            if np.any(ts != ts.flat[0]):
                raise ConfigurationError("analytic denoiser needs one timestep per call")
            t = int(ts.flat[0])
        return analytic_gmm_eps(self.prior, self.schedule, z_t, int(t))


# --- tiny patch transformer ---

def timestep_embedding(t: Timestep, width: int) -> np.ndarray:
    """Sinusoidal embedding, [sin | cos] halves; shape (batch, width)."""
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _block_names(layer: int) -> List[Tuple[str, Tuple[str, ...]]]:
    p = f"block{layer}"
    return [
        (f"{p}.ln1.g", ("d",)), (f"{p}.ln1.b", ("d",)),
        (f"{p}.attn.wq", ("d", "d")), (f"{p}.attn.wk", ("d", "d")),
        (f"{p}.attn.wv", ("d", "d")), (f"{p}.attn.wo", ("d", "d")),
        (f"{p}.ln2.g", ("d",)), (f"{p}.ln2.b", ("d",)),
        (f"{p}.xattn.wq", ("d", "d")), (f"{p}.xattn.wk", ("d", "d")),
        (f"{p}.xattn.wv", ("d", "d")), (f"{p}.xattn.wo", ("d", "d")),
        (f"{p}.ln3.g", ("d",)), (f"{p}.ln3.b", ("d",)),
        (f"{p}.ffn.w1", ("d", "2d")), (f"{p}.ffn.b1", ("2d",)),
        (f"{p}.ffn.w2", ("2d", "d")), (f"{p}.ffn.b2", ("d",)),
    ]


@dataclass(frozen=True)
class TinyAttentionDenoiser(Denoiser):
    """Two-block patch transformer with self-attention taps and fused cross-attention."""
    config: DenoiserConfig
    params: Dict[str, Tensor]

    attention_based = True
    conditional = True
    num_layers = 2

    @property
    def num_tokens(self) -> int:
        return (self.config.image_size // self.config.patch_size) ** 2

    @property
    def null_label(self) -> int:
        return self.config.num_labels

    @classmethod
    def init(cls, config: DenoiserConfig) -> "TinyAttentionDenoiser":
        rng = np.random.default_rng(config.seed)
        d, p2, n = config.width, config.patch_size ** 2, (config.image_size // config.patch_size) ** 2
        sizes = {"d": d, "2d": 2 * d}

        def dense(fan_in: int, fan_out: int) -> Tensor:
            return Tensor(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))

        params: Dict[str, Tensor] = {
            "patch_in.w": dense(p2, d), "patch_in.b": Tensor(np.zeros(d)),
            "pos": Tensor(0.02 * rng.standard_normal((n, d))),
            "time.w1": dense(d, d), "time.b1": Tensor(np.zeros(d)),
            "time.w2": dense(d, d), "time.b2": Tensor(np.zeros(d)),
            "label_emb": Tensor(rng.standard_normal((config.num_labels + 1, d))),
        }
        for layer in range(cls.num_layers):
            for name, dims in _block_names(layer):
                shape = tuple(sizes[x] for x in dims)
                if name.endswith(".g"):
                    params[name] = Tensor(np.ones(shape))
                elif len(shape) == 1:
                    params[name] = Tensor(np.zeros(shape))
                else:
                    params[name] = dense(*shape)
        params["out.ln.g"] = Tensor(np.ones(d))
        params["out.ln.b"] = Tensor(np.zeros(d))
        params["out.w"] = Tensor(np.zeros((d, p2))) if config.zero_init_output else dense(d, p2)
        params["out.b"] = Tensor(np.zeros(p2))
        logger.info(f"Initialized tiny denoiser: width {d}, {n} tokens, {sum(v.size for v in params.values())} parameters")
        return cls(config, params)

    def with_params(self, params: Dict[str, Tensor]) -> "TinyAttentionDenoiser":
        return replace(self, params=params)

    def label_tokens(self, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
        """(1, d) for one label, (B, 1, d) for a batch of labels."""
        emb = self.params["label_emb"]
        if np.isscalar(labels):
            return tensor.take(emb, [int(labels)])
        idx = np.asarray(labels, dtype=np.int64)
        return tensor.reshape(tensor.take(emb, idx), (len(idx), 1, self.config.width))

    def null_tokens(self) -> Tensor:
        return self.label_tokens(self.null_label)

    def predict_eps(self, z_t: Tensor, t: Timestep, cond: ConditionBundle,
                    hooks: Optional[AttentionHooks] = None) -> Tensor:
        return tiny_denoiser_forward(self, z_t, t, cond, hooks)

    def to_bundle(self) -> Dict[str, Tensor]:
        named = dict(self.params)
        c = self.config
        named["config"] = Tensor([c.image_size, c.patch_size, c.width, c.num_labels])
        return named

    @classmethod
    def from_bundle(cls, named: Dict[str, Tensor]) -> "TinyAttentionDenoiser":
        image_size, patch_size, width, num_labels = (int(v) for v in named["config"].data)
        config = DenoiserConfig(image_size=image_size, patch_size=patch_size, width=width, num_labels=num_labels)
        params = {k: v for k, v in named.items() if k != "config"}
        return cls(config, params)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, H, W) -> (B, H/p * W/p, p*p), patches in row-major grid order."""
    b, h, w = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"image is not divisible into {patch}x{patch} patches", x.shape)
    gh, gw = h // patch, w // patch
    x = tensor.reshape(x, (b, gh, patch, gw, patch))
    x = tensor.transpose(x, (0, 1, 3, 2, 4))
    return tensor.reshape(x, (b, gh * gw, patch * patch))


def unpatchify(x: Tensor, patch: int, h: int, w: int) -> Tensor:
    b = x.shape[0]
    gh, gw = h // patch, w // patch
    x = tensor.reshape(x, (b, gh, gw, patch, patch))
    x = tensor.transpose(x, (0, 1, 3, 2, 4))
    return tensor.reshape(x, (b, h, w))


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return tensor.add(tensor.mul(tensor.layer_norm(x), g), b)


def _batch_kv(k: Tensor, batch: int) -> Tensor:
    if k.ndim == 2:
        k = tensor.reshape(k, (1,) + k.shape)
    if k.shape[0] != batch:
        k = tensor.expand(k, (batch,) + k.shape[1:])
    return k


def tiny_denoiser_forward(model: TinyAttentionDenoiser, z_t: Tensor, t: Timestep, cond: ConditionBundle,
                          hooks: Optional[AttentionHooks] = None) -> Tensor:
    p = model.params
    cfg = model.config
    d = cfg.width
    single = z_t.ndim == 2
    x = tensor.reshape(z_t, (1,) + z_t.shape) if single else z_t
    batch, h, w = x.shape

    text = cond.text_tokens if cond.text_tokens is not None else model.null_tokens()
    if text.shape[-1] != d:
        raise DimensionError("text token width does not match the denoiser", text.shape, (d,))
    image = cond.image_tokens
    if image is not None and image.shape[-1] != d:
        raise DimensionError("image token width does not match the denoiser", image.shape, (d,))

    tokens = patchify(x, cfg.patch_size)
    if tokens.shape[1] != model.num_tokens:
        raise DimensionError("latent size does not match the denoiser", z_t.shape, (cfg.image_size, cfg.image_size))
    hid = tensor.add(tensor.add(tensor.matmul(tokens, p["patch_in.w"]), p["patch_in.b"]), p["pos"])

    ts = np.broadcast_to(np.atleast_1d(np.asarray(t)), (batch,))
    temb = Tensor(timestep_embedding(ts, d))
    temb = tensor.gelu(tensor.add(tensor.matmul(temb, p["time.w1"]), p["time.b1"]))
    temb = tensor.add(tensor.matmul(temb, p["time.w2"]), p["time.b2"])
    temb = tensor.expand(tensor.reshape(temb, (batch, 1, d)), (batch, hid.shape[1], d))
    hid = tensor.add(hid, temb)

    for layer in range(model.num_layers):
        pre = f"block{layer}"
        a = _affine_norm(hid, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = tensor.matmul(a, p[f"{pre}.attn.wq"])
        k = tensor.matmul(a, p[f"{pre}.attn.wk"])
        v = tensor.matmul(a, p[f"{pre}.attn.wv"])
        if hooks is not None and hooks.capture:
            hooks.captured[layer] = (k, v)
        extra = hooks.inject.get(layer, []) if hooks is not None else []
        if extra:
            k = tensor.concat([k] + [_batch_kv(ek, batch) for ek, _ in extra], axis=1)
            v = tensor.concat([v] + [_batch_kv(ev, batch) for _, ev in extra], axis=1)
        hid = tensor.add(hid, tensor.matmul(attention(q, k, v), p[f"{pre}.attn.wo"]))

        a = _affine_norm(hid, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        wk, wv = p[f"{pre}.xattn.wk"], p[f"{pre}.xattn.wv"]
        q = tensor.matmul(a, p[f"{pre}.xattn.wq"])
        k_img = v_img = None
        if image is not None:
            k_img, v_img = tensor.matmul(image, wk), tensor.matmul(image, wv)
        gamma = cond.gamma if image is not None else 0.0
        cross = fused_attention(q, tensor.matmul(text, wk), tensor.matmul(text, wv), k_img, v_img, gamma)
        hid = tensor.add(hid, tensor.matmul(cross, p[f"{pre}.xattn.wo"]))

        a = _affine_norm(hid, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        ff = tensor.gelu(tensor.add(tensor.matmul(a, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"]))
        hid = tensor.add(hid, tensor.add(tensor.matmul(ff, p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"]))

    out = _affine_norm(hid, p["out.ln.g"], p["out.ln.b"])
    out = tensor.add(tensor.matmul(out, p["out.w"]), p["out.b"])
    out = unpatchify(out, cfg.patch_size, h, w)
    return tensor.reshape(out, (h, w)) if single else out


# --- training ---

ImageTokensFn = Callable[[np.ndarray], Optional[Tensor]]


def eps_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-sample squared error summed over pixels, averaged over the batch."""
    diff = tensor.sub(pred, target)
    return tensor.scale(tensor.sum(tensor.mul(diff, diff)), 1.0 / pred.shape[0])


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], lr: float,
             clip: Optional[float] = None) -> Dict[str, Tensor]:
    """theta <- theta - lr * grad; with ``clip`` the gradient is first rescaled to global norm <= clip."""
    factor = 1.0
    if clip is not None:
        norm = math.sqrt(sum(float((g.data * g.data).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericsError("gradient norm overflowed")
        factor = min(1.0, clip / norm) if norm > 0 else 1.0
    updated = dict(params)
    for name, g in grads.items():
        updated[name] = Tensor(params[name].data - lr * factor * g.data)
    return updated


def noisy_batch(schedule: NoiseSchedule, x0: np.ndarray, rng: np.random.Generator):
    ts = rng.integers(1, schedule.t_train + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    a = schedule.alpha_bar[ts].reshape((-1,) + (1,) * (x0.ndim - 1))
    return ts, eps, np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def train_denoiser(model: TinyAttentionDenoiser, dataset: "BlobDataset", schedule: NoiseSchedule,
                   cfg: TrainConfig) -> Tuple[TinyAttentionDenoiser, TrainReport]:
    """Plain SGD on the noise-prediction objective with uniform t and Gaussian noise.

    Labels are replaced by the null label with ``cfg.label_drop_prob`` so the
    trained model also serves the unconditional CFG branch.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    names = sorted(model.params)
    losses: List[float] = []
    logger.info(f"Training denoiser for {cfg.steps} steps on {len(dataset)} images (lr={cfg.learning_rate})")

    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x0 = dataset.images[idx]
        labels = np.where(rng.random(cfg.batch_size) < cfg.label_drop_prob, model.null_label, dataset.labels[idx])
        ts, eps, z = noisy_batch(schedule, x0, rng)

        params = model.params
        try:
            with GradientTape() as tape:
                tape.watch(*params.values())
                cond = ConditionBundle(text_tokens=model.label_tokens(labels))
                loss = eps_loss(tiny_denoiser_forward(model, Tensor(z), ts, cond), Tensor(eps))
            grads = dict(zip(names, tape.gradients(loss, [params[n] for n in names])))
            model = model.with_params(sgd_step(params, grads, cfg.learning_rate, cfg.grad_clip))
        except NumericsError as e:
            logger.exception(f"Denoiser training diverged at step {step}: {e.message}")
            raise TrainingError(e.message, step=step)
        value = loss.item()
        losses.append(value / x0[0].size)
        if (step + 1) % cfg.log_every == 0:
            logger.info(f"step {step + 1}/{cfg.steps}: per-pixel loss {np.mean(losses[-cfg.log_every:]):.4f}")

    report = TrainReport(steps=cfg.steps, losses=losses,
                         initial_loss=losses[0] if losses else None, final_loss=losses[-1] if losses else None)
    return model, report


def heldout_loss(denoiser: Denoiser, dataset: "BlobDataset", schedule: NoiseSchedule, seed: int = 1234,
                 batch_size: int = 64, image_tokens_fn: Optional[ImageTokensFn] = None, gamma: float = 0.0,
                 labels: bool = True) -> float:
    """Per-pixel noise-prediction MSE over ``dataset`` with seeded (t, eps) draws.

    The same seed gives the same draws, so two models (or the same model with
    and without an image prompt) are compared on identical inputs.
    """
    if len(dataset) == 0:
        raise ConfigurationError("held-out set is empty")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        x0 = dataset.images[start:start + batch_size]
        ts, eps, z = noisy_batch(schedule, x0, rng)
        text = None
        if isinstance(denoiser, TinyAttentionDenoiser):
            lab = dataset.labels[start:start + batch_size] if labels else np.full(len(x0), denoiser.null_label)
            text = denoiser.label_tokens(lab)
        image = image_tokens_fn(x0) if image_tokens_fn is not None else None
        cond = ConditionBundle(text_tokens=text, image_tokens=image, gamma=gamma if image is not None else 0.0)
        if isinstance(denoiser, TinyAttentionDenoiser):
            pred = denoiser.predict_eps(Tensor(z), ts, cond).data
        else:
            # one timestep per analytic call
            pred = np.stack([denoiser.predict_eps(Tensor(z[i]), int(ts[i]), cond).data for i in range(len(x0))])
        total += float(((pred - eps) ** 2).sum())
        count += eps.size
    return total / count


def save_denoiser(path, model: TinyAttentionDenoiser) -> None:
    save_bundle(path, model.to_bundle())


def load_denoiser(path) -> TinyAttentionDenoiser:
    return TinyAttentionDenoiser.from_bundle(load_bundle(path))


def save_prior(path, prior: GmmPrior) -> None:
    save_bundle(path, prior.to_bundle())


def load_prior(path) -> GmmPrior:
    return GmmPrior.from_bundle(load_bundle(path))
