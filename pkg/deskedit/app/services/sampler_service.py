import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import RunLog, SamplerConfig, StepLog
from deskedit.app.services.denoiser_service import KV, AttentionHooks, ConditionBundle, Denoiser, predict_eps
from deskedit.app.services.guidance_service import EditSpec, guided_eps, regional_gradient
from deskedit.app.services.schedule_service import NoiseSchedule, sigma
from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import (
    BankError, ConfigurationError, DeskEditException, DimensionError, SamplingError,
)
from deskedit.app.utils.tensor import Tensor
from deskedit.app.utils.tensor_io import load_bundle, save_bundle

logger = setup_logger("sampler_service")


# --- memory bank ---

@dataclass
class BankRecord:
    timestep: int
    z_gud: np.ndarray
    z_ref: Optional[np.ndarray] = None
    kv_gud: Dict[int, KV] = field(default_factory=dict)
    kv_ref: Dict[int, KV] = field(default_factory=dict)


class MemoryBank:
    """Inversion latents and self-attention K/V per inference timestep.

    Filled once by ``invert`` and read-only afterwards, so one bank can back
    several concurrent edit runs.
    """

    def __init__(self, latent_shape: Tuple[int, ...]):
        self.latent_shape = tuple(latent_shape)
        self._records: Dict[int, BankRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, t: int) -> bool:
        return t in self._records

    @property
    def timesteps(self) -> List[int]:
        return sorted(self._records, reverse=True)

    def put(self, record: BankRecord) -> None:
        if record.z_gud.shape != self.latent_shape:
            raise DimensionError("bank latent has the wrong shape", record.z_gud.shape, self.latent_shape)
        self._records[record.timestep] = record

    def get(self, t: int) -> BankRecord:
        record = self._records.get(t)
        if record is None:
            raise BankError("not recorded during inversion", timestep=t)
        return record

    def attach_reference(self, other: "MemoryBank") -> None:
        """Copy another inversion's guidance entries in as this bank's reference entries."""
        for t in self.timesteps:
            ref = other.get(t)
            record = self._records[t]
            record.z_ref = ref.z_gud
            record.kv_ref = dict(ref.kv_gud)

    def check_complete(self, schedule: NoiseSchedule) -> None:
        missing = [t for t in schedule.infer_steps if t not in self._records]
        if missing:
            raise BankError(f"{len(missing)} inference timesteps missing", timestep=missing[0])

    def injection(self, t: int) -> Dict[int, List[KV]]:
        """Per-layer [guidance K/V, reference K/V] for visual cross-attention."""
        record = self.get(t)
        inject: Dict[int, List[KV]] = {}
        for layer, kv in record.kv_gud.items():
            inject[layer] = [kv] + ([record.kv_ref[layer]] if layer in record.kv_ref else [])
        return inject

    def to_bundle(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for t in self.timesteps:
            r = self._records[t]
            named[f"t{t:04d}/z_gud"] = Tensor(r.z_gud)
            if r.z_ref is not None:
                named[f"t{t:04d}/z_ref"] = Tensor(r.z_ref)
            for tag, kvs in (("gud", r.kv_gud), ("ref", r.kv_ref)):
                for layer, (k, v) in sorted(kvs.items()):
                    named[f"t{t:04d}/L{layer}/K_{tag}"] = k
                    named[f"t{t:04d}/L{layer}/V_{tag}"] = v
        return named

    @classmethod
    def from_bundle(cls, named: Dict[str, Tensor]) -> "MemoryBank":
        pattern = re.compile(r"^t(\d{4})/(?:(z)_(gud|ref)|L(\d+)/([KV])_(gud|ref))$")
        records: Dict[int, BankRecord] = {}
        kv_parts: Dict[Tuple[int, str, int, str], Tensor] = {}
        for name, value in named.items():
            m = pattern.match(name)
            if m is None:
                raise BankError(f"unrecognized bank entry '{name}'")
            t = int(m.group(1))
            if m.group(2):
                if m.group(3) == "gud":
                    records.setdefault(t, BankRecord(t, value.numpy())).z_gud = value.numpy()
                else:
                    records.setdefault(t, BankRecord(t, np.zeros(value.shape))).z_ref = value.numpy()
            else:
                kv_parts[(t, m.group(6), int(m.group(4)), m.group(5))] = value
        for (t, tag, layer, kind), value in kv_parts.items():
            if kind == "V":
                continue
            pair = (value, kv_parts[(t, tag, layer, "V")])
            (records[t].kv_gud if tag == "gud" else records[t].kv_ref)[layer] = pair
        if not records:
            raise BankError("bank file holds no records")
        bank = cls(next(iter(records.values())).z_gud.shape)
        for record in records.values():
            bank.put(record)
        return bank


def save_bank(path, bank: MemoryBank) -> None:
    save_bundle(path, bank.to_bundle())


def load_bank(path, schedule: NoiseSchedule) -> MemoryBank:
    bank = MemoryBank.from_bundle(load_bundle(path))
    bank.check_complete(schedule)
    return bank


# --- single steps ---

def ddim_step(schedule: NoiseSchedule, z_t: Tensor, eps: Tensor, t: int, t_prev: int,
              sigma_val: float = 0.0, noise: Optional[Tensor] = None) -> Tensor:
    """One reverse step; the noise term is added only when ``sigma_val > 0``."""
    if eps.shape != z_t.shape:
        raise DimensionError("noise prediction does not match the latent", eps.shape, z_t.shape)
    a, ap = schedule.ab(t), schedule.ab(t_prev)
    rest = 1.0 - ap - sigma_val ** 2
    if rest < 0.0:
        if rest < -1e-12:
            raise ConfigurationError(f"sigma={sigma_val:.4g} too large for step {t}->{t_prev}")
        rest = 0.0
    x0 = tensor.scale(tensor.sub(z_t, tensor.scale(eps, math.sqrt(1.0 - a))), 1.0 / math.sqrt(a))
    out = tensor.add(tensor.scale(x0, math.sqrt(ap)), tensor.scale(eps, math.sqrt(rest)))
    if sigma_val > 0.0:
        if noise is None or noise.shape != z_t.shape:
            raise DimensionError("stochastic step needs noise shaped like the latent",
                                 z_t.shape, noise.shape if noise is not None else ())
        out = tensor.add(out, tensor.scale(noise, sigma_val))
    return out


def ddim_invert_step(schedule: NoiseSchedule, z_prev: Tensor, eps: Tensor, t: int, t_prev: int) -> Tensor:
    """Exact inverse of the deterministic step for the same eps."""
    if eps.shape != z_prev.shape:
        raise DimensionError("noise prediction does not match the latent", eps.shape, z_prev.shape)
    a, ap = schedule.ab(t), schedule.ab(t_prev)
    x0 = tensor.sub(z_prev, tensor.scale(eps, math.sqrt(1.0 - ap)))
    return tensor.add(tensor.scale(x0, math.sqrt(a / ap)), tensor.scale(eps, math.sqrt(1.0 - a)))


def time_travel_rollback(schedule: NoiseSchedule, z_prev: Tensor, cached_eps: Tensor, t: int, t_prev: int) -> Tensor:
    """Roll z_{t_prev} back to z_t with the step's cached (unguided) prediction."""
    return ddim_invert_step(schedule, z_prev, cached_eps, t, t_prev)


def random_rollback(schedule: NoiseSchedule, z_prev: Tensor, t: int, t_prev: int,
                    rng: np.random.Generator) -> Tensor:
    """Re-noise z_{t_prev} to level t with the forward transition between the two timesteps."""
    ratio = schedule.ab(t) / schedule.ab(t_prev)
    noise = Tensor(rng.standard_normal(z_prev.shape))
    return tensor.add(tensor.scale(z_prev, math.sqrt(ratio)), tensor.scale(noise, math.sqrt(1.0 - ratio)))


def sde_sigmas(schedule: NoiseSchedule, t: int, t_prev: int, eta1: float, eta2: float,
               in_tau_sde: bool) -> Tuple[float, float]:
    if not in_tau_sde:
        return 0.0, 0.0
    return sigma(schedule, t, t_prev, eta1), sigma(schedule, t, t_prev, eta2)


def regional_sde_step(schedule: NoiseSchedule, z_t: Tensor, eps: Tensor, t: int, t_prev: int,
                      m_edit: np.ndarray, eta1: float, eta2: float, in_tau_sde: bool,
                      rng: np.random.Generator) -> Tensor:
    """m * F(eta1) + (1 - m) * F(eta2) with one shared standard-normal draw."""
    s1, s2 = sde_sigmas(schedule, t, t_prev, eta1, eta2, in_tau_sde)
    if s1 == 0.0 and s2 == 0.0:
        return ddim_step(schedule, z_t, eps, t, t_prev)
    noise = Tensor(rng.standard_normal(z_t.shape))
    inside = ddim_step(schedule, z_t, eps, t, t_prev, s1, noise)
    outside = ddim_step(schedule, z_t, eps, t, t_prev, s2, noise)
    m = np.asarray(m_edit, dtype=np.float64)
    return tensor.add(tensor.mul(inside, m), tensor.mul(outside, 1.0 - m))


# --- full trajectories ---

def _invert_one(x0: Tensor, cond: ConditionBundle, denoiser: Denoiser, schedule: NoiseSchedule) -> Tuple[Tensor, MemoryBank]:
    bank = MemoryBank(x0.shape)
    z = x0
    for t, t_prev in reversed(schedule.step_pairs()):
        hooks = AttentionHooks(capture=True) if denoiser.attention_based else None
        eps = predict_eps(denoiser, z, t, cond, hooks)
        z = ddim_invert_step(schedule, z, eps, t, t_prev)
        bank.put(BankRecord(t, z.numpy(), kv_gud=dict(hooks.captured) if hooks else {}))
    return z, bank


def invert(x0: Tensor, cond: ConditionBundle, denoiser: Denoiser, schedule: NoiseSchedule,
           x0_ref: Optional[Tensor] = None, cond_ref: Optional[ConditionBundle] = None) -> Tuple[Tensor, MemoryBank]:
    """Deterministic inversion to z_T, recording the bank at every inference timestep.

    A reference image is inverted alongside and stored as the bank's reference entries.
    """
    z_T, bank = _invert_one(x0, cond, denoiser, schedule)
    if x0_ref is not None:
        if x0_ref.shape != x0.shape:
            raise DimensionError("reference image shape differs from the source", x0_ref.shape, x0.shape)
        _, ref_bank = _invert_one(x0_ref, cond_ref or cond, denoiser, schedule)
        bank.attach_reference(ref_bank)
    logger.debug(f"Inverted {x0.shape} image over {len(bank)} timesteps (reference: {x0_ref is not None})")
    return z_T, bank


def reconstruct(z_T: Tensor, cond: ConditionBundle, denoiser: Denoiser, schedule: NoiseSchedule,
                bank: Optional[MemoryBank] = None) -> Tensor:
    """Deterministic sampling from z_T; with a bank, its K/V are injected into self-attention."""
    z = z_T
    for t, t_prev in schedule.step_pairs():
        hooks = AttentionHooks(inject=bank.injection(t)) if bank is not None and denoiser.attention_based else None
        eps = predict_eps(denoiser, z, t, cond, hooks)
        z = ddim_step(schedule, z, eps, t, t_prev)
    return z


@dataclass
class EditResult:
    image: Tensor
    steps: List[StepLog]
    z_T: Tensor
    bank: MemoryBank

    def run_log(self, task: str, seed: int, config: dict) -> RunLog:
        return RunLog(task=task, seed=seed, config=config, steps=self.steps)


def _in(i: int, interval: Tuple[int, int]) -> bool:
    return interval[0] <= i < interval[1]


def run_edit(x0: Tensor, x0_ref: Optional[Tensor], spec: EditSpec, cond: ConditionBundle, denoiser: Denoiser,
             schedule: NoiseSchedule, cfg: SamplerConfig,
             inversion: Optional[Tuple[Tensor, MemoryBank]] = None) -> EditResult:
    """Guided editing loop.

    Inversion fills the memory bank. Each step predicts eps (CFG included);
    guidance steps add the regional energy gradient; steps in tau_sde use the
    regional SDE, the rest a plain deterministic step. Guidance steps inside
    tau_tt repeat U times, rolling the latent back between iterations.
    ``inversion`` may carry a precomputed (z_T, bank) shared between runs.
    """
    if spec.mask.shape != x0.shape:
        raise DimensionError("edit mask does not match the image", spec.mask.shape, x0.shape)
    if cfg.n > schedule.infer_count:
        raise ConfigurationError(f"n={cfg.n} exceeds the {schedule.infer_count} inference steps")
    if spec.uses_reference and x0_ref is None and inversion is None:
        raise ConfigurationError(f"task '{spec.task}' needs a reference image")

    z_T, bank = inversion if inversion is not None else invert(x0, cond, denoiser, schedule, x0_ref)
    bank.check_complete(schedule)

    if spec.is_identity:
        logger.info("Identity edit: plain reconstruction")
        steps = [StepLog(step=i, timestep=t, sigma_inside=0.0, sigma_outside=0.0, guidance_applied=False,
                         time_travel_iters=1) for i, (t, _) in enumerate(schedule.step_pairs())]
        return EditResult(reconstruct(z_T, cond, denoiser, schedule), steps, z_T, bank)

    rng = np.random.default_rng(cfg.rng_seed)
    z = Tensor(rng.standard_normal(z_T.shape)) if cfg.random_init else z_T
    vca = cfg.visual_cross_attention and denoiser.attention_based
    steps: List[StepLog] = []

    for i, (t, t_prev) in enumerate(schedule.step_pairs()):
        try:
            z, entry = _edit_step(z, i, t, t_prev, spec, cond, denoiser, schedule, cfg, bank, rng, vca)
        except SamplingError:
            raise
        except DeskEditException as e:
            logger.exception(f"Edit step {i} failed: {e.message}")
            raise SamplingError(e.message, timestep=t)
        steps.append(entry)
        logger.debug(f"step {i} t={t}: sigma=({entry.sigma_inside:.4f}, {entry.sigma_outside:.4f}) "
                     f"guided={entry.guidance_applied} U={entry.time_travel_iters} "
                     f"e_edit={entry.e_edit} e_content={entry.e_content}")

    logger.info(f"Finished {spec.task} edit: {sum(s.guidance_applied for s in steps)} guided steps")
    return EditResult(z, steps, z_T, bank)


def _edit_step(z: Tensor, i: int, t: int, t_prev: int, spec: EditSpec, cond: ConditionBundle, denoiser: Denoiser,
               schedule: NoiseSchedule, cfg: SamplerConfig, bank: MemoryBank, rng: np.random.Generator,
               vca: bool) -> Tuple[Tensor, StepLog]:
    guide = i < cfg.n and i % cfg.guidance_stride == 0
    in_sde = _in(i, cfg.tau_sde)
    travel = guide and cfg.time_travel != "off" and _in(i, cfg.tau_tt)
    iters = cfg.U if travel else 1
    lr = cfg.guidance_lr * math.sqrt(1.0 - schedule.ab(t))
    s_in, s_out = sde_sigmas(schedule, t, t_prev, cfg.eta1, cfg.eta2, in_sde)
    report = None

    for u in range(iters):
        hooks = AttentionHooks(inject=bank.injection(t)) if vca else None
        eps = predict_eps(denoiser, z, t, cond, hooks)
        step_eps = eps
        if guide:
            report = regional_gradient(z, bank, spec, t, cfg.regional_guidance, cfg.content_guidance)
            step_eps = guided_eps(eps, report, lr)
        z_prev = regional_sde_step(schedule, z, step_eps, t, t_prev, spec.mask, cfg.eta1, cfg.eta2, in_sde, rng)
        if u < iters - 1:
            if cfg.time_travel == "random":
                z = random_rollback(schedule, z_prev, t, t_prev, rng)
            else:
                z = time_travel_rollback(schedule, z_prev, eps, t, t_prev)
        else:
            z = z_prev

    entry = StepLog(step=i, timestep=t, sigma_inside=s_in, sigma_outside=s_out, guidance_applied=guide,
                    time_travel_iters=iters,
                    e_edit=report.e_edit if report else None, e_content=report.e_content if report else None)
    return z, entry
