import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from deskedit.app.core.config import BETA_MAX, BETA_MIN, INFER_STEPS, T_TRAIN
from deskedit.app.core.logger import setup_logger
from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError, RangeError
from deskedit.app.utils.tensor import Tensor

logger = setup_logger("schedule_service")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule plus the strided inference subsequence.

    ``alpha_bar[t]`` is the cumulative signal coefficient with ``alpha_bar[0] == 1``.
    ``infer_steps`` is strictly decreasing; each step ``infer_steps[i]`` moves to
    ``prev_timestep(i)``, and the last one moves to 0.
    """
    t_train: int
    beta_min: float
    beta_max: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    infer_steps: Tuple[int, ...]

    @property
    def infer_count(self) -> int:
        return len(self.infer_steps)

    def prev_timestep(self, i: int) -> int:
        return self.infer_steps[i + 1] if i + 1 < len(self.infer_steps) else 0

    def step_pairs(self) -> List[Tuple[int, int]]:
        """(t, t_prev) for every inference step, noisiest first."""
        return [(t, self.prev_timestep(i)) for i, t in enumerate(self.infer_steps)]

    def ab(self, t: int) -> float:
        if not 0 <= t <= self.t_train:
            raise RangeError(f"outside 0..{self.t_train}", timestep=t)
        return float(self.alpha_bar[t])


def build_schedule(t_train: int = T_TRAIN, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX,
                   infer_count: int = INFER_STEPS) -> NoiseSchedule:
    if t_train < 1:
        raise ConfigurationError(f"t_train must be positive, got {t_train}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigurationError(f"beta range must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]")
    if not 1 <= infer_count <= t_train:
        raise ConfigurationError(f"infer_count must lie in 1..{t_train}, got {infer_count}")

    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, t_train)])
    alpha_bar = np.cumprod(1.0 - beta)
    stride = t_train // infer_count
    infer_steps = tuple(int(t) for t in (np.arange(infer_count) * stride + 1)[::-1])

    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    schedule = NoiseSchedule(t_train, beta_min, beta_max, beta, alpha_bar, infer_steps)
    logger.debug(f"Built schedule T={t_train}, alpha_bar_T={alpha_bar[-1]:.3e}, {infer_count} inference steps")
    return schedule


def q_sample(schedule: NoiseSchedule, x0: Tensor, t: int, eps: Tensor) -> Tensor:
    """Forward diffusion: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if x0.shape != eps.shape:
        raise DimensionError("q_sample noise must match the image", x0.shape, eps.shape)
    if not 0 <= t <= schedule.t_train:
        raise RangeError(f"outside 0..{schedule.t_train}", timestep=t)
    a = schedule.ab(t)
    return tensor.add(tensor.scale(x0, math.sqrt(a)), tensor.scale(eps, math.sqrt(1.0 - a)))


def sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Step noise level: eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev)."""
    if t_prev >= t:
        raise RangeError(f"t_prev={t_prev} must precede t", timestep=t)
    if eta < 0:
        raise ConfigurationError(f"eta must be nonnegative, got {eta}")
    a, ap = schedule.ab(t), schedule.ab(t_prev)
    return eta * math.sqrt((1.0 - ap) / (1.0 - a)) * math.sqrt(1.0 - a / ap)


def ddpm_posterior_std(schedule: NoiseSchedule, t: int, t_prev: int) -> float:
    """Posterior std of q(x_prev | x_t, x0) for the strided pair, written via the pair's effective beta."""
    a, ap = schedule.ab(t), schedule.ab(t_prev)
    beta_pair = 1.0 - a / ap
    return math.sqrt(beta_pair * (1.0 - ap) / (1.0 - a))
