from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import EditSpecFile
from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import BankError, ConfigurationError, DimensionError
from deskedit.app.utils.tensor import GradientTape, Tensor
from deskedit.app.utils.tensor_io import load_tensor, save_tensor

if TYPE_CHECKING:
    from deskedit.app.services.sampler_service import MemoryBank

logger = setup_logger("guidance_service")

TASKS = ("move", "resize", "paste", "replace", "drag")
PATCH = 4
NORM_EPS = 1e-8


@dataclass(frozen=True)
class EditSpec:
    """What to edit.

    ``region_map`` rows are (src_y, src_x, dst_y, dst_x): source coordinates
    index the memory-bank latent (guidance or reference), destination
    coordinates index the current latent.
    """
    task: str
    mask: np.ndarray
    region_map: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    reference_id: Optional[str] = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        rmap = np.asarray(self.region_map, dtype=np.int64).reshape(-1, 4)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "region_map", rmap)
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.mask.ndim != 2:
            raise DimensionError("edit mask must be 2-D", self.mask.shape)
        if self.mask.size and (self.mask.min() < 0.0 or self.mask.max() > 1.0):
            raise ConfigurationError("edit mask values must lie in [0, 1]")
        h, w = self.mask.shape
        for name, cols in (("source", self.region_map[:, :2]), ("destination", self.region_map[:, 2:])):
            if cols.size and (cols.min() < 0 or cols[:, 0].max() >= h or cols[:, 1].max() >= w):
                raise ConfigurationError(f"{name} coordinates fall outside the {h}x{w} grid")
        dst = self.region_map[:, 2:]
        if dst.size:
            if np.any(self.mask[dst[:, 0], dst[:, 1]] <= 0.0):
                raise ConfigurationError("destination coordinates must lie inside the edit mask")
            if len(np.unique(dst, axis=0)) != len(dst):
                raise ConfigurationError("region map must be injective on destinations")
        if self.uses_reference and not self.reference_id:
            raise ConfigurationError(f"task '{self.task}' needs a reference image")

    @property
    def uses_reference(self) -> bool:
        return self.task in ("paste", "replace")

    @property
    def is_identity(self) -> bool:
        return len(self.region_map) == 0 and not np.any(self.mask > 0)

    def destination_centroid(self) -> Tuple[float, float]:
        dst = self.region_map[:, 2:].astype(np.float64)
        return float(dst[:, 0].mean()), float(dst[:, 1].mean())

    def to_file(self, mask_path) -> EditSpecFile:
        save_tensor(mask_path, Tensor(self.mask))
        return EditSpecFile(task=self.task, mask=str(mask_path),
                            region_map=[tuple(int(v) for v in row) for row in self.region_map],
                            reference_id=self.reference_id)

    @classmethod
    def from_file(cls, spec: EditSpecFile) -> "EditSpec":
        return cls(spec.task, load_tensor(spec.mask).numpy(), np.array(spec.region_map, dtype=np.int64),
                   spec.reference_id)


def identity_spec(shape: Tuple[int, int], task: str = "move") -> EditSpec:
    return EditSpec(task, np.zeros(shape), reference_id="reference" if task in ("paste", "replace") else None)


@dataclass(frozen=True)
class EnergyReport:
    e_edit: float
    e_content: float
    grad: Tensor
    edit_grad: Optional[Tensor] = None
    content_grad: Optional[Tensor] = None


def window_indices(coords: np.ndarray, shape: Tuple[int, int], size: int = PATCH) -> np.ndarray:
    """Flat indices of the size x size window around each (y, x), clipped into the grid."""
    h, w = shape
    if h < size or w < size:
        raise ConfigurationError(f"latent {shape} is smaller than the {size}x{size} energy window")
    y0 = np.clip(coords[:, 0] - size // 2, 0, h - size)
    x0 = np.clip(coords[:, 1] - size // 2, 0, w - size)
    dy, dx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return (y0[:, None] + dy.ravel()[None, :]) * w + (x0[:, None] + dx.ravel()[None, :])


def _one_minus_mean_cosine(current: Tensor, target: np.ndarray) -> Tensor:
    return tensor.sub(1.0, tensor.mean(tensor.cosine_similarity(current, Tensor(target))))


def energy_edit(z_t: Tensor, bank: "MemoryBank", spec: EditSpec, t: int) -> Tensor:
    """1 - mean cosine between destination windows of ``z_t`` and source windows of the bank latent."""
    record = bank.get(t)
    source = record.z_ref if spec.uses_reference else record.z_gud
    if source is None:
        raise BankError("no reference latent recorded", timestep=t)
    if len(spec.region_map) == 0:
        return Tensor(0.0)
    if source.shape != z_t.shape:
        raise DimensionError("bank latent and current latent differ", source.shape, z_t.shape)

    src_idx = window_indices(spec.region_map[:, :2], z_t.shape)
    dst_idx = window_indices(spec.region_map[:, 2:], z_t.shape)
    current = tensor.take(tensor.reshape(z_t, (-1,)), dst_idx)
    return _one_minus_mean_cosine(current, source.reshape(-1)[src_idx])


def _patch_rows(x: Tensor, size: int) -> Tensor:
    h, w = x.shape
    x = tensor.reshape(x, (h // size, size, w // size, size))
    x = tensor.transpose(x, (0, 2, 1, 3))
    return tensor.reshape(x, ((h // size) * (w // size), size * size))


def energy_content(z_t: Tensor, bank: "MemoryBank", spec: EditSpec, t: int) -> Tensor:
    """1 - mean cosine to the guidance latent over patches of the mask complement."""
    record = bank.get(t)
    h, w = z_t.shape
    if h % PATCH or w % PATCH:
        raise ConfigurationError(f"latent {z_t.shape} is not divisible into {PATCH}x{PATCH} patches")
    keep = (spec.mask <= 0.0).astype(np.float64)
    if not keep.any():
        return Tensor(0.0)

    current = _patch_rows(tensor.mul(z_t, keep), PATCH)
    target = _patch_rows(Tensor(record.z_gud * keep), PATCH).data
    rows = np.flatnonzero(_patch_rows(Tensor(keep), PATCH).data.any(axis=1))
    return _one_minus_mean_cosine(tensor.take(current, rows), target[rows])


def _normalized(g: np.ndarray) -> np.ndarray:
    return g / (np.abs(g).max() + NORM_EPS)


def regional_gradient(z_t: Tensor, bank: "MemoryBank", spec: EditSpec, t: int,
                      regional: bool = True, content: bool = True) -> EnergyReport:
    """Mask-blended, max-normalized energy gradients.

    grad = m * g_edit + (1 - m) * g_content, each g divided by its max magnitude.
    With ``regional`` off the normalized gradients are simply summed.
    """
    z = Tensor(z_t.data)
    with GradientTape() as tape:
        tape.watch(z)
        e_edit = energy_edit(z, bank, spec, t)
        e_content = energy_content(z, bank, spec, t) if content else Tensor(0.0)
    g_edit = tape.gradient(e_edit, z)
    g_content = tape.gradient(e_content, z)

    n_edit, n_content = _normalized(g_edit.data), _normalized(g_content.data)
    if regional:
        m = spec.mask
        combined = m * n_edit + (1.0 - m) * n_content
    else:
        combined = n_edit + n_content
    return EnergyReport(max(e_edit.item(), 0.0), max(e_content.item(), 0.0), Tensor(combined), g_edit, g_content)


def guided_eps(eps: Tensor, report: EnergyReport, lr: float) -> Tensor:
    """eps + lr * grad; the energy is a distance, so this steps the sample downhill."""
    if eps.shape != report.grad.shape:
        raise DimensionError("guidance gradient does not match the noise prediction", eps.shape, report.grad.shape)
    return tensor.add(eps, tensor.scale(report.grad, lr))
