import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from deskedit.app.core.config import IMAGE_SIZE
from deskedit.app.core.logger import setup_logger
from deskedit.app.services.denoiser_service import GmmPrior
from deskedit.app.utils.exceptions import ConfigurationError, DatasetError
from deskedit.app.utils.tensor import Tensor
from deskedit.app.utils.tensor_io import load_tensor, save_tensor

logger = setup_logger("dataset_service")

SHAPE_CLASSES = ("round", "wide", "tall", "square")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class BlobDataset:
    """Grayscale blob images in [-1, 1] with their shape labels and geometry."""
    images: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    scales: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1]) if self.images.ndim == 3 else IMAGE_SIZE

    def subset(self, idx: Iterable[int]) -> "BlobDataset":
        idx = np.asarray(list(idx) if not isinstance(idx, np.ndarray) else idx, dtype=np.int64)
        return BlobDataset(self.images[idx], self.labels[idx], self.centers[idx], self.scales[idx])

    def split(self, holdout_fraction: float) -> Tuple["BlobDataset", "BlobDataset"]:
        """Trailing ``holdout_fraction`` of the samples becomes the held-out set."""
        n_hold = int(round(len(self) * holdout_fraction))
        cut = len(self) - n_hold
        return self.subset(range(cut)), self.subset(range(cut, len(self)))


def render_blob(image_size: int, center: Sequence[float], scale: float, label: int = 0) -> np.ndarray:
    """One blob on a -1 background; peak value +1."""
    if not 0 <= label < len(SHAPE_CLASSES):
        raise ConfigurationError(f"unknown shape class {label}")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    shape = SHAPE_CLASSES[label]
    if shape == "round":
        r2 = (dy / scale) ** 2 + (dx / scale) ** 2
    elif shape == "wide":
        r2 = (dy / scale) ** 2 + (dx / (1.8 * scale)) ** 2
    elif shape == "tall":
        r2 = (dy / (1.8 * scale)) ** 2 + (dx / scale) ** 2
    else:
        r2 = np.sqrt((dy / scale) ** 4 + (dx / scale) ** 4)
    return -1.0 + 2.0 * np.exp(-0.5 * r2)


def generate_blobs(count: int, image_size: int = IMAGE_SIZE, seed: int = 0,
                   scale_range: Tuple[float, float] = (1.5, 3.0)) -> BlobDataset:
    if count < 0 or image_size < 8:
        raise ConfigurationError(f"invalid dataset geometry: count={count}, image_size={image_size}")
    margin = 2.0 * scale_range[1]
    if image_size - 1 < 2 * margin:
        raise ConfigurationError(
            f"image_size={image_size} leaves no room for blobs up to scale {scale_range[1]} "
            f"(need image_size >= {2 * margin + 1:g})")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(margin, image_size - 1 - margin, size=(count, 2))
    scales = rng.uniform(scale_range[0], scale_range[1], size=count)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=count)
    images = np.stack([render_blob(image_size, c, s, int(lab)) for c, s, lab in zip(centers, scales, labels)]) \
        if count else np.zeros((0, image_size, image_size))
    return BlobDataset(images, labels.astype(np.int64), centers, scales)


def write_dataset(out_dir, dataset: BlobDataset) -> Path:
    """TNSR file per image plus a JSON manifest; byte-identical for identical datasets."""
    out_dir = Path(out_dir)
    samples = []
    for i in range(len(dataset)):
        name = f"blob_{i:05d}.tnsr"
        save_tensor(out_dir / name, Tensor(dataset.images[i]))
        samples.append({
            "file": name,
            "label": int(dataset.labels[i]),
            "shape": SHAPE_CLASSES[int(dataset.labels[i])],
            "center": [float(c) for c in dataset.centers[i]],
            "scale": float(dataset.scales[i]),
        })
    manifest = {"image_size": dataset.image_size, "count": len(dataset), "samples": samples}
    path = out_dir / MANIFEST
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.exception(f"Failed to write manifest {path}: {e}")
        raise DatasetError(str(e), str(path))
    logger.info(f"Wrote {len(dataset)} blob images to {out_dir}")
    return path


def load_dataset(data_dir) -> BlobDataset:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.exception(f"Failed to read manifest {path}: {e}")
        raise DatasetError(str(e), str(path))

    size = int(manifest["image_size"])
    samples = manifest.get("samples", [])
    images = np.zeros((len(samples), size, size))
    for i, sample in enumerate(samples):
        image = load_tensor(data_dir / sample["file"])
        if image.shape != (size, size):
            raise DatasetError(f"expected {size}x{size}, got {image.shape}", str(data_dir / sample["file"]))
        images[i] = image.data
    labels = np.array([s["label"] for s in samples], dtype=np.int64)
    centers = np.array([s["center"] for s in samples], dtype=np.float64).reshape(-1, 2)
    scales = np.array([s["scale"] for s in samples], dtype=np.float64)
    logger.info(f"Loaded {len(samples)} images from {data_dir}")
    return BlobDataset(images, labels, centers, scales)


def blob_position_prior(image_size: int = IMAGE_SIZE, scale: float = 2.0, label: int = 0, std: float = 0.05,
                        positions: Optional[Sequence[Tuple[int, int]]] = None) -> GmmPrior:
    """Uniform mixture of one blob rendered at every grid position (or the given ones)."""
    if positions is None:
        margin = int(math.ceil(2.5 * scale))
        grid = range(margin, image_size - margin)
        positions = [(y, x) for y in grid for x in grid]
    if not positions:
        raise ConfigurationError("blob prior needs at least one position")
    means = np.stack([render_blob(image_size, p, scale, label) for p in positions])
    weights = np.full(len(positions), 1.0 / len(positions))
    return GmmPrior(weights, means, std)


def blob_centroid(image: np.ndarray, floor: float = 0.2) -> Tuple[float, float]:
    """Intensity-weighted centroid of the bright region; pixels below ``floor`` (in [0, 1] units) are ignored."""
    w = np.clip((np.asarray(image) + 1.0) / 2.0, 0.0, None)
    w = np.where(w > floor, w, 0.0)
    total = w.sum()
    if total <= 0:
        return float("nan"), float("nan")
    yy, xx = np.mgrid[0:w.shape[0], 0:w.shape[1]]
    return float((w * yy).sum() / total), float((w * xx).sum() / total)


def blob_mask(image: np.ndarray, floor: float = 0.2) -> np.ndarray:
    """Binary support of the bright region."""
    return ((np.asarray(image) + 1.0) / 2.0 > floor).astype(np.float64)
