import math
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from deskedit.app.core.logger import setup_logger
from deskedit.app.models.schemas import MetricsRow
from deskedit.app.services.dataset_service import blob_centroid
from deskedit.app.services.guidance_service import EditSpec
from deskedit.app.utils.exceptions import DatasetError, DimensionError

logger = setup_logger("metrics_service")

# Stable column order of the metrics CSV.
COLUMNS = list(MetricsRow.model_fields)
AGGREGATED = ["objective_value", "out_of_mask_mse", "in_mask_change", "wall_time_s"]


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError("images differ in shape", a.shape, b.shape)


def out_of_mask_mse(output: np.ndarray, source: np.ndarray, mask: np.ndarray) -> float:
    """MSE against the source over pixels where the edit mask is zero."""
    _check(output, source)
    keep = np.asarray(mask) <= 0.0
    if not keep.any():
        return 0.0
    return float(((output - source)[keep] ** 2).mean())


def in_mask_change(output: np.ndarray, source: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared change inside the edit mask."""
    _check(output, source)
    inside = np.asarray(mask) > 0.0
    if not inside.any():
        return 0.0
    return float(((output - source)[inside] ** 2).mean())


def centroid_error(output: np.ndarray, target: Tuple[float, float]) -> float:
    cy, cx = blob_centroid(output)
    if math.isnan(cy):
        return float("inf")
    return math.hypot(cy - target[0], cx - target[1])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float((a * b).sum() / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def masked_cosines(output: np.ndarray, source: np.ndarray, reference: np.ndarray,
                   mask: np.ndarray) -> Tuple[float, float]:
    """Cosine of the masked output region to the reference and to the source."""
    inside = np.asarray(mask) > 0.0
    return _cosine(output[inside], reference[inside]), _cosine(output[inside], source[inside])


def edit_objective(spec: EditSpec, output: np.ndarray, source: np.ndarray,
                   reference: Optional[np.ndarray] = None) -> Tuple[str, float]:
    """Task-specific in-mask objective; lower is better except for the replace margin."""
    if spec.is_identity:
        return "reconstruction_mse", float(((output - source) ** 2).mean())
    if spec.task == "replace" and reference is not None:
        to_ref, to_src = masked_cosines(output, source, reference, spec.mask)
        return "cosine_margin", to_ref - to_src
    return "centroid_error", centroid_error(output, spec.destination_centroid())


def append_metrics(path, row: MetricsRow) -> Path:
    """Append one row; the header is written only when the file is new."""
    path = Path(path)
    frame = pd.DataFrame([row.model_dump()], columns=COLUMNS)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    except OSError as e:
        logger.exception(f"Failed to append metrics to {path}: {e}")
        raise DatasetError(str(e), str(path))
    logger.debug(f"Appended {row.task} seed {row.seed} to {path}")
    return path


def load_metrics(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.exception(f"Failed to read metrics {path}: {e}")
        raise DatasetError(str(e), str(path))


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean, std and count of every numeric column per (task, objective)."""
    missing = [c for c in ["task", "objective"] + AGGREGATED if c not in frame.columns]
    if missing:
        raise DatasetError(f"metrics file lacks columns {missing}")
    stats = frame.groupby(["task", "objective"])[AGGREGATED].agg(["mean", "std", "count"])
    stats.columns = [f"{col}_{fn}" for col, fn in stats.columns]
    return stats.reset_index()
