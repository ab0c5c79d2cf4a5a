from typing import List, Optional, Sequence, Tuple

import numpy as np

from deskedit.app.core.logger import setup_logger
from deskedit.app.services.guidance_service import EditSpec
from deskedit.app.utils.exceptions import ConfigurationError

logger = setup_logger("task_service")

Point = Tuple[int, int]
DILATE = 2
REFERENCE_ID = "reference"


def dilate(mask: np.ndarray, radius: int = DILATE) -> np.ndarray:
    """Binary dilation by a (2 * radius + 1)-pixel square structuring element; radius 0 only binarizes."""
    src = np.asarray(mask) > 0
    if radius <= 0:
        return src.astype(np.float64)
    h, w = src.shape
    padded = np.pad(src, radius)
    out = np.zeros_like(src)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out |= padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
    return out.astype(np.float64)


def _support(mask: np.ndarray, name: str) -> np.ndarray:
    pts = np.argwhere(np.asarray(mask) > 0.5)
    if len(pts) == 0:
        raise ConfigurationError(f"{name} is empty")
    return pts


def _points_mask(shape: Tuple[int, int], pts: np.ndarray) -> np.ndarray:
    m = np.zeros(shape)
    if len(pts):
        m[pts[:, 0], pts[:, 1]] = 1.0
    return m


def _in_bounds(pts: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    return (pts[:, 0] >= 0) & (pts[:, 0] < shape[0]) & (pts[:, 1] >= 0) & (pts[:, 1] < shape[1])


def _finish(task: str, shape: Tuple[int, int], pairs: np.ndarray, extra_support: Optional[np.ndarray] = None,
            reference_id: Optional[str] = None, mask: Optional[np.ndarray] = None) -> EditSpec:
    if len(pairs) == 0:
        raise ConfigurationError(f"{task} edit maps no pixels inside the image")
    if mask is None:
        support = _points_mask(shape, pairs[:, 2:])
        if extra_support is not None:
            support = np.maximum(support, extra_support)
        mask = dilate(support)
    spec = EditSpec(task, mask, pairs, reference_id)
    logger.debug(f"Built {task} spec with {len(pairs)} pairs, mask area {int((mask > 0).sum())}")
    return spec


def build_move_spec(source_mask: np.ndarray, offset: Point) -> EditSpec:
    """Translate the masked object by ``offset`` (dy, dx)."""
    shape = source_mask.shape
    src = _support(source_mask, "source mask")
    dst = src + np.asarray(offset, dtype=np.int64)
    ok = _in_bounds(dst, shape)
    pairs = np.concatenate([src[ok], dst[ok]], axis=1)
    return _finish("move", shape, pairs, extra_support=np.asarray(source_mask) > 0.5)


def build_resize_spec(source_mask: np.ndarray, scale: float) -> EditSpec:
    """Scale the masked object about its centroid; destinations pull their source by nearest neighbour."""
    if scale <= 0:
        raise ConfigurationError(f"resize scale must be positive, got {scale}")
    shape = source_mask.shape
    src_support = np.asarray(source_mask) > 0.5
    center = _support(source_mask, "source mask").mean(axis=0)
    grid = np.argwhere(np.ones(shape, dtype=bool))
    back = np.rint(center + (grid - center) / scale).astype(np.int64)
    ok = _in_bounds(back, shape)
    ok[ok] = src_support[back[ok, 0], back[ok, 1]]
    pairs = np.concatenate([back[ok], grid[ok]], axis=1)
    return _finish("resize", shape, pairs, extra_support=src_support)


def build_paste_spec(reference_mask: np.ndarray, reference_offset: Point) -> EditSpec:
    """Paste the reference object, shifted by ``reference_offset``, into the source image."""
    shape = reference_mask.shape
    src = _support(reference_mask, "reference mask")
    dst = src + np.asarray(reference_offset, dtype=np.int64)
    ok = _in_bounds(dst, shape)
    pairs = np.concatenate([src[ok], dst[ok]], axis=1)
    return _finish("paste", shape, pairs, reference_id=REFERENCE_ID)


def build_replace_spec(region_mask: np.ndarray, reference_mask: np.ndarray) -> EditSpec:
    """Fill the source region with the reference object, aligned by centroid."""
    shape = region_mask.shape
    dst = _support(region_mask, "region mask")
    ref_support = np.asarray(reference_mask) > 0.5
    shift = np.rint(_support(reference_mask, "reference mask").mean(axis=0) - dst.mean(axis=0)).astype(np.int64)
    src = dst + shift
    ok = _in_bounds(src, shape)
    ok[ok] = ref_support[src[ok, 0], src[ok, 1]]
    pairs = np.concatenate([src[ok], dst[ok]], axis=1)
    return _finish("replace", shape, pairs, extra_support=np.asarray(region_mask) > 0.5, reference_id=REFERENCE_ID)


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    keep = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


def _segment(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    steps = int(np.abs(b - a).max()) + 1
    return np.rint(np.linspace(a, b, steps)).astype(np.int64)


def build_drag_spec(handles: Sequence[Point], targets: Sequence[Point], shape: Tuple[int, int],
                    radius: int = 3, mask: Optional[np.ndarray] = None) -> EditSpec:
    """Pair each handle's disk neighbourhood with the same neighbourhood around its target.

    Without an explicit mask, the edit region covers the swept path of every
    disk from handle to target.
    """
    if len(handles) != len(targets) or not handles:
        raise ConfigurationError("drag needs matching, non-empty handle and target lists")
    disk = _disk(radius)
    rows: List[np.ndarray] = []
    swept = np.zeros(shape)
    for h, g in zip(handles, targets):
        h, g = np.asarray(h, dtype=np.int64), np.asarray(g, dtype=np.int64)
        src, dst = h + disk, g + disk
        ok = _in_bounds(src, shape) & _in_bounds(dst, shape)
        rows.append(np.concatenate([src[ok], dst[ok]], axis=1))
        for p in _segment(h, g):
            pts = p + disk
            swept = np.maximum(swept, _points_mask(shape, pts[_in_bounds(pts, shape)]))
    pairs = np.concatenate(rows, axis=0)
    # first handle wins where target neighbourhoods overlap
    _, first = np.unique(pairs[:, 2:], axis=0, return_index=True)
    pairs = pairs[np.sort(first)]
    if mask is not None:
        mask = np.maximum(np.asarray(mask, dtype=np.float64), _points_mask(shape, pairs[:, 2:]))
        return _finish("drag", shape, pairs, mask=mask)
    return _finish("drag", shape, pairs, extra_support=swept)
