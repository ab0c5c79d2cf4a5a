import math
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from PIL import Image

from deskedit.app.core.logger import setup_logger
from deskedit.app.utils.exceptions import DatasetError, NumericsError
from deskedit.app.utils.tensor import Tensor

logger = setup_logger("tensor_io")

MAGIC = b"TNSR"
PathLike = Union[str, Path]


def encode_tensor(t: Tensor) -> bytes:
    """TNSR blob: magic, u32 rank, rank x u32 dims, row-major float64 LE."""
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def _need(buf: bytes, end: int, what: str) -> None:
    if end > len(buf):
        raise DatasetError(f"truncated {what}: need {end} bytes, have {len(buf)}")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one TNSR blob starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise DatasetError(f"bad magic at byte {offset}")
    _need(buf, offset + 8, "tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    _need(buf, pos + 4 * rank, "tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    end = pos + 8 * math.prod(dims)
    _need(buf, end, "tensor payload")
    data = np.frombuffer(buf, dtype="<f8", count=math.prod(dims), offset=pos).reshape(dims)
    try:
        return Tensor(data.astype(np.float64)), end
    except NumericsError as e:
        raise DatasetError(f"tensor at byte {offset}: {e.message}")


def save_tensor(path: PathLike, t: Tensor) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(t))
    except OSError as e:
        logger.exception(f"Failed to write tensor file {path}: {e}")
        raise DatasetError(str(e), str(path))


def _read(path: Path, what: str) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        logger.exception(f"Failed to read {what} {path}: {e}")
        raise DatasetError(str(e), str(path))


def load_tensor(path: PathLike) -> Tensor:
    path = Path(path)
    buf = _read(path, "tensor file")
    try:
        t, end = decode_tensor(buf)
    except DatasetError as e:
        raise DatasetError(e.message, str(path))
    if end != len(buf):
        raise DatasetError(f"{len(buf) - end} trailing bytes after tensor", str(path))
    return t


def encode_bundle(named: Dict[str, Tensor]) -> bytes:
    """Repeated records of (u32 name length, UTF-8 name, TNSR blob)."""
    parts = []
    for name, t in named.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + encode_tensor(t))
    return b"".join(parts)


def decode_bundle(buf: bytes) -> Dict[str, Tensor]:
    named: Dict[str, Tensor] = {}
    pos = 0
    while pos < len(buf):
        _need(buf, pos + 4, "record name length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        _need(buf, pos + n, "record name")
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as e:
            raise DatasetError(f"record name at byte {pos} is not UTF-8: {e.reason}")
        if name in named:
            raise DatasetError(f"duplicate record name '{name}'")
        pos += n
        named[name], pos = decode_tensor(buf, pos)
    return named


def save_bundle(path: PathLike, named: Dict[str, Tensor]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_bundle(named))
        logger.info(f"Saved bundle with {len(named)} tensors to {path}")
    except OSError as e:
        logger.exception(f"Failed to write bundle {path}: {e}")
        raise DatasetError(str(e), str(path))


def load_bundle(path: PathLike) -> Dict[str, Tensor]:
    path = Path(path)
    buf = _read(path, "bundle")
    try:
        return decode_bundle(buf)
    except DatasetError as e:
        logger.error(f"Corrupt bundle {path}: {e.message}")
        raise DatasetError(e.message, str(path))


def save_pgm(path: PathLike, image: Tensor) -> None:
    """8-bit binary PGM (P5) preview; [-1, 1] maps to [0, 255]."""
    if image.ndim != 2:
        raise DatasetError(f"PGM export needs a 2-D image, got shape {image.shape}", str(path))
    pixels = np.clip((image.data + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        logger.exception(f"Failed to write PGM {path}: {e}")
        raise DatasetError(str(e), str(path))
