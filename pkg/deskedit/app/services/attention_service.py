import math
from typing import Optional

from deskedit.app.utils import tensor
from deskedit.app.utils.exceptions import ConfigurationError, DimensionError
from deskedit.app.utils.tensor import Tensor


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``k`` and ``v`` may be plain matrices shared by every batch row of ``q``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("query and key widths differ", q.shape, k.shape)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key and value counts differ", k.shape, v.shape)
    scores = tensor.scale(tensor.matmul(q, tensor.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return tensor.matmul(tensor.softmax_rows(scores), v)


def fused_attention(q: Tensor, k_text: Tensor, v_text: Tensor,
                    k_image: Optional[Tensor] = None, v_image: Optional[Tensor] = None,
                    gamma: float = 0.0) -> Tensor:
    """Text attention plus ``gamma`` times attention over image-prompt tokens.

    With ``gamma == 0`` the image branch is skipped entirely, so the result is
    exactly the text-only attention.
    """
    if (k_image is None) != (v_image is None):
        raise ConfigurationError("image keys and values must be given together")
    if k_image is None and gamma != 0.0:
        raise ConfigurationError(f"gamma={gamma} needs image-prompt keys and values")

    out = attention(q, k_text, v_text)
    if k_image is not None and gamma != 0.0:
        out = tensor.add(out, tensor.scale(attention(q, k_image, v_image), gamma))
    return out
