"""Per-layer keep/drop masks with straight-through gradients.

A child Gaussian is kept only if its own soft mask exceeds 0.5 *and* its
parent was kept. The forward value of the composite mask is that binary
decision; its gradient flows through the product ``m_next * M_parent``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class LayerMask:
    soft: Tensor
    logical: np.ndarray  # bool
    composite: Tensor

    def __len__(self) -> int:
        return len(self.logical)


def quantize(x) -> Tensor:
    """1 where x > 0.5 (strict), else 0; gradient passes straight through."""
    x = dc.as_tensor(x)
    return dc.custom_grad(Tensor((x.data > 0.5).astype(np.float64)), x)


def init_mask(n: int) -> LayerMask:
    ones = np.ones(n)
    return LayerMask(Tensor(ones), ones.astype(bool), Tensor(ones))


def duplicate_rows(t: Tensor, k: int) -> Tensor:
    """Copy-major repeat: output row m*N + j is input row j."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = t.shape[0]
    return dc.gather(t, np.tile(np.arange(n), k))


def propagate_mask(parent: LayerMask, m_next: Tensor, k: int) -> LayerMask:
    if m_next.shape != (k * len(parent),):
        raise ValueError(f"soft mask has {m_next.shape[0] if m_next.ndim else 1} entries, "
                         f"expected {k * len(parent)}")
    m_dup = duplicate_rows(parent.composite, k)
    logical = (quantize(m_next).data > 0) & (quantize(m_dup).data > 0)
    composite = dc.custom_grad(Tensor(logical.astype(np.float64)), m_next * m_dup)
    return LayerMask(m_next, logical, composite)


def mask_predict(features: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Two-layer MLP D -> 64 -> 1 with a sigmoid; one soft value per row."""
    h = dc.leaky_relu(dc.add_rows(features @ params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    out = dc.add_rows(h @ params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return dc.sigmoid(dc.reshape(out, (features.shape[0],)))


def active_count(mask: LayerMask) -> int:
    return int(np.count_nonzero(mask.logical))
