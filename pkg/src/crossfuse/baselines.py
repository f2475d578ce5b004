"""Conventional multi-level fusion counterparts to cross-fusion.

Both reuse the same reference assembly (resize + dilated max pooling) and the
same residual form ``x_p + projection(refs)``, so the only difference from
cross-fusion is the absence of point-wise attention weights.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .block import CrossFusionConfig, FeatureHierarchy, assemble_references
from .tensor import ContractViolation, Tensor


def init_projections(channels: Sequence[int], target_index: int, strategy: str, dtype=None) -> list[Tensor]:
    """Zero-initialised projections (identity at init, like the cross block)."""
    dtype = dtype or T.default_dtype()
    cp = channels[target_index]
    if strategy == "addition":
        return [Tensor(np.zeros((cp, c)), dtype=dtype, name=f"w_proj{j}", requires_grad=True)
                for j, c in enumerate(channels)]
    if strategy == "concat":
        return [Tensor(np.zeros((cp, sum(channels))), dtype=dtype, name="w_proj", requires_grad=True)]
    raise ContractViolation(f"no projections for strategy {strategy!r}")


def fuse_addition(h: FeatureHierarchy, weights: Sequence[Tensor], cfg: CrossFusionConfig) -> Tensor:
    if len(weights) != len(h):
        raise ContractViolation(f"fuse_addition: {len(weights)} projections for {len(h)} levels")
    cp = h.target.dims[-3]
    for j, (w, m) in enumerate(zip(weights, h.maps)):
        if w.dims != (cp, m.dims[-3]):
            raise ContractViolation(f"level {j}: projection dims {w.dims}, expected {(cp, m.dims[-3])}")
    refs = assemble_references(h, cfg)
    return T.add_n([h.target, *[T.conv1x1(r, w) for r, w in zip(refs, weights)]])


def fuse_concat(h: FeatureHierarchy, weight: Tensor, cfg: CrossFusionConfig) -> Tensor:
    refs = assemble_references(h, cfg)
    stacked = T.concat_channels(refs)
    cp = h.target.dims[-3]
    if weight.dims != (cp, stacked.dims[-3]):
        raise ContractViolation(f"fuse_concat: projection dims {weight.dims}, expected {(cp, stacked.dims[-3])}")
    return T.add(T.conv1x1(stacked, weight), h.target)
