"""Training losses: unaveraged L1 sums on the blended and refined frames.

Both image losses are plain sums of absolute differences over every pixel
and channel (no mean), and the total weights the refined term twice as
heavily as the blended term.
"""

from __future__ import annotations

from ecmflow import tensor as T
from ecmflow.tensor import Tensor, ShapeError

REFINE_WEIGHT = 2.0


def _l1_sum(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    return T.tsum(T.absval(T.sub(pred, target)))


def loss_blend(i_blend: Tensor, i_gt: Tensor) -> Tensor:
    return _l1_sum(i_blend, i_gt)


def loss_refine(i_refine: Tensor, i_gt: Tensor) -> Tensor:
    return _l1_sum(i_refine, i_gt)


def loss_total(l_blend: Tensor, l_refine: Tensor) -> Tensor:
    return T.add(l_blend, T.mul(l_refine, REFINE_WEIGHT))
