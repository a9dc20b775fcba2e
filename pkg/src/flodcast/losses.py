"""BerHu (reverse Huber) regression losses with a per-batch threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgumentError

THRESHOLD_FRACTION = 0.2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # flow
    beta: float = 1.0  # depth

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise InvalidArgumentError("loss weights must be >= 0 and not both zero")


def berhu_threshold(residuals: torch.Tensor, per_sample: bool = False) -> torch.Tensor:
    """c = 0.2 * max|x|, over the whole batch or per leading-axis sample. Not differentiated."""
    a = residuals.detach().abs()
    if per_sample:
        c = a.reshape(a.shape[0], -1).amax(dim=1).view(-1, *([1] * (a.ndim - 1)))
    else:
        c = a.max()
    return THRESHOLD_FRACTION * c


def berhu_elementwise(x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """|x| where |x| <= c, (x^2 + c^2) / 2c elsewhere."""
    a = x.abs()
    safe_c = torch.where(c > 0, c, torch.ones_like(c))
    # (x^2 + c^2) / 2c, arranged so tiny residuals do not underflow
    return torch.where(a <= c, a, 0.5 * (a * (a / safe_c) + safe_c))


def berhu(residuals, per_sample: bool = False):
    """Mean BerHu loss of ``prediction - target`` residuals.

    Returns a tensor for tensor input and a float for array input. An all-zero
    batch gives exactly 0.
    """
    as_float = not isinstance(residuals, torch.Tensor)
    x = torch.from_numpy(np.array(residuals, dtype=np.float64, order="C")) if as_float else residuals
    if x.numel() == 0:
        raise InvalidArgumentError("berhu needs at least one residual")
    loss = berhu_elementwise(x, berhu_threshold(x, per_sample)).mean()
    return float(loss) if as_float else loss


def _check(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise InvalidArgumentError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")


def flow_loss(pred_flows, gt_flows, per_sample: bool = False):
    _check(pred_flows, gt_flows)
    return berhu(pred_flows - gt_flows, per_sample)


def depth_loss(pred_depths, gt_depths, per_sample: bool = False):
    _check(pred_depths, gt_depths)
    return berhu(pred_depths - gt_depths, per_sample)


def _pair(block):
    if hasattr(block, "flows"):
        return block.flows, block.depths
    return block


def loss_terms(pred, gt, w: LossWeights = LossWeights(), per_sample: bool = False):
    """``(total, flow, depth)`` for ``(flows, depths)`` pairs or prediction blocks.

    A term with zero weight is not evaluated at all, so its head gets no
    gradient; it is reported as 0.
    """
    pf, pd = _pair(pred)
    gf, gd = _pair(gt)
    zero = pf.new_zeros(()) if isinstance(pf, torch.Tensor) else 0.0
    lf = flow_loss(pf, gf, per_sample) if w.alpha > 0 else zero
    ld = depth_loss(pd, gd, per_sample) if w.beta > 0 else zero
    return w.alpha * lf + w.beta * ld, lf, ld


def total_loss(pred, gt, w: LossWeights = LossWeights(), per_sample: bool = False):
    return loss_terms(pred, gt, w, per_sample)[0]
