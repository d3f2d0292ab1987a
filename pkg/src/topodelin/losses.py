"""Pixel-wise, topology-aware, combined, and refinement losses.

The pixel term is standard binary cross-entropy.  The topology term is the
squared distance between frozen descriptor stacks of the ground truth and
of the prediction, summed over selected layers and channels; it flows
gradients to the prediction only.  A combined loss weights the two with a
scalar mu, and the refinement loss averages per-iteration combined losses
with weights k/Z, Z = K(K+1)/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor


@dataclass(frozen=True)
class LossConfig:
    """Shared knobs of the pixel and topology terms.

    reduction "sum" reproduces the bare printed sums; "mean" divides each
    term by its total element count (keeping the relative weighting of
    descriptor layers untouched); "layer-mean" divides each descriptor
    layer by its own element count, which re-weights coarse layers upward.
    """
    mu: float = 0.1
    reduction: str = "mean"
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.reduction not in ("mean", "sum", "layer-mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if not 0 < self.clamp_eps <= 1e-3:
            raise ValueError(f"clamp_eps out of (0, 1e-3]: {self.clamp_eps}")


@dataclass
class PartialLossRecord:
    """Logged decomposition of one refinement iteration's combined loss."""
    k: int
    value: float
    bce: float
    topo: float


def _check_pair(pred, gt):
    if not isinstance(pred, Tensor) or not isinstance(gt, Tensor):
        raise TypeError("losses expect engine Tensors")
    if pred.shape != gt.shape:
        raise engine.ShapeError(
            f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    gdata = gt.data
    if not np.all((gdata == 0) | (gdata == 1)):
        raise ValueError("ground truth must be binary (0/1)")
    pdata = pred.data
    if pdata.min() < 0 or pdata.max() > 1:
        raise ValueError("prediction values must lie in [0, 1]")


def bce(pred, gt, config=LossConfig()):
    """Binary cross-entropy, clamped away from log singularities.

    Computed as -sum(log q) with q the probability assigned to the true
    class, and reduced with exact (order-independent) summation: mirrored
    per-pixel errors produce bit-identical terms, so predictions whose
    errors are permutations of one another score exactly equal.
    """
    _check_pair(pred, gt)
    eps = config.clamp_eps
    true_class_p = gt * pred + (1.0 - gt) * (1.0 - pred)
    q = engine.clamp(true_class_p, eps, 1.0 - eps)
    total = engine.neg(engine.sum_all(engine.log(q), exact=True))
    if config.reduction != "sum":
        total = total * (1.0 / pred.size)
    return total


def topo_loss(pred, gt, extractor, config=LossConfig(), gt_stack=None):
    """Squared distance between descriptor stacks of gt and prediction.

    The ground truth's stack may be passed in precomputed (it is constant
    across refinement iterations).
    """
    _check_pair(pred, gt)
    if gt_stack is None:
        gt_stack = extractor.describe(Tensor(gt.data, _check=False))
    pred_stack = extractor.describe(pred)
    total = None
    n_elements = 0
    for pl, gl in zip(pred_stack, gt_stack):
        term = engine.squared_l2(pl.map - gl.map)
        n_elements += pl.map.size
        if config.reduction == "layer-mean":
            term = term * (1.0 / pl.map.size)
        total = term if total is None else total + term
    if config.reduction == "mean":
        total = total * (1.0 / n_elements)
    return total


def combined_loss(pred, gt, extractor, config=LossConfig(), k=0, gt_stack=None):
    """bce + mu * topo; returns the scalar and its logged decomposition.

    mu == 0 skips the descriptor passes entirely (the topology part is
    exactly zero by the loss definition).
    """
    bce_term = bce(pred, gt, config)
    if config.mu == 0.0:
        record = PartialLossRecord(k=k, value=bce_term.item(),
                                   bce=bce_term.item(), topo=0.0)
        return bce_term, record
    topo_term = topo_loss(pred, gt, extractor, config, gt_stack=gt_stack)
    total = bce_term + config.mu * topo_term
    record = PartialLossRecord(k=k, value=total.item(), bce=bce_term.item(),
                               topo=topo_term.item())
    return total, record


def weighted_partial_sum(partials):
    """(1/Z) * sum_k k * L_k over loss tensors for k = 1..K."""
    k_final = len(partials)
    if k_final < 1:
        raise ValueError("need at least one partial loss")
    z = k_final * (k_final + 1) / 2.0
    total = None
    for k, loss in enumerate(partials, start=1):
        term = loss * (k / z)
        total = term if total is None else total + term
    return total


def refinement_loss(records):
    """Iteration-weighted average of logged partial losses (k = 1..K)."""
    if not records:
        raise ValueError("no partial loss records")
    ks = [r.k for r in records]
    if ks != list(range(1, len(records) + 1)):
        raise ValueError(f"records must cover k = 1..K contiguously, got {ks}")
    z = len(records) * (len(records) + 1) / 2.0
    return sum(r.k * r.value for r in records) / z
