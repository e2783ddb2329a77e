"""Class-balanced Dice loss, scale fusion and the multi-scale Dice loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _result, add, scale

# Guards the per-class denominator when a class is absent from both maps.
DICE_EPS = 1e-10


def _sums(pred: np.ndarray, gt: np.ndarray):
    """Per-(sample, class) sums over pixels: sum pred^2, sum gt^2, sum (pred-gt)^2."""
    axes = (2, 3)
    return (np.sum(pred * pred, axis=axes), np.sum(gt * gt, axis=axes),
            np.sum((pred - gt) ** 2, axis=axes))


def alpha_weight(pred, gt, k: int, eps: float = DICE_EPS) -> float:
    """Balancing weight of class ``k``: ``1 / (K * (sum pred^2 + sum gt^2 + eps))``.

    Accepts NCHW arrays or tensors; sums run over every pixel of every sample.
    """
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=float)
    y = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=float)
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {y.shape} differ")
    n_classes = p.shape[1]
    return 1.0 / (n_classes * (np.sum(p[:, k] ** 2) + np.sum(y[:, k] ** 2) + eps))


def dice_loss(pred: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Weighted squared error ``sum_k alpha_k * sum_i (pred_ik - gt_ik)^2``.

    The gradient differentiates through the prediction-dependent weights
    ``alpha_k``. With batch size above one the per-sample losses are averaged.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.data.ndim != 4:
        raise ShapeError(f"dice_loss expects NCHW maps, got {pred.shape}")
    p, y = pred.data, gt.data
    n, k = p.shape[:2]
    sp, sy, se = _sums(p, y)
    denom = sp + sy + eps
    loss = np.sum(se / denom) / (k * n)

    def grad_fn(g):
        d = denom[:, :, None, None]
        e = se[:, :, None, None]
        dp = (2 * (p - y) / d - 2 * p * e / d ** 2) * (g.item() / (k * n))
        return dp, None

    out = np.full((1, 1, 1, 1), loss, dtype=p.dtype)
    return _result(out, (pred, gt), grad_fn, "dice_loss")


def fuse_scales(preds: Sequence[Tensor], w: Tensor) -> Tensor:
    """Weighted sum ``sum_j w_j * pred_j`` with one scalar per scale.

    Equivalent to a bias-free 1x1 convolution over the scale-stacked maps
    whose weight is shared across class channels.
    """
    if len(preds) == 0:
        raise ShapeError("fuse_scales needs at least one prediction")
    if w.shape != (len(preds),):
        raise ShapeError(f"fusion weights have shape {w.shape}, expected ({len(preds)},)")
    ref = preds[0].shape
    for q in preds[1:]:
        if q.shape != ref:
            raise ShapeError(f"all scale predictions must share a shape, got {ref} and {q.shape}")
    datas = [q.data for q in preds]
    out = sum(wj * d for wj, d in zip(w.data, datas))

    def grad_fn(g):
        gw = np.array([np.sum(g * d) for d in datas], dtype=g.dtype)
        return tuple(g * wj for wj in w.data) + (gw,)

    return _result(out, tuple(preds) + (w,), grad_fn, "fuse_scales")


@dataclass
class MSDLConfig:
    scales: int
    lambda_bar: float = 1.0
    lambdas: Optional[list[float]] = None
    eps: float = DICE_EPS

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("MSDL needs at least one scale")
        if self.lambdas is None:
            self.lambdas = [1.0] * self.scales
        if len(self.lambdas) != self.scales:
            raise ValueError(f"{len(self.lambdas)} per-scale weights for {self.scales} scales")


def msdl(preds: Sequence[Tensor], fused: Tensor, gt: Tensor, cfg: MSDLConfig):
    """Multi-scale Dice loss.

    Returns ``(total, terms)`` where ``terms[0]`` is the unweighted fused-map
    loss and ``terms[1:]`` the unweighted per-scale losses, finest first.
    """
    if len(preds) != cfg.scales:
        raise ValueError(f"config expects {cfg.scales} scales, got {len(preds)} predictions")
    terms = [dice_loss(fused, gt, cfg.eps)] + [dice_loss(q, gt, cfg.eps) for q in preds]
    weights = [cfg.lambda_bar] + list(cfg.lambdas)
    total = None
    for lam, term in zip(weights, terms):
        part = term if lam == 1.0 else scale(term, lam)
        total = part if total is None else add(total, part)
    return total, terms
