"""Composite objective: confidence-weighted regression minus a log-confidence reward.

    L_d = sum_i || CM_i * Y_i - CM_i * Yhat_i ||        i in {3, 4, 5, 6}
    L_c = sum_i sum_{j,k} log CM_i[j, k]
    L_f = L_d - lambda_c * L_c

CM_6 is the constant 1, so the coarsest scale contributes a plain norm to
L_d and nothing to L_c. Scales missing from the inputs (e.g. the base
network supervises only scale 6) are skipped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 1.0
    squared_norm: bool = False
    batch_reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.lambda_c) or self.lambda_c < 0:
            raise ValueError(f"lambda_c must be finite and >= 0, got {self.lambda_c}")
        if self.batch_reduction not in ("mean", "sum"):
            raise ValueError(f"batch_reduction must be 'mean' or 'sum', got {self.batch_reduction!r}")


@dataclass
class LossTerms:
    l_f: Tensor
    l_d: Tensor
    l_c: Tensor


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce(per_sample: Tensor, n: int, reduction: str) -> Tensor:
    total = ops.sum_all(per_sample)
    return ops.scale(total, 1.0 / n) if reduction == "mean" else total


def _batched(x: Tensor) -> bool:
    return x.data.ndim == 4


def loss_d(preds: dict, targets: dict, cms: dict | None = None, config: LossConfig = LossConfig()) -> Tensor:
    """Confidence-weighted per-scale norm, summed over scales.

    ``preds``/``targets`` map scale index to maps shaped (1, h, w) or
    (N, 1, h, w); ``cms`` holds CM_i where present, absent scales use 1.
    """
    cms = cms or {}
    total = None
    n = 1
    for i in sorted(preds, reverse=True):
        if i not in targets:
            raise ShapeError(f"no target for scale {i}")
        yhat, y = _t(preds[i]), _t(targets[i])
        if yhat.shape != y.shape:
            raise ShapeError(f"scale {i}: prediction {yhat.shape} vs target {y.shape}")
        diff = ops.sub(y, yhat)
        if i in cms:
            cm = _t(cms[i])
            if cm.shape != y.shape:
                raise ShapeError(f"scale {i}: confidence {cm.shape} vs target {y.shape}")
            # CM*Y - CM*Yhat, written as in the objective
            diff = ops.sub(ops.mul(cm, y), ops.mul(cm, yhat))
        batched = _batched(diff)
        n = diff.shape[0] if batched else 1
        term = ops.frobenius_norm(diff, per_sample=batched)
        if config.squared_norm:
            term = ops.mul(term, term)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ShapeError("loss_d needs at least one scale")
    return _reduce(total, n, config.batch_reduction)


def loss_c(cms: dict, config: LossConfig = LossConfig()) -> Tensor:
    """Sum of log-confidences over all pixels and residual scales (always <= 0)."""
    total = None
    n = 1
    for i in sorted(cms, reverse=True):
        cm = _t(cms[i])
        if np.any(cm.data <= 0) or np.any(cm.data > 1):
            raise DomainError(f"CM_{i} must lie in (0, 1]; got range [{cm.data.min()}, {cm.data.max()}]")
        batched = _batched(cm)
        n = cm.shape[0] if batched else 1
        term = ops.sum_all(ops.log(cm), per_sample=batched)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return _reduce(total, n, config.batch_reduction)


def loss_f(preds: dict, targets: dict, cms: dict | None, config: LossConfig = LossConfig()) -> LossTerms:
    ld = loss_d(preds, targets, cms, config)
    lc = loss_c(cms or {}, config)
    if config.lambda_c == 0:
        lf = ld
    else:
        if lc.dtype != ld.dtype:
            lc = Tensor(lc.data.astype(ld.dtype)) if lc.record is None else lc
        lf = ops.sub(ld, ops.scale(lc, config.lambda_c))
    return LossTerms(lf, ld, lc)


def model_loss(outputs, targets: dict, config: LossConfig = LossConfig()) -> LossTerms:
    """L_f over a forward pass; ``targets`` maps scale index to target arrays."""
    preds = outputs.predictions
    tgt = {i: _match(targets[i], preds[i]) for i in preds}
    return loss_f(preds, tgt, outputs.confidences, config)


def _match(target, pred: Tensor) -> Tensor:
    arr = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    return Tensor(arr.reshape(pred.shape))
