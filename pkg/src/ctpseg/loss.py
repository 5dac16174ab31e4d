"""Tversky index and focal Tversky loss.

The Tversky index generalizes the Dice coefficient with asymmetric
penalties: ``alpha`` weights false negatives and ``beta`` false
positives, so ``alpha = beta = 0.5`` recovers soft Dice.  The focal
variant raises each class's deficit to ``1/gamma``, sharpening the
penalty on classes that are nearly solved while keeping hard, small
structures (core) dominant in the objective.

Sums are pooled over the whole batch rather than per image: with batch
size 2 a slice frequently lacks one of the lesion classes, and batch
pooling keeps the per-class terms well conditioned.

Severity handling: samples from the Non-LVO group carry a configurable
multiplier on the penumbra and core terms.  For a mixed batch the
multiplier is applied in proportion to the fraction of Non-LVO samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from ctpseg.data import CORE, PENUMBRA, SeverityGroup

NUM_CLASSES = 3

# Runtime guard on per-pixel probability sums.  The caller contract is
# 1e-5; the looser guard leaves room for finite-difference probes.
_ROW_SUM_TOLERANCE = 1e-3

# The 1/gamma exponent has unbounded slope at a zero deficit, so a class
# that becomes perfect mid-training produces infinite gradients.  The
# power is evaluated on (deficit + shift) with the constant offset
# subtracted: values move by < shift**(1/gamma) ~ 1e-9, a perfect class
# still contributes exactly 0, and the gamma = 1 case is untouched.
_POW_SHIFT = 1e-12


class LossInputError(ValueError):
    pass


@dataclass
class LossSpec:
    """Focal Tversky hyper-parameters and per-class weighting."""

    gamma: float = 4.0 / 3.0
    alpha: float = 0.7
    beta: float = 0.3
    epsilon: float = 1e-6
    class_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    nonlvo_multiplier: float = 1.5

    def __post_init__(self):
        if not 1.0 <= self.gamma <= 3.0:
            raise LossInputError(f"gamma must be in [1, 3], got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossInputError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise LossInputError(f"beta must be in [0, 1], got {self.beta}")
        if self.epsilon <= 0.0:
            raise LossInputError(f"epsilon must be positive, got {self.epsilon}")
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != NUM_CLASSES or any(
            w <= 0 for w in self.class_weights
        ):
            raise LossInputError("class_weights must be 3 positive reals")
        if self.nonlvo_multiplier < 1.0:
            raise LossInputError(
                f"nonlvo_multiplier must be >= 1, got {self.nonlvo_multiplier}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "LossSpec":
        kwargs = dict(raw)
        if "class_weights" in kwargs:
            kwargs["class_weights"] = tuple(kwargs["class_weights"])
        return cls(**kwargs)


def one_hot(labels: np.ndarray | torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """Integer label array -> one-hot along a new trailing axis."""
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    return torch.nn.functional.one_hot(labels.long(), num_classes=num_classes)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _validate(probs: torch.Tensor, onehot_gt: torch.Tensor) -> None:
    if probs.shape != onehot_gt.shape:
        raise LossInputError(
            f"probs shape {tuple(probs.shape)} != ground truth shape {tuple(onehot_gt.shape)}"
        )
    if probs.shape[-1] != NUM_CLASSES:
        raise LossInputError(f"last axis must have {NUM_CLASSES} classes")
    with torch.no_grad():
        if probs.min() < -1e-9 or probs.max() > 1.0 + 1e-9:
            raise LossInputError("probabilities outside [0, 1]")
        row_err = (probs.sum(dim=-1) - 1.0).abs().max()
        if row_err > _ROW_SUM_TOLERANCE:
            raise LossInputError(
                f"per-pixel probabilities sum to 1 +/- {float(row_err):.2e}"
            )


def tversky_index(
    probs,
    onehot_gt,
    class_index: int,
    alpha: float,
    beta: float,
    epsilon: float = 1e-6,
) -> torch.Tensor:
    """Smoothed Tversky index for one class, pooled over all pixels.

    (sum p*g + eps) / (sum p*g + alpha*sum (1-p)*g + beta*sum p*(1-g) + eps)
    """
    probs = _as_tensor(probs)
    onehot_gt = _as_tensor(onehot_gt).to(probs.dtype)
    _validate(probs, onehot_gt)
    p = probs[..., class_index]
    g = onehot_gt[..., class_index]
    tp = (p * g).sum()
    fn = ((1.0 - p) * g).sum()
    fp = (p * (1.0 - g)).sum()
    return (tp + epsilon) / (tp + alpha * fn + beta * fp + epsilon)


def _class_weights(
    spec: LossSpec,
    group: SeverityGroup | Sequence[SeverityGroup],
    dtype: torch.dtype,
) -> torch.Tensor:
    if isinstance(group, SeverityGroup):
        nonlvo_fraction = 1.0 if group is SeverityGroup.NON_LVO else 0.0
    else:
        groups = list(group)
        if not groups:
            raise LossInputError("empty group sequence")
        nonlvo_fraction = sum(g is SeverityGroup.NON_LVO for g in groups) / len(groups)
    mult = 1.0 + nonlvo_fraction * (spec.nonlvo_multiplier - 1.0)
    weights = list(spec.class_weights)
    weights[PENUMBRA] *= mult
    weights[CORE] *= mult
    return torch.tensor(weights, dtype=dtype)


def focal_tversky_loss(
    probs,
    onehot_gt,
    spec: LossSpec,
    group: SeverityGroup | Sequence[SeverityGroup] = SeverityGroup.LVO,
) -> torch.Tensor:
    """sum_c w_c * (1 - TI_c)^(1/gamma), differentiable in probs.

    ``group`` may be a single severity group for the whole batch or one
    group per sample (leading axis); Non-LVO samples scale the penumbra
    and core weights by ``spec.nonlvo_multiplier``.
    """
    probs = _as_tensor(probs)
    onehot_gt = _as_tensor(onehot_gt).to(probs.dtype)
    _validate(probs, onehot_gt)
    if not isinstance(group, SeverityGroup) and len(list(group)) != probs.shape[0]:
        raise LossInputError(
            f"got {len(list(group))} groups for batch of {probs.shape[0]}"
        )
    weights = _class_weights(spec, group, probs.dtype)
    exponent = 1.0 / spec.gamma
    loss = probs.new_zeros(())
    for c in range(NUM_CLASSES):
        ti = tversky_index(probs, onehot_gt, c, spec.alpha, spec.beta, spec.epsilon)
        deficit = (1.0 - ti).clamp_min(0.0)
        focal = (deficit + _POW_SHIFT) ** exponent - _POW_SHIFT**exponent
        loss = loss + weights[c] * focal
    return loss
