"""Classification heads and the loss family: plain BCE, positive-weighted
BCE for class imbalance, multi-label focal loss, and 7-way cross-entropy.

All BCE variants run through the fused stable log-sigmoid form, so extreme
logits never overflow. The positive weight w_c = negatives_c / positives_c
multiplies only the positive term: with more negatives than positives it
pushes recall up, and precision in the opposite situation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import ClassStats
from .encoder import ModelConfig, init_parameter
from .errors import ContractError
from .tensor import ParameterStore, Tensor

REDUCTIONS = ("batch-mean", "sum")


@dataclass
class PosWeights:
    """Per-class positive-term weights derived from training-split counts."""
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)) or np.any(self.w < 0):
            raise ContractError("positive weights must be finite and nonnegative")


def head_param_shapes(config: ModelConfig, task: str,
                      num_labels: int) -> Iterator[tuple[str, tuple[int, ...]]]:
    h = config.hidden_size
    p = f"heads.{task}"
    yield f"{p}.dense.weight", (h, h)
    yield f"{p}.dense.bias", (h,)
    yield f"{p}.out.weight", (h, num_labels)
    yield f"{p}.out.bias", (num_labels,)


def init_head_params(config: ModelConfig, store: ParameterStore, task: str,
                     num_labels: int, rng: np.random.Generator) -> None:
    if num_labels not in (1, 6, 7):
        raise ContractError(f"num_labels must be 1, 6, or 7, got {num_labels}")
    for name, shape in head_param_shapes(config, task, num_labels):
        init_parameter(store, name, shape, rng)


def head_forward(config: ModelConfig, params: ParameterStore, task: str,
                 cls_state: Tensor) -> Tensor:
    """Two linear layers with a tanh between: logits = tanh(x W1 + b1) W2 + b2."""
    p = f"heads.{task}"
    hid = T.tanh(T.add_bias(T.matmul(cls_state, params[f"{p}.dense.weight"]),
                            params[f"{p}.dense.bias"]))
    return T.add_bias(T.matmul(hid, params[f"{p}.out.weight"]),
                      params[f"{p}.out.bias"])


def pos_weights(stats: ClassStats, cap: float | None = None) -> PosWeights:
    """w_c = negatives_c / positives_c; zero-positive classes get ``cap``
    (default: split size) and a warning."""
    if cap is None:
        cap = float(stats.total)
    w = np.empty(len(stats.labels), dtype=np.float64)
    for i, label in enumerate(stats.labels):
        pos = float(stats.positives[i])
        if pos == 0.0:
            warnings.warn(
                f"class {label!r} has no positive training samples; "
                f"capping its positive weight at {cap}", RuntimeWarning,
                stacklevel=2)
            w[i] = cap
        else:
            w[i] = float(stats.negatives[i]) / pos
    return PosWeights(w=w)


def _check_binary_targets(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ContractError(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ContractError("targets must be 0/1")
    return targets


def _reduce(total_neg_sum: Tensor, batch_size: int, reduction: str) -> Tensor:
    if reduction == "batch-mean":
        return T.scale(total_neg_sum, 1.0 / batch_size)
    if reduction == "sum":
        return total_neg_sum
    raise ContractError(f"unknown reduction {reduction!r}")


def weighted_bce(logits: Tensor, targets: np.ndarray, weights: PosWeights,
                 reduction: str = "batch-mean") -> Tensor:
    """Sum over classes of -[w_c y log sigma(x) + (1-y) log sigma(-x)],
    then mean over the batch (or a plain double sum with reduction="sum")."""
    y = _check_binary_targets(logits, targets)
    w = np.asarray(weights.w, dtype=np.float64)
    if w.shape != (logits.shape[-1],):
        raise ContractError(
            f"weights length {w.shape} does not match {logits.shape[-1]} classes")
    coef_pos = T.constant(w * y)
    coef_neg = T.constant(1.0 - y)
    pos_term = T.mul(coef_pos, T.log_sigmoid(logits))
    neg_term = T.mul(coef_neg, T.log_sigmoid(T.neg(logits)))
    total = T.neg(T.sum_all(T.add(pos_term, neg_term)))
    return _reduce(total, logits.shape[0], reduction)


def bce(logits: Tensor, targets: np.ndarray,
        reduction: str = "batch-mean") -> Tensor:
    """weighted_bce with w identically 1."""
    ones = PosWeights(w=np.ones(logits.shape[-1]))
    return weighted_bce(logits, targets, ones, reduction=reduction)


def focal_multilabel(logits: Tensor, targets: np.ndarray, gamma: float = 2.0,
                     alpha: float | None = None,
                     reduction: str = "batch-mean") -> Tensor:
    """-alpha_t (1 - p_t)^gamma log(p_t) per element, p_t = sigma(x) when
    y = 1 and 1 - sigma(x) otherwise; gamma = 0 recovers plain BCE."""
    if gamma < 0:
        raise ContractError(f"gamma must be nonnegative, got {gamma}")
    if alpha is not None and not 0.0 < alpha <= 1.0:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    y = _check_binary_targets(logits, targets)
    sign = T.constant(2.0 * y - 1.0)
    t = T.mul(sign, logits)                       # log p_t = log sigma(t)
    damp = T.pow_const(T.sigmoid(T.neg(t)), gamma)  # (1 - p_t)^gamma
    elems = T.mul(damp, T.log_sigmoid(t))
    if alpha is not None:
        elems = T.mul(T.constant(alpha * y + (1.0 - alpha) * (1.0 - y)), elems)
    total = T.neg(T.sum_all(elems))
    return _reduce(total, logits.shape[0], reduction)


def cross_entropy_7(logits: Tensor, target_ids: np.ndarray,
                    reduction: str = "batch-mean") -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    ids = np.asarray(target_ids)
    k = logits.shape[-1]
    if ids.shape != (logits.shape[0],):
        raise ContractError(
            f"target ids shape {ids.shape} does not match batch {logits.shape[0]}")
    if np.any(ids < 0) or np.any(ids >= k):
        raise ContractError(f"target id out of range [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(ids)), ids] = 1.0
    picked = T.mul(T.log_softmax(logits, axis=1), T.constant(onehot))
    total = T.neg(T.sum_all(picked))
    return _reduce(total, logits.shape[0], reduction)


LOSS_NAMES = ("bce", "weighted_bce", "focal")


def multilabel_loss(name: str, logits: Tensor, targets: np.ndarray,
                    weights: PosWeights | None = None,
                    gamma: float = 2.0, alpha: float | None = None,
                    reduction: str = "batch-mean") -> Tensor:
    """Select a loss by configuration key."""
    if name == "bce":
        return bce(logits, targets, reduction=reduction)
    if name == "weighted_bce":
        if weights is None:
            raise ContractError("weighted_bce needs positive weights")
        return weighted_bce(logits, targets, weights, reduction=reduction)
    if name == "focal":
        return focal_multilabel(logits, targets, gamma=gamma, alpha=alpha,
                                reduction=reduction)
    raise ContractError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
