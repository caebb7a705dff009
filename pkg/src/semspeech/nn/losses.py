"""Training objectives: masked NLL, masked cross-entropy, InfoNCE, MSE."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor, concat, gather_last, log_softmax


def nll_loss(logits: Tensor, targets: np.ndarray, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood of targets; PAD positions are masked out."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValidationError(
            f"target shape {targets.shape} does not match logits {logits.shape[:-1]}",
            field="targets",
        )
    vocab = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValidationError(f"target id outside vocabulary of size {vocab}", field="targets")
    mask = targets != pad_id
    n_live = int(mask.sum())
    if n_live == 0:
        raise ValidationError("all target positions are PAD", field="targets")
    logp = gather_last(log_softmax(logits, axis=-1), targets)
    return -(logp * Tensor(mask.astype(np.float64))).sum() * (1.0 / n_live)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over exactly the positions where mask is True."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValidationError("logits, targets, and mask shapes must agree", field="mask")
    n_live = int(mask.sum())
    if n_live == 0:
        raise ValidationError("mask selects no positions", field="mask")
    vocab = logits.shape[-1]
    safe = np.where(mask, targets, 0)
    if safe.min() < 0 or safe.max() >= vocab:
        raise ValidationError(f"target id outside vocabulary of size {vocab}", field="targets")
    logp = gather_last(log_softmax(logits, axis=-1), safe)
    return -(logp * Tensor(mask.astype(np.float64))).sum() * (1.0 / n_live)


def mse(z: Tensor, target: Tensor) -> Tensor:
    if z.shape != target.shape:
        raise ValidationError(
            f"shape mismatch {z.shape} vs {target.shape}", field="target"
        )
    diff = z - target
    return (diff * diff).mean()


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    norms_sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(norms_sq.data == 0.0):
        raise ValidationError(f"zero-norm vector in {what}", field=what)
    return x / norms_sq.sqrt()


def infonce(z: Tensor, pos: Tensor, negatives: list[Tensor], tau: float = 0.05) -> Tensor:
    """-log( e^{cos(z,pos)/tau} / (e^{cos(z,pos)/tau} + sum_j e^{cos(z,neg_j)/tau}) )."""
    if tau <= 0:
        raise ValidationError("tau must be > 0", field="tau")
    if not negatives:
        raise ValidationError("at least one negative is required", field="negatives")
    zn = _normalize_rows(z.reshape(1, -1), "z")
    others = concat([pos.reshape(1, -1)] + [n.reshape(1, -1) for n in negatives], axis=0)
    on = _normalize_rows(others, "pos/negatives")
    sims = (zn @ on.transpose(1, 0)).reshape(-1) * (1.0 / tau)
    return -log_softmax(sims, axis=-1)[0]


def infonce_batch(
    anchors: Tensor,
    positives: Tensor,
    tau: float = 0.05,
    bank: Tensor | None = None,
) -> Tensor:
    """Mean InfoNCE over a batch: positives[i] pairs with anchors[i]; the
    denominator for row i holds its positive, the other in-batch positives,
    and every bank entry."""
    if tau <= 0:
        raise ValidationError("tau must be > 0", field="tau")
    b = anchors.shape[0]
    if positives.shape != anchors.shape:
        raise ValidationError("anchors and positives must share a shape", field="positives")
    if b < 2 and (bank is None or bank.shape[0] == 0):
        raise ValidationError(
            "no negatives: batch of 1 with an empty bank", field="negatives"
        )
    an = _normalize_rows(anchors, "anchors")
    pn = _normalize_rows(positives, "positives")
    cols = pn
    if bank is not None and bank.shape[0] > 0:
        cols = concat([pn, _normalize_rows(bank, "bank")], axis=0)
    sims = (an @ cols.transpose(1, 0)) * (1.0 / tau)
    logp = log_softmax(sims, axis=-1)
    picked = gather_last(logp, np.arange(b))
    return -picked.mean()
