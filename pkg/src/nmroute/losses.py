"""Training losses: weighted reconstruction, entropy, cost, and their sum.

Probability inputs are batches (B, L) on the simplex (a single (L,) vector
is promoted to B=1). All losses are mean-reduced over the batch so loss
weights stay independent of batch size and patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, absolute, clamp_min, column, log, log_softmax, pick, reshape, tmean, tsum

ENTROPY_CLAMP = 1e-12
SIMPLEX_TOL = 1e-4


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined loss: w1*reconstruction + w2*entropy + w3*cost."""

    w1: float = 1.0
    w2: float = 0.05
    w3: float = 0.1

    def __post_init__(self):
        if self.w1 <= 0:
            raise ContractError("reconstruction weight w1 must be positive")
        if self.w2 < 0 or self.w3 < 0:
            raise ContractError("loss weights must be non-negative")


def _as_batched_probs(p) -> Tensor:
    t = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    if t.ndim == 1:
        t = reshape(t, (1, t.shape[0]))
    if t.ndim != 2:
        raise ShapeError(f"probabilities must be (L,) or (B, L), got {t.shape}")
    data = t.data
    if (data < -SIMPLEX_TOL).any() or (np.abs(data.sum(axis=1) - 1.0) > SIMPLEX_TOL).any():
        raise ContractError("probability vector is off the simplex beyond tolerance")
    return t


def entropy_loss(p) -> Tensor:
    """Mean Shannon entropy of the probability rows (natural log).

    Zero entries contribute zero (the log is clamped at 1e-12 for stability).
    """
    t = _as_batched_probs(p)
    per_sample = tsum(t * log(clamp_min(t, ENTROPY_CLAMP)), axis=1)
    return tmean(per_sample) * -1.0


def cost_loss(p, costs) -> Tensor:
    """Mean expected branch overhead: sum_i p_i * C_i."""
    t = _as_batched_probs(p)
    c = np.asarray(costs, dtype=t.data.dtype)
    if c.shape != (t.shape[1],):
        raise ShapeError(f"{t.shape[1]} branches but {c.shape} costs")
    return tmean(tsum(t * Tensor(c[None, :]), axis=1))


def weighted_l1(p, outputs, target) -> Tensor:
    """Probability-weighted mean-L1 reconstruction loss over all branches.

    ``outputs`` is the list of per-branch restorations, each shaped like
    ``target`` (B, C, H, W). Gradients flow to both the branch outputs and
    the probabilities. Per-branch L1 is mean-reduced over pixels.
    """
    t = _as_batched_probs(p)
    if len(outputs) != t.shape[1]:
        raise ShapeError(f"{t.shape[1]} probability columns but {len(outputs)} branch outputs")
    x = target if isinstance(target, Tensor) else Tensor(target)
    total = None
    for i, out in enumerate(outputs):
        if out.shape != x.shape:
            raise ShapeError(f"branch {i} output shape {out.shape} != target {x.shape}")
        per_sample = tmean(absolute(out - x), axis=tuple(range(1, x.ndim)))
        term = column(t, i) * per_sample
        total = term if total is None else total + term
    return tmean(total)


def final_loss(lw, le, lc, weights: LossWeights) -> Tensor:
    """Weighted sum of the three loss components."""
    return lw * weights.w1 + le * weights.w2 + lc * weights.w3


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood from logits (stable log-softmax form)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, L), got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} rows but {y.shape[0]} labels")
    if (y < 0).any() or (y >= logits.shape[1]).any():
        raise ContractError("label out of range")
    lp = log_softmax(logits, axis=1)
    picked = pick(lp, np.arange(y.shape[0]), y)
    return tmean(picked) * -1.0
