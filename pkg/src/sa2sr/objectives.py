"""Training losses: CTC, sentiment cross-entropy, their weighted
combination, and the concordance correlation coefficient objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

NEG_INF = -1e30  # finite stand-in for log(0); vanishes inside logaddexp

CCC_DENOM_FLOOR = 1e-8


@dataclass
class LossValue:
    """A differentiable total plus detached per-component values."""

    total: DiffArray
    components: dict[str, float]


def min_frames_for_target(targets: Sequence[int]) -> int:
    """Fewest frames that can emit the target: one per label plus a blank
    between each adjacent repeat.
    """
    repeats = sum(1 for i in range(1, len(targets)) if targets[i] == targets[i - 1])
    return len(targets) + repeats


def ctc_loss(log_probs: DiffArray, targets: Sequence[int], mask=None) -> DiffArray:
    """Negative log-probability of all blank-augmented alignments.

    Log-space forward recursion over the extended label sequence of
    length 2 * |targets| + 1; the blank is the last vocabulary index.
    Gradients flow to log_probs through the recursion graph.
    """
    t_total, vocab = log_probs.shape
    blank = vocab - 1
    targets = list(targets)
    if any(t == blank for t in targets):
        raise ValueError("ctc_loss: target contains the blank symbol")
    if any(not 0 <= t < vocab for t in targets):
        raise ValueError(f"ctc_loss: target id out of range for vocab {vocab}")

    if mask is None:
        valid = log_probs
        t_valid = t_total
    else:
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        t_valid = idx.size
        valid = ad.take(log_probs, idx, axis=0) if t_valid != t_total else log_probs
    if t_valid < max(min_frames_for_target(targets), 1):
        raise ValueError(
            f"target unalignable: {t_valid} frames for {len(targets)} labels"
        )

    ext = np.empty(2 * len(targets) + 1, dtype=np.intp)
    ext[0::2] = blank
    ext[1::2] = targets
    s_total = ext.size

    emissions = ad.take(valid, ext, axis=1)  # T x S

    # alpha can skip from s-2 only onto a fresh non-blank label
    allow_skip = np.zeros(s_total)
    allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    skip_penalty = ad.constant(np.where(allow_skip > 0, 0.0, NEG_INF))
    allow_skip = ad.constant(allow_skip)

    start = np.full(s_total, NEG_INF)
    start[0] = 0.0
    if s_total > 1:
        start[1] = 0.0
    alpha = ad.add(emissions[0], ad.constant(start))

    pad1 = ad.constant(np.full(1, NEG_INF))
    pad2 = ad.constant(np.full(2, NEG_INF))
    for t in range(1, t_valid):
        stay = alpha
        step = ad.concat([pad1, alpha[: s_total - 1]], axis=0)
        merged = ad.logaddexp(stay, step)
        if s_total > 2:
            skip = ad.concat([pad2, alpha[: s_total - 2]], axis=0)
            skip = ad.add(ad.mul(skip, allow_skip), skip_penalty)
            merged = ad.logaddexp(merged, skip)
        alpha = ad.add(merged, emissions[t])

    if s_total > 1:
        tail = ad.logaddexp(alpha[s_total - 1], alpha[s_total - 2])
    else:
        tail = alpha[0]
    return ad.neg(tail)


def sentiment_ce(class_log_probs: DiffArray, label: int) -> DiffArray:
    """Cross entropy against a hard 3-way label: -log p(label)."""
    n = class_log_probs.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"sentiment_ce: label {label} out of range for {n} classes")
    return ad.neg(class_log_probs[label])


def global_loss(asr: DiffArray, sentiment: DiffArray, lam: float) -> LossValue:
    """Weighted multi-task combination: total = asr + lam * sentiment."""
    if lam < 0:
        raise ValueError(f"global_loss: lambda must be non-negative, got {lam}")
    total = ad.add(asr, ad.mul(ad.constant(float(lam)), sentiment))
    return LossValue(
        total=total,
        components={"asr": float(asr.values), "sentiment": float(sentiment.values)},
    )


def ccc(y, yhat) -> DiffArray:
    """Concordance correlation: 2 cov / (var_y + var_yhat + (mean gap)^2).

    Population statistics over the mini-batch; the denominator is floored
    at a tiny constant so constant-vs-constant batches stay defined while
    well-conditioned inputs keep the exact formula.
    """
    y = y if isinstance(y, DiffArray) else ad.constant(np.asarray(y, dtype=np.float64))
    yhat = (
        yhat
        if isinstance(yhat, DiffArray)
        else ad.constant(np.asarray(yhat, dtype=np.float64))
    )
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError(f"ccc: shape mismatch {y.shape} vs {yhat.shape}")
    if y.shape[0] < 2:
        raise ValueError("CCC undefined: batch size < 2")
    mean_y = ad.reduce_mean(y)
    mean_h = ad.reduce_mean(yhat)
    cov = ad.reduce_mean(ad.mul(ad.sub(y, mean_y), ad.sub(yhat, mean_h)))
    gap = ad.sub(mean_y, mean_h)
    denom = ad.add(
        ad.add(ad.reduce_var(y), ad.reduce_var(yhat)), ad.mul(gap, gap)
    )
    return ad.div(ad.mul(ad.constant(2.0), cov), ad.clip_min(denom, CCC_DENOM_FLOOR))


def ccc_loss(avd_pred: DiffArray, avd_true) -> LossValue:
    """Mean negative concordance over the three emotion dimensions."""
    true = (
        avd_true
        if isinstance(avd_true, DiffArray)
        else ad.constant(np.asarray(avd_true, dtype=np.float64))
    )
    if avd_pred.ndim != 2 or avd_pred.shape[1] != 3 or avd_pred.shape != true.shape:
        raise ValueError(
            f"ccc_loss: expected matching B x 3 inputs, got {avd_pred.shape} vs {true.shape}"
        )
    per_dim = [ccc(true[:, d], avd_pred[:, d]) for d in range(3)]
    total = ad.mul(
        ad.constant(-1.0 / 3.0),
        ad.add(ad.add(per_dim[0], per_dim[1]), per_dim[2]),
    )
    return LossValue(
        total=total,
        components={
            "ccc_a": float(per_dim[0].values),
            "ccc_v": float(per_dim[1].values),
            "ccc_d": float(per_dim[2].values),
        },
    )
