"""Evaluation statistics: character error rate, greedy CTC decoding,
one-vs-rest AUC, weighted average recall, Spearman correlation, and the
sentiment/emotion confusion analysis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tokens import ALPHABET, BLANK_ID

SENTIMENT_CLASSES = ("negative", "neutral", "positive")


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = np.arange(len(b) + 1)
    for i, ca in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return int(prev[-1])


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: edit distance divided by reference length."""
    if not reference:
        raise ValueError("cer: empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def greedy_decode(log_probs: np.ndarray) -> str:
    """Frame-wise argmax, collapse adjacent repeats, drop blanks."""
    ids = np.asarray(log_probs).argmax(axis=1)
    out = []
    prev = -1
    for i in ids:
        if i != prev and i != BLANK_ID:
            out.append(ALPHABET[i])
        prev = i
    return "".join(out)


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties receiving the group average."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-rank tie handling."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = _midranks(scores)
    rank_sum = ranks[positive].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_ovr(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Macro-averaged one-vs-rest ROC AUC over the classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("AUC undefined: fewer than two classes present")
    per_class = [_binary_auc(scores[:, int(c)], labels == c) for c in present]
    return float(np.mean(per_class))


def weighted_average_recall(pred: Sequence[int], labels: Sequence[int]) -> float:
    """Prevalence-weighted mean of per-class recalls."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("weighted_average_recall: empty input")
    total = 0.0
    for c in np.unique(labels):
        in_class = labels == c
        prevalence = in_class.mean()
        recall = (pred[in_class] == c).mean()
        total += prevalence * recall
    return float(total)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"spearman: shape mismatch {x.shape} vs {y.shape}")
    if x.size < 3:
        raise ValueError("spearman: need at least 3 observations")
    rx = _midranks(x)
    ry = _midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        raise ValueError("correlation undefined: constant vector")
    return float((rx * ry).sum() / denom)


@dataclass
class ConfusionMatrix:
    """Sentiment (3 rows) by emotion (K columns) co-occurrence counts."""

    counts: np.ndarray
    sentiment_labels: tuple[str, ...]
    emotion_labels: tuple[str, ...]

    def emotion_column(self, emotion: str) -> np.ndarray:
        return self.counts[:, self.emotion_labels.index(emotion)]

    def sentiment_row(self, sentiment: str) -> np.ndarray:
        return self.counts[self.sentiment_labels.index(sentiment)]

    def render(self) -> str:
        width = max(len(e) for e in self.emotion_labels + self.sentiment_labels) + 2
        lines = ["".rjust(width) + "".join(e.rjust(width) for e in self.emotion_labels)]
        for s, row in zip(self.sentiment_labels, self.counts):
            lines.append(s.rjust(width) + "".join(str(int(c)).rjust(width) for c in row))
        return "\n".join(lines)


def confusion(
    sentiment: Sequence[str],
    emotion: Sequence[str],
    emotion_order: Sequence[str] | None = None,
    grouping: Mapping[str, str] | None = None,
) -> ConfusionMatrix:
    """Count (sentiment, emotion) pairs, optionally merging emotion classes
    through a grouping map applied before counting.
    """
    if len(sentiment) != len(emotion):
        raise ValueError(
            f"confusion: length mismatch {len(sentiment)} vs {len(emotion)}"
        )
    if grouping:
        emotion = [grouping.get(e, e) for e in emotion]
    if emotion_order is None:
        emotion_order = sorted(set(emotion))
    else:
        emotion_order = list(emotion_order)
        if grouping:
            emotion_order = list(dict.fromkeys(grouping.get(e, e) for e in emotion_order))
    e_index = {e: i for i, e in enumerate(emotion_order)}
    counts = np.zeros((len(SENTIMENT_CLASSES), len(emotion_order)), dtype=np.int64)
    for s, e in zip(sentiment, emotion):
        if s not in SENTIMENT_CLASSES:
            raise ValueError(f"confusion: unknown sentiment class {s!r}")
        if e not in e_index:
            raise ValueError(f"confusion: emotion {e!r} not in declared order")
        counts[SENTIMENT_CLASSES.index(s), e_index[e]] += 1
    return ConfusionMatrix(counts, SENTIMENT_CLASSES, tuple(emotion_order))


@dataclass
class EvalReport:
    """Validation metrics for one model state.

    Pre-training runs fill cer/auc/war; fine-tuning runs fill ccc_avd.
    The stopping metric is cer - auc whenever both are present.
    """

    cer: float | None = None
    auc: float | None = None
    war: float | None = None
    ccc_avd: tuple[float, float, float] | None = None

    @property
    def stopping_metric(self) -> float | None:
        if self.cer is None or self.auc is None:
            return None
        return self.cer - self.auc

    def to_dict(self) -> dict:
        ccc = self.ccc_avd or (None, None, None)
        return {
            "cer": self.cer,
            "auc": self.auc,
            "war": self.war,
            "ccc_a": ccc[0],
            "ccc_v": ccc[1],
            "ccc_d": ccc[2],
            "stopping_metric": self.stopping_metric,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.to_dict().items()) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        ccc = (d.get("ccc_a"), d.get("ccc_v"), d.get("ccc_d"))
        return cls(
            cer=d.get("cer"),
            auc=d.get("auc"),
            war=d.get("war"),
            ccc_avd=None if ccc[0] is None else ccc,
        )
