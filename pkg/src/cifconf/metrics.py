"""Evaluation metrics for token- and utterance-level confidence quality.

Everything here is pure and order-independent: the same inputs give
bit-identical outputs.  Degenerate inputs (a single class where a
ranking needs both) raise rather than silently returning a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, DegenerateClassError


class ScoredToken(NamedTuple):
    score: float
    label: int


@dataclass
class UttRecord:
    """Per-utterance summary feeding the utterance-level metrics.

    token_count is the reference length, so cer * token_count recovers
    the utterance's absolute edit-error count.
    """

    utt_id: str
    avg_conf: float
    cer: float
    has_deletion: bool
    token_count: int


@dataclass
class MetricsReport:
    """All evaluation quantities for one variant on one test set."""

    variant: str
    auc: float
    auc_equal_spaced: float
    ece: float
    ece_u: float
    rmse_u: float
    corpus_cer: float
    n_utts: int
    n_tokens: int
    ece_bins: int
    ece_u_mode: str
    auc_methods: tuple = ("exact_rank", "equal_spaced_201")
    roc_curve: list = field(default_factory=list)      # (threshold, tpr, fpr)
    filter_curve: list = field(default_factory=list)   # (threshold, n, err or None)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "auc": self.auc,
            "auc_equal_spaced": self.auc_equal_spaced,
            "auc_methods": list(self.auc_methods),
            "ece": self.ece,
            "ece_u": self.ece_u,
            "ece_u_mode": self.ece_u_mode,
            "rmse_u": self.rmse_u,
            "corpus_cer": self.corpus_cer,
            "n_utts": self.n_utts,
            "n_tokens": self.n_tokens,
            "ece_bins": self.ece_bins,
        }


def equally_spaced(n: int) -> list[float]:
    """n thresholds covering [0, 1] inclusive."""
    if n < 2:
        raise ContractViolation(f"need at least 2 thresholds, got {n}")
    return [i / (n - 1) for i in range(n)]


def _split_scores(tokens: Sequence[ScoredToken]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([t.score for t in tokens], dtype=np.float64)
    labels = np.array([t.label for t in tokens], dtype=np.int64)
    if not ((labels == 0) | (labels == 1)).all():
        raise ContractViolation("token labels must be 0 or 1")
    if (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        raise DegenerateClassError(
            "ranking metrics need at least one positive and one negative label"
        )
    return scores, labels


def roc_points(
    tokens: Sequence[ScoredToken], thresholds: Sequence[float]
) -> list[tuple[float, float, float]]:
    """(threshold, TPR, FPR) per threshold; a token is predicted positive
    when its score is >= the threshold."""
    scores, labels = _split_scores(tokens)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    out = []
    for thr in thresholds:
        pred = scores >= thr
        tp = int((pred & pos).sum())
        fp = int((pred & ~pos).sum())
        out.append((float(thr), tp / n_pos, fp / n_neg))
    return out


def auc(tokens: Sequence[ScoredToken], method: str = "exact", n_thresholds: int = 201) -> float:
    """Area under the ROC curve.

    "exact" is the rank statistic P(s+ > s-) + 0.5 P(s+ = s-), invariant
    under monotone transforms of the scores.  "equal_spaced" integrates
    the ROC by trapezoid over n_thresholds equally spaced thresholds.
    """
    if method == "exact":
        scores, labels = _split_scores(tokens)
        ranks = _tied_ranks(scores)
        n_pos = int((labels == 1).sum())
        n_neg = len(labels) - n_pos
        pos_rank_sum = float(ranks[labels == 1].sum())
        return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    if method == "equal_spaced":
        pts = roc_points(tokens, equally_spaced(n_thresholds))
        # Sweep thresholds downward so the curve runs (0,0) -> (1,1).
        curve = sorted(((fpr, tpr) for _, tpr, fpr in pts))
        xs = [0.0] + [p[0] for p in curve] + [1.0]
        ys = [0.0] + [p[1] for p in curve] + [1.0]
        return float(np.trapezoid(ys, xs))
    raise ContractViolation(f"unknown AUC method {method!r}")


def _tied_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _bin_index(values: np.ndarray, n_bins: int) -> np.ndarray:
    # Bins [k/M, (k+1)/M) with the last bin closed at 1.
    idx = np.floor(values * n_bins).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def ece(tokens: Sequence[ScoredToken], n_bins: int = 10) -> float:
    """Token-level expected calibration error over equal-width bins."""
    if n_bins < 1:
        raise ContractViolation(f"n_bins must be >= 1, got {n_bins}")
    scores = np.array([t.score for t in tokens], dtype=np.float64)
    labels = np.array([t.label for t in tokens], dtype=np.float64)
    n = len(scores)
    if n == 0:
        return 0.0
    idx = _bin_index(scores, n_bins)
    total = 0.0
    for b in range(n_bins):
        members = idx == b
        nb = int(members.sum())
        if nb == 0:
            continue
        total += (nb / n) * abs(labels[members].mean() - scores[members].mean())
    return total


def utt_accuracy(rec: UttRecord) -> float:
    """1 - CER with CER clamped to 1 so accuracy stays in [0, 1]."""
    return 1.0 - min(rec.cer, 1.0)


def ece_u(utts: Sequence[UttRecord], n_bins: int = 10, mode: str = "per_utterance") -> float:
    """Utterance-level calibration error between average confidence and
    1 - CER.

    "per_utterance" (default) averages |accuracy(u) - conf(u)| within
    each bin before bin-weighting, so the result stays in [0, 1]
    regardless of corpus size.  "bin_mean" compares the bin's mean
    accuracy against its mean confidence, the classic bin-level form.
    """
    if n_bins < 1:
        raise ContractViolation(f"n_bins must be >= 1, got {n_bins}")
    if mode not in ("per_utterance", "bin_mean"):
        raise ContractViolation(f"unknown ece_u mode {mode!r}")
    n = len(utts)
    if n == 0:
        return 0.0
    conf = np.array([u.avg_conf for u in utts], dtype=np.float64)
    acc = np.array([utt_accuracy(u) for u in utts], dtype=np.float64)
    idx = _bin_index(conf, n_bins)
    total = 0.0
    for b in range(n_bins):
        members = idx == b
        nb = int(members.sum())
        if nb == 0:
            continue
        if mode == "per_utterance":
            gap = np.abs(acc[members] - conf[members]).mean()
        else:
            gap = abs(acc[members].mean() - conf[members].mean())
        total += (nb / n) * gap
    return total


def rmse_u(utts: Sequence[UttRecord]) -> float:
    """Root-mean-square gap between average confidence and 1 - CER."""
    if len(utts) == 0:
        raise ContractViolation("rmse_u needs at least one utterance")
    gaps = [u.avg_conf - utt_accuracy(u) for u in utts]
    return float(np.sqrt(np.mean(np.square(gaps))))


def filter_curve(
    utts: Sequence[UttRecord], thresholds: Sequence[float]
) -> list[tuple[float, int, float | None]]:
    """Error rate of the subset whose average confidence clears each
    threshold.  Rows are (threshold, subset size, subset error rate);
    the rate is None for empty subsets.  The rate is corpus-level:
    total edit errors over total reference tokens in the subset.
    """
    if list(thresholds) != sorted(thresholds):
        raise ContractViolation("filter_curve thresholds must be ascending")
    out = []
    for thr in thresholds:
        subset = [u for u in utts if u.avg_conf >= thr]
        if not subset:
            out.append((float(thr), 0, None))
            continue
        errors = sum(u.cer * u.token_count for u in subset)
        ref_tokens = sum(u.token_count for u in subset)
        out.append((float(thr), len(subset), errors / ref_tokens))
    return out


def split_by_deletion(utts: Sequence[UttRecord]) -> tuple[list[UttRecord], list[UttRecord]]:
    """Disjoint split into (no-deletion, with-deletion) utterances."""
    without = [u for u in utts if not u.has_deletion]
    with_del = [u for u in utts if u.has_deletion]
    return without, with_del
