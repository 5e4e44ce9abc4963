"""Edit-distance alignment, correctness labels, CER, and hypothesis corruption.

Alignment paths are deterministic: when costs tie during backtrace we
prefer match/substitute over delete over insert, so identical inputs
always produce identical label sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .errors import ContractViolation
from .kernel import Rng

MATCH = "match"
SUBSTITUTE = "substitute"
DELETE = "delete"
INSERT = "insert"


class AlignOp(NamedTuple):
    kind: str
    ref_index: int | None
    hyp_index: int | None


@dataclass
class AlignmentPath:
    """A cost-optimal edit script from a reference to a hypothesis."""

    ops: list[AlignOp]

    def counts(self) -> tuple[int, int, int, int]:
        """(matches, substitutions, deletions, insertions)."""
        kinds = [op.kind for op in self.ops]
        return (
            kinds.count(MATCH),
            kinds.count(SUBSTITUTE),
            kinds.count(DELETE),
            kinds.count(INSERT),
        )

    @property
    def has_deletion(self) -> bool:
        return any(op.kind == DELETE for op in self.ops)


@dataclass
class LabelSeq:
    """Binary correctness targets aligned to a scored token sequence."""

    labels: list[int]
    basis: str  # "hypothesis" or "decode"


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> tuple[int, AlignmentPath]:
    """Levenshtein distance with unit costs plus one optimal path.

    Tie-break during backtrace: match/substitute, then delete, then
    insert.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row = dist[i]
        prev = dist[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    ops: list[AlignOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and here == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            kind = MATCH if ref[i - 1] == hyp[j - 1] else SUBSTITUTE
            ops.append(AlignOp(kind, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and here == dist[i - 1][j] + 1:
            ops.append(AlignOp(DELETE, i - 1, None))
            i -= 1
        else:
            ops.append(AlignOp(INSERT, None, j - 1))
            j -= 1
    ops.reverse()
    return dist[n][m], AlignmentPath(ops)


def labels_for_hypothesis(hyp: Sequence[int], ref: Sequence[int]) -> LabelSeq:
    """One 0/1 label per hypothesis token: 1 for matches, 0 for
    substitutions and insertions.  Reference tokens the hypothesis
    dropped leave no trace, which is exactly the blind spot of
    hypothesis-synchronous scoring.
    """
    _, path = edit_distance(ref, hyp)
    labels = [0] * len(hyp)
    for op in path.ops:
        if op.kind == MATCH:
            labels[op.hyp_index] = 1
    return LabelSeq(labels=labels, basis="hypothesis")


def labels_for_decode(decode: Sequence[int], hyp: Sequence[int]) -> LabelSeq:
    """One 0/1 label per decode token: 1 where the hypothesis has a
    matching token, 0 otherwise.  Tokens the hypothesis is missing
    become 0-labeled decode positions, which is the training signal for
    the decode-synchronous estimator.
    """
    _, path = edit_distance(decode, hyp)
    labels = [0] * len(decode)
    for op in path.ops:
        if op.kind == MATCH:
            labels[op.ref_index] = 1
    return LabelSeq(labels=labels, basis="decode")


def cer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """(S + D + I) / |ref|; exceeds 1.0 under heavy insertion."""
    if len(ref) == 0:
        raise ContractViolation("CER is undefined for an empty reference")
    dist, _ = edit_distance(ref, hyp)
    return dist / len(ref)


def corrupt(
    ref: Sequence[int],
    sub_rate: float,
    del_rate: float,
    ins_rate: float,
    rng: Rng,
    vocab_size: int,
) -> list[int]:
    """Independently corrupt each position: delete w.p. del_rate, else
    substitute a random different token w.p. sub_rate; after every
    original position insert a random token w.p. ins_rate.
    """
    if min(sub_rate, del_rate, ins_rate) < 0 or sub_rate + del_rate > 1:
        raise ContractViolation(
            f"invalid corruption rates sub={sub_rate} del={del_rate} ins={ins_rate}"
        )
    out: list[int] = []
    for tok in ref:
        u = rng.random()
        if u < del_rate:
            pass
        elif u < del_rate + sub_rate:
            r = rng.integers(0, vocab_size - 1)
            out.append(r + 1 if r >= tok else r)
        else:
            out.append(int(tok))
        if rng.random() < ins_rate:
            out.append(rng.integers(0, vocab_size))
    return out
