"""Continuous integrate-and-fire: frames to token-synchronous embeddings.

Per-frame weights alpha accumulate left to right; each time the running
total crosses the firing threshold, the weighted sum of the contributing
frames (with the crossing frame's weight split exactly at the boundary)
is emitted as one output embedding.  Equivalently: lay the frames out on
a mass axis where frame t occupies the interval (c[t-1], c[t]] of the
cumulative weight c, and give output i the overlap of each frame with
the mass interval (i*threshold, (i+1)*threshold].  The two views agree
to rounding error; the interval form is what is implemented because its
gradient is a pair of cumulative sums.

Both the emitted embeddings and the leftover partial sum are graph nodes,
differentiable with respect to the frames and the weights.  What to do
with the leftover mass (the residual) is the caller's policy; the model
fires it as an extra token when it is at least 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import kernel
from .errors import ContractViolation, DegenerateWeightsError
from .kernel import Tensor

# A boundary within this distance of an exact threshold multiple counts as
# crossed; keeps the firing count stable when scaled weights sum to an
# integer up to rounding.
FIRE_EPS = 1e-9


@dataclass
class FiringResult:
    """Outputs of one integrate-and-fire pass.

    boundaries[i] lists the (frame_index, contributed_weight) pairs that
    make up output i; each list sums to the threshold.  The residual is
    the sub-threshold mass left at the end of the sequence, with its own
    (unfired) partial embedding and provenance.
    """

    embeddings: Tensor               # n_fired x d
    boundaries: list                 # per output: list of (frame, weight)
    residual_weight: float
    residual_embedding: Tensor | None = None   # 1 x d partial sum, if mass > 0
    residual_frames: list | None = None

    @property
    def n_fired(self) -> int:
        return len(self.boundaries)


def integrate_and_fire(frames: Tensor, alpha: Tensor, threshold: float = 1.0) -> FiringResult:
    """Fire one embedding per threshold crossing of the accumulated alpha.

    frames is T x d, alpha is T x 1 with non-negative entries.  A frame
    whose weight straddles a boundary contributes both fragments with the
    same frame vector.  Weights above the threshold fire multiple times
    within one frame.  Gradients flow to both inputs; at an exact
    boundary the subgradient assigns the crossing entirely to the
    completed output.
    """
    if alpha.rows != frames.rows or alpha.cols != 1:
        raise ContractViolation(
            f"alpha must be {frames.rows}x1 to match frames {frames.shape}, got {alpha.shape}"
        )
    if threshold <= 0:
        raise ContractViolation(f"threshold must be positive, got {threshold}")
    a = alpha.data.reshape(-1)
    if (a < 0).any():
        raise ContractViolation("firing weights must be non-negative")

    t_frames = frames.rows
    c = np.concatenate([[0.0], np.cumsum(a)])
    total = float(c[-1])
    n_fire = int(math.floor(total / threshold + FIRE_EPS))

    edges_lo = np.arange(n_fire + 1).reshape(-1, 1) * threshold
    edges_hi = edges_lo + threshold
    edges_hi[n_fire, 0] = np.inf        # residual row collects everything past the last fire
    lo = np.maximum(c[:-1][None, :], edges_lo)
    hi = np.minimum(c[1:][None, :], edges_hi)
    w = np.clip(hi - lo, 0.0, None)     # (n_fire + 1) x T contribution matrix

    full = w @ frames.data
    active = w > 0.0
    right_open = c[1:][None, :] < edges_hi      # hi edge taken from the cumsum
    left_from_c = c[:-1][None, :] > edges_lo    # lo edge taken from the cumsum

    def bwd(g):
        kernel._accum(frames, w.T @ g)
        if alpha.requires_grad:
            gw = (g @ frames.data.T) * active
            gc = np.zeros(t_frames + 1)
            gc[1:] += (gw * right_open).sum(axis=0)
            gc[:-1] -= (gw * left_from_c).sum(axis=0)
            ga = np.cumsum(gc[1:][::-1])[::-1]
            kernel._accum(alpha, ga.reshape(-1, 1))

    full_node = kernel._node(full, (frames, alpha), bwd)

    boundaries = [
        [(int(t), float(w[i, t])) for t in np.nonzero(active[i])[0]]
        for i in range(n_fire)
    ]
    residual_weight = max(0.0, total - n_fire * threshold)
    residual_embedding = None
    residual_frames = None
    if residual_weight > 0.0:
        residual_embedding = kernel.slice_rows(full_node, n_fire, n_fire + 1)
        residual_frames = [(int(t), float(w[n_fire, t])) for t in np.nonzero(active[n_fire])[0]]

    return FiringResult(
        embeddings=kernel.slice_rows(full_node, 0, n_fire),
        boundaries=boundaries,
        residual_weight=residual_weight,
        residual_embedding=residual_embedding,
        residual_frames=residual_frames,
    )


def scale_weights(alpha: Tensor, target_len: int) -> Tensor:
    """Rescale alpha so it sums exactly to target_len.

    Used in training so the firing count matches the reference length.
    """
    if target_len < 1:
        raise ContractViolation(f"target_len must be >= 1, got {target_len}")
    s = float(alpha.data.sum())
    if s <= 0.0:
        raise DegenerateWeightsError("cannot rescale weights that sum to zero")
    f = target_len / s
    out = alpha.data * f

    def bwd(g):
        corr = (target_len / (s * s)) * float((g * alpha.data).sum())
        kernel._accum(alpha, f * g - corr)

    return kernel._node(out, (alpha,), bwd)


def quantity_loss(alpha: Tensor, target_len: int) -> Tensor:
    """|sum(alpha) - target_len|, the token-count training signal."""
    return kernel.abs_all(kernel.shift(kernel.sum_all(alpha), -float(target_len)))


def predict_weights(encoder_out: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    """Per-frame firing weights in (0, 1) from a one-hidden-layer head.

    ``head`` maps "hidden.w", "hidden.b", "out.w", "out.b" to tensors;
    returns a T x 1 column.
    """
    h = kernel.relu(kernel.linear(encoder_out, head["hidden.w"], head["hidden.b"]))
    return kernel.sigmoid(kernel.linear(h, head["out.w"], head["out.b"]))


def firing_trace_rows(result: FiringResult) -> list:
    """(output_index, frame_index, weight) rows for the trace TSV.

    The unfired residual, when present, appears under output index
    n_fired so audits can account for all mass.
    """
    rows = [
        (i, frame, weight)
        for i, pairs in enumerate(result.boundaries)
        for frame, weight in pairs
    ]
    if result.residual_frames:
        rows.extend((result.n_fired, f, w) for f, w in result.residual_frames)
    return rows
