"""Differentiable boundary detection from adjacent-frame dissimilarities.

The pipeline is: cosine similarity of consecutive latent frames, min-max
normalized and flipped into a dissimilarity trace, scored for local
peakedness against one- and two-step neighbors, thresholded, and finally
squashed to a near-binary indicator whose backward pass follows the soft
tanh (a straight-through estimator). Out-of-range neighbors in the peak
score are treated as zero dissimilarity, so edge gaps can still peak.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from .frames import FrameMatrix, _unit_rows

SOFT_GAIN = 10.0
HARD_GAIN = 1000.0


@dataclass
class DissimilarityVector:
    """Per-gap dissimilarity for one utterance; entry t scores gap (t, t+1)."""

    d: Tensor  # (L-1,) in [0, 1]
    raw_similarity: Tensor  # (L-1,) cosine similarities before normalization


@dataclass
class BoundaryVector:
    """Thresholded peak scores and their near-binary boundary indicator."""

    b: Tensor  # straight-through output: hard values, soft gradients
    b_soft: Tensor
    b_hard: Tensor
    p: Tensor
    p1: Tensor
    p2: Tensor

    def hard(self) -> Tensor:
        """Boundary indicator rounded to exact {0, 1} floats."""
        return self.b.detach().round()

    def gap_indices(self) -> list[int]:
        """1-based gap indices carrying a boundary."""
        return [int(i) + 1 for i in torch.nonzero(self.hard(), as_tuple=False).flatten()]

    def segment_count(self) -> int:
        return int(self.hard().sum().item()) + 1

    def segment_lengths(self) -> list[int]:
        """Frame counts per segment; sums to L = len(b) + 1."""
        gaps = self.gap_indices()
        edges = [0] + gaps + [self.b.shape[0] + 1]
        return [edges[i + 1] - edges[i] for i in range(len(edges) - 1)]


class BoundaryThreshold(nn.Module):
    """Scalar peak-score threshold, optionally learnable, kept in [0, 1]."""

    def __init__(self, init: float = 0.05, learnable: bool = False):
        super().__init__()
        if not 0.0 <= init <= 1.0:
            raise ValueError(f"threshold init {init} outside [0, 1]")
        self.learnable = learnable
        value = torch.tensor(float(init))
        if learnable:
            self.value = nn.Parameter(value)
        else:
            self.register_buffer("value", value)

    def clamp_(self) -> None:
        with torch.no_grad():
            self.value.clamp_(0.0, 1.0)

    def item(self) -> float:
        return float(self.value.detach())


def adjacent_dissimilarity(z: Tensor | FrameMatrix) -> DissimilarityVector:
    """Dissimilarity of consecutive frames, min-max normalized per utterance.

    A constant similarity trace (no contrast at all) maps to all zeros.
    """
    if isinstance(z, FrameMatrix):
        z = z.z
    if z.shape[0] < 2:
        raise ValueError("need at least 2 frames to compare neighbors")
    u = _unit_rows(z)
    sims = (u[:-1] * u[1:]).sum(dim=-1)
    lo, hi = sims.min(), sims.max()
    span = hi - lo
    if float(span.detach()) <= 1e-12:
        d = torch.zeros_like(sims)
    else:
        d = 1.0 - (sims - lo) / span
    return DissimilarityVector(d=d, raw_similarity=sims)


def peak_scores(
    d: Tensor, thres: Tensor | float, use_p2: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """Score how sharply each dissimilarity entry peaks above its neighbors.

    p1 compares against the immediate neighbors, p2 against the neighbors
    two steps away; both clamp negative differences to zero and take the
    smaller side. The final score subtracts the threshold from the better
    of the two but is capped by p1, so a gap that does not raise above its
    direct neighbors never scores. Neighbors beyond either end count as
    zero dissimilarity. Returns (p, p1, p2).
    """
    n = d.shape[0]
    if not torch.is_tensor(thres):
        thres = torch.as_tensor(thres, dtype=d.dtype)
    q = torch.cat([d.new_zeros(2), d, d.new_zeros(2)])
    right1, left1 = q[3 : n + 3], q[1 : n + 1]
    right2, left2 = q[4 : n + 4], q[0:n]
    p1 = torch.minimum((d - right1).clamp_min(0), (d - left1).clamp_min(0))
    p2 = torch.minimum((d - right2).clamp_min(0), (d - left2).clamp_min(0))
    best = torch.maximum(p1, p2) if use_p2 else p1
    p = torch.minimum((best - thres).clamp_min(0), p1)
    return p, p1, p2


def straight_through_bounds(p: Tensor) -> BoundaryVector:
    """Squash peak scores to a near-binary boundary indicator.

    Forward values follow ``tanh(1000 p)``; the backward pass sees the
    gentler ``tanh(10 p)``, whose gradient at p = 0 is 10.
    """
    b_soft = torch.tanh(SOFT_GAIN * p)
    b_hard = torch.tanh(HARD_GAIN * p)
    b = b_soft + (b_hard - b_soft).detach()
    return BoundaryVector(b=b, b_soft=b_soft, b_hard=b_hard, p=p, p1=p, p2=p)


def detect_boundaries(
    z: Tensor | FrameMatrix, thres: Tensor | float, use_p2: bool = True
) -> tuple[DissimilarityVector, BoundaryVector]:
    """Full differentiable pass from frames to boundary indicators."""
    dv = adjacent_dissimilarity(z)
    p, p1, p2 = peak_scores(dv.d, thres, use_p2=use_p2)
    bv = straight_through_bounds(p)
    bv.p1, bv.p2 = p1, p2
    return dv, bv


def segment_count(b: Tensor | BoundaryVector) -> int:
    """Number of segments implied by a boundary indicator: sum(b) + 1."""
    if isinstance(b, BoundaryVector):
        return b.segment_count()
    return int(b.detach().round().sum().item()) + 1


def dump_scores(path: str | Path, dv: DissimilarityVector, bv: BoundaryVector) -> None:
    """Write the per-gap diagnostic table: ``t d p1 p2 p b``, 6 decimals."""
    lines = ["t d p1 p2 p b"]
    d = dv.d.detach()
    for i in range(d.shape[0]):
        lines.append(
            f"{i + 1} {float(d[i]):.6f} {float(bv.p1[i]):.6f} "
            f"{float(bv.p2[i]):.6f} {float(bv.p[i]):.6f} {float(bv.b[i]):.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
