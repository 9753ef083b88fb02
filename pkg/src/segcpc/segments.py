"""Segment representations built on top of detected boundaries.

Frames are grouped into segments by the (near-binary) boundary indicator.
Average pooling is expressed as one matrix product with a frame-to-segment
weight matrix derived from the cumulative sum of the indicator, which keeps
the whole reduction differentiable with respect to the boundary scores
while behaving like an exact per-segment mean once the indicator saturates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .boundary import BoundaryVector
from .errors import DegenerateUtterance
from .frames import NegativeSamplingPolicy, _unit_rows, info_nce, sample_distractor_indices

WEIGHT_SCALE = 100.0

REP_MODES = ("avg", "max", "mid", "wavg")
AGGREGATOR_MODES = ("rnn", "previous_segment")


def _indicator(b: Tensor | BoundaryVector) -> Tensor:
    return b.b if isinstance(b, BoundaryVector) else b


def hard_segment_ids(b: Tensor | BoundaryVector) -> Tensor:
    """0-based segment index per frame, from the rounded indicator."""
    bt = _indicator(b).detach().round()
    return torch.cat([bt.new_zeros(1), bt.cumsum(0)]).long()


def build_weight_matrix(b: Tensor | BoundaryVector, num_frames: int | None = None) -> Tensor:
    """Frame-to-segment averaging weights, shape (L, M).

    Frame i sits at soft segment coordinate ``cumsum(b)`` up to i; column j
    weighs frames by ``1 - tanh(100 |j - coord|)`` and is normalized to sum
    to one. For a binary indicator the tanh saturates and every column is an
    exact mean over its segment's frames.
    """
    bt = _indicator(b)
    if num_frames is not None and num_frames != bt.shape[0] + 1:
        raise ValueError(f"indicator of {bt.shape[0]} gaps implies {bt.shape[0] + 1} frames")
    coord = torch.cat([bt.new_zeros(1), bt.cumsum(0)])
    m = int(bt.detach().round().sum().item()) + 1
    cols = torch.arange(m, dtype=bt.dtype)
    raw = 1.0 - torch.tanh(WEIGHT_SCALE * (cols.unsqueeze(0) - coord.unsqueeze(1)).abs())
    return raw / raw.sum(dim=0, keepdim=True).clamp_min(1e-12)


def pool_segments(z: Tensor, b: Tensor | BoundaryVector, mode: str = "avg") -> Tensor:
    """Reduce frames (L, p) to one vector per segment (M, p).

    Modes: ``avg`` (weight-matrix mean), ``max`` (elementwise max within the
    segment), ``mid`` (the frame at the middle of the segment, rounding
    left), ``wavg`` (mean of self-attended frames, attention given by a
    softmax over the within-segment frame similarity rows).
    """
    if mode not in REP_MODES:
        raise ValueError(f"unknown rep mode {mode!r}; expected one of {REP_MODES}")
    bt = _indicator(b)
    if z.shape[0] != bt.shape[0] + 1:
        raise ValueError(f"{z.shape[0]} frames but {bt.shape[0]} gap indicators")
    ids = hard_segment_ids(b)
    m = int(ids[-1]) + 1

    if mode == "avg":
        w = build_weight_matrix(b)
        return w.t() @ z
    if mode == "max":
        rows = []
        for j in range(m):
            rows.append(z[ids == j].max(dim=0).values)
        return torch.stack(rows)
    if mode == "mid":
        rows = []
        for j in range(m):
            where = torch.nonzero(ids == j, as_tuple=False).flatten()
            mid = (int(where[0]) + int(where[-1])) // 2
            rows.append(z[mid])
        return torch.stack(rows)

    # wavg: softmax-attended frames, then the segment mean of the result.
    gram = z @ z.t()
    same = ids.unsqueeze(0) == ids.unsqueeze(1)
    gram = gram.masked_fill(~same, float("-inf"))
    attended = torch.softmax(gram, dim=1) @ z
    w = build_weight_matrix(b)
    return w.t() @ attended


@dataclass
class SegmentSet:
    """Pooled and encoded representations for the segments of one utterance."""

    s: Tensor  # (M, q) encoded segment vectors
    pooled: Tensor  # (M, p) pooled frame vectors
    boundaries: BoundaryVector
    rep_mode: str

    @property
    def num_segments(self) -> int:
        return self.s.shape[0]


@dataclass
class SegmentContext:
    """Causal context vector per segment position."""

    c: Tensor  # (M, q)
    aggregator_mode: str


class SegmentEncoder(nn.Module):
    """Two-layer feed-forward map from pooled frames to segment vectors."""

    def __init__(self, input_dim: int = 64, hidden: int = 256, output_dim: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, output_dim),
        )
        self.output_dim = output_dim

    def forward(self, pooled: Tensor) -> Tensor:
        return self.net(pooled)


class ContextAggregator(nn.Module):
    """Summarize segments 1..i into a context for predicting segment i+1.

    ``rnn`` runs a small GRU over the segment sequence; ``previous_segment``
    uses a learned projection of segment i alone, ignoring deeper history.
    """

    def __init__(self, mode: str = "rnn", segment_dim: int = 256, hidden: int = 64):
        super().__init__()
        if mode not in AGGREGATOR_MODES:
            raise ValueError(f"unknown aggregator mode {mode!r}")
        self.mode = mode
        if mode == "rnn":
            self.rnn = nn.GRU(segment_dim, hidden, batch_first=True)
            self.out = nn.Linear(hidden, segment_dim)
        else:
            self.out = nn.Linear(segment_dim, segment_dim)

    def forward(self, s: Tensor) -> Tensor:
        if self.mode == "rnn":
            h, _ = self.rnn(s.unsqueeze(0))
            return self.out(h.squeeze(0))
        return self.out(s)


def nsc_loss(
    c: Tensor,
    s: Tensor,
    k: int = 1,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Next-segment classification loss for one utterance.

    Scores cosine similarity of the context at segment t against segment
    t + 1, relative to k distractor segments of the same utterance. Needs
    at least 3 segments (a target plus a non-trivial pool).
    """
    m = s.shape[0]
    if c.shape[0] != m:
        raise ValueError("context and segment counts differ")
    if m < 3:
        raise DegenerateUtterance(f"need at least 3 segments for the next-segment loss, got {m}")
    cu, su = _unit_rows(c), _unit_rows(s)
    pos = (cu[:-1] * su[1:]).sum(dim=-1)
    targets = torch.arange(1, m)
    idx = sample_distractor_indices(m, targets, k, generator)
    neg = torch.einsum("td,tkd->tk", cu[:-1], su[idx])
    return info_nce(pos, neg)


def nsc_batch_loss(
    contexts: list[Tensor],
    segments: list[Tensor],
    policy: NegativeSamplingPolicy = NegativeSamplingPolicy(),
    generator: torch.Generator | None = None,
) -> tuple[Tensor, int]:
    """Mean next-segment loss over the utterances that have >= 3 segments.

    Returns (loss, n_scored). When no utterance qualifies the loss is a
    constant zero. Under ``mixed_utterance`` the distractor pool is the
    union of all segments in the batch.
    """
    pairs = [(c, s) for c, s in zip(contexts, segments) if s.shape[0] >= 3]
    if not pairs:
        return torch.zeros(()), 0
    if policy.mode == "same_utterance":
        losses = [nsc_loss(c, s, policy.k, generator) for c, s in pairs]
        return torch.stack(losses).mean(), len(pairs)

    units = [_unit_rows(s) for _, s in pairs]
    pool = torch.cat(units, dim=0)
    losses = []
    offset = 0
    for (c, _), su in zip(pairs, units):
        m = su.shape[0]
        cu = _unit_rows(c)
        pos = (cu[:-1] * su[1:]).sum(dim=-1)
        targets = torch.arange(1, m) + offset
        idx = sample_distractor_indices(pool.shape[0], targets, policy.k, generator)
        neg = torch.einsum("td,tkd->tk", cu[:-1], pool[idx])
        losses.append(info_nce(pos, neg))
        offset += m
    return torch.stack(losses).mean(), len(pairs)
