"""Frame-level encoding of raw waveforms and the next-frame contrastive loss.

The convolutional encoder maps 16 kHz audio to one 64-dimensional latent
frame every 10 ms (five strided valid convolutions, total stride 160,
receptive field 465 samples, so each frame summarizes roughly 30 ms). The
next-frame classification loss scores the true successor of each frame
against sampled distractor frames by cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .corpus import HOP_S
from .errors import DegenerateUtterance, EmptyPool, TooShortUtterance


@dataclass(frozen=True)
class FrameEncoderConfig:
    """Geometry of the convolutional frame encoder."""

    kernel_sizes: tuple[int, ...] = (10, 8, 4, 4, 4)
    strides: tuple[int, ...] = (5, 4, 2, 2, 2)
    channels: int = 256
    projection_dim: int = 64

    def __post_init__(self) -> None:
        if len(self.kernel_sizes) != len(self.strides):
            raise ValueError("kernel_sizes and strides must have equal length")
        if self.channels < 1 or self.projection_dim < 1:
            raise ValueError("channels and projection_dim must be positive")

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    @property
    def receptive_field(self) -> int:
        rf = 1
        for k, s in zip(reversed(self.kernel_sizes), reversed(self.strides)):
            rf = (rf - 1) * s + k
        return rf

    def output_length(self, n_samples: int) -> int:
        """Number of frames produced for a waveform of ``n_samples``."""
        n = n_samples
        for k, s in zip(self.kernel_sizes, self.strides):
            if n < k:
                raise TooShortUtterance(
                    f"{n_samples} samples is shorter than the receptive field "
                    f"({self.receptive_field})"
                )
            n = (n - k) // s + 1
        return n


@dataclass
class FrameMatrix:
    """Latent frames for one utterance: shape (L, dim), hop 10 ms."""

    z: Tensor
    hop_s: float = HOP_S
    utterance_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.z.shape[0]


class ConvFrameEncoder(nn.Module):
    """Strided 1-D conv stack with BatchNorm + LeakyReLU, linear projection."""

    def __init__(self, cfg: FrameEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or FrameEncoderConfig()
        layers: list[nn.Module] = []
        in_ch = 1
        for k, s in zip(self.cfg.kernel_sizes, self.cfg.strides):
            layers += [
                nn.Conv1d(in_ch, self.cfg.channels, kernel_size=k, stride=s),
                nn.BatchNorm1d(self.cfg.channels),
                nn.LeakyReLU(),
            ]
            in_ch = self.cfg.channels
        self.conv = nn.Sequential(*layers)
        self.project = nn.Linear(self.cfg.channels, self.cfg.projection_dim)

    @property
    def frame_dim(self) -> int:
        return self.cfg.projection_dim

    def forward(self, wav: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Encode a padded batch of waveforms.

        wav: (N, T) float tensor. lengths: true sample counts per row
        (defaults to T for all rows). Returns (Z, frame_lengths) where Z is
        (N, L_max, dim); rows beyond an utterance's true frame count are
        padding and must be masked by the caller.
        """
        if wav.dim() != 2:
            raise ValueError("expected (N, T) waveform batch")
        if lengths is None:
            lengths = torch.full((wav.shape[0],), wav.shape[1], dtype=torch.long)
        h = self.conv(wav.unsqueeze(1))
        z = self.project(h.transpose(1, 2))
        frame_lengths = torch.tensor(
            [self.cfg.output_length(int(n)) for n in lengths], dtype=torch.long
        )
        return z, frame_lengths

    def encode_frames(self, samples: np.ndarray | Tensor, utterance_id: str = "") -> FrameMatrix:
        """Encode a single utterance deterministically (eval mode, no grad)."""
        if isinstance(samples, np.ndarray):
            samples = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))
        if samples.dim() != 1:
            raise ValueError("expected a 1-D waveform")
        self.cfg.output_length(samples.shape[0])  # raises TooShortUtterance
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                z, _ = self.forward(samples.unsqueeze(0))
        finally:
            self.train(was_training)
        return FrameMatrix(z=z.squeeze(0), utterance_id=utterance_id)


class FeedForwardFrameEncoder(nn.Module):
    """Three-layer feed-forward encoder for precomputed frame features."""

    def __init__(self, input_dim: int, hidden: int = 256, output_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, output_dim),
        )
        self.input_dim = input_dim
        self.frame_dim = output_dim

    def forward(self, feats: Tensor) -> Tensor:
        return self.net(feats)

    def encode_frames(self, feats: np.ndarray | Tensor, utterance_id: str = "") -> FrameMatrix:
        if isinstance(feats, np.ndarray):
            feats = torch.from_numpy(np.ascontiguousarray(feats, dtype=np.float32))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                z = self.forward(feats)
        finally:
            self.train(was_training)
        return FrameMatrix(z=z, utterance_id=utterance_id)


@dataclass(frozen=True)
class NegativeSamplingPolicy:
    """How many distractors to draw and from where."""

    k: int = 1
    mode: str = "same_utterance"  # or "mixed_utterance"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in ("same_utterance", "mixed_utterance"):
            raise ValueError(f"unknown negative sampling mode {self.mode!r}")


def _unit_rows(z: Tensor, eps: float = 1e-8) -> Tensor:
    return z / z.norm(dim=-1, keepdim=True).clamp_min(eps)


def sample_distractor_indices(
    pool_size: int, targets: Tensor, k: int, generator: torch.Generator | None = None
) -> Tensor:
    """Draw, per target, k pool indices uniformly excluding that target.

    targets: (n,) long tensor of excluded indices. Returns (n, k) long.
    Draws are independent (with replacement) across and within rows.
    """
    if pool_size < 2:
        raise EmptyPool(f"cannot sample distractors from a pool of {pool_size}")
    draws = torch.randint(0, pool_size - 1, (targets.shape[0], k), generator=generator)
    return draws + (draws >= targets.unsqueeze(1)).long()


def sample_negatives(
    z: Tensor, t: int, policy: NegativeSamplingPolicy, generator: torch.Generator | None = None
) -> Tensor:
    """Distractor frame vectors for predicting frame ``t + 1`` (0-based ``t``).

    The target frame itself is never drawn; every other frame of the
    utterance, including frame ``t``, is a candidate.
    """
    L = z.shape[0]
    if not 0 <= t < L - 1:
        raise ValueError(f"t={t} out of range for {L} frames")
    idx = sample_distractor_indices(L, torch.tensor([t + 1]), policy.k, generator)
    return z[idx[0]]


def info_nce(pos: Tensor, neg: Tensor) -> Tensor:
    """Mean softmax classification loss of positives against distractors.

    pos: (n,) similarity of each anchor to its true candidate.
    neg: (n, k) similarities to distractors. Returns a scalar.
    """
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def nfc_loss(
    z: Tensor | FrameMatrix,
    policy: NegativeSamplingPolicy = NegativeSamplingPolicy(),
    generator: torch.Generator | None = None,
) -> Tensor:
    """Next-frame classification loss for one utterance (cosine scores)."""
    if isinstance(z, FrameMatrix):
        z = z.z
    L = z.shape[0]
    if L < 3:
        raise DegenerateUtterance(f"need at least 3 frames for the next-frame loss, got {L}")
    u = _unit_rows(z)
    pos = (u[:-1] * u[1:]).sum(dim=-1)
    targets = torch.arange(1, L)
    idx = sample_distractor_indices(L, targets, policy.k, generator)
    neg = torch.einsum("td,tkd->tk", u[:-1], u[idx])
    return info_nce(pos, neg)


def nfc_batch_loss(
    zs: list[Tensor],
    policy: NegativeSamplingPolicy = NegativeSamplingPolicy(),
    generator: torch.Generator | None = None,
) -> Tensor:
    """Mean per-utterance next-frame loss over a batch.

    Under ``mixed_utterance`` the distractor pool is the union of all frames
    in the batch; the target frame is still excluded. Utterances too short
    to score contribute nothing.
    """
    usable = [z for z in zs if z.shape[0] >= 3]
    if not usable:
        raise DegenerateUtterance("no utterance in the batch has 3 or more frames")
    if policy.mode == "same_utterance":
        losses = [nfc_loss(z, policy, generator) for z in usable]
        return torch.stack(losses).mean()

    units = [_unit_rows(z) for z in usable]
    pool = torch.cat(units, dim=0)
    offsets = np.cumsum([0] + [u.shape[0] for u in units])
    losses = []
    for i, u in enumerate(units):
        L = u.shape[0]
        pos = (u[:-1] * u[1:]).sum(dim=-1)
        targets = torch.arange(1, L) + int(offsets[i])
        idx = sample_distractor_indices(pool.shape[0], targets, policy.k, generator)
        neg = torch.einsum("td,tkd->tk", u[:-1], pool[idx])
        losses.append(info_nce(pos, neg))
    return torch.stack(losses).mean()


def uniform_candidate_loss(k: int) -> float:
    """Loss value when all k + 1 candidates score identically."""
    return math.log(k + 1)
