"""The joint frame/segment model and its checkpoint format."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .boundary import BoundaryThreshold, BoundaryVector, DissimilarityVector, detect_boundaries
from .errors import MissingFile
from .frames import (
    ConvFrameEncoder,
    FeedForwardFrameEncoder,
    FrameEncoderConfig,
    FrameMatrix,
)
from .segments import (
    AGGREGATOR_MODES,
    REP_MODES,
    ContextAggregator,
    SegmentContext,
    SegmentEncoder,
    SegmentSet,
    pool_segments,
)
from .varrate import ContextualFramePredictor

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the joint model."""

    input_kind: str = "waveform"  # or "features"
    feature_dim: int = 256  # input width when input_kind == "features"
    channels: int = 256
    frame_dim: int = 64
    segment_dim: int = 256
    segment_hidden: int = 256
    context_hidden: int = 64
    rep_mode: str = "avg"
    aggregator_mode: str = "rnn"
    use_p2: bool = True
    threshold_init: float = 0.05
    threshold_learnable: bool = False
    frame_context: bool = False  # adds a frame-level context net + multistep head
    m_steps: int = 1

    def __post_init__(self) -> None:
        if self.input_kind not in ("waveform", "features"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.rep_mode not in REP_MODES:
            raise ValueError(f"unknown rep mode {self.rep_mode!r}")
        if self.aggregator_mode not in AGGREGATOR_MODES:
            raise ValueError(f"unknown aggregator mode {self.aggregator_mode!r}")
        if not 1 <= self.m_steps <= 12:
            raise ValueError("m_steps must be in [1, 12]")


class SegmentalCPC(nn.Module):
    """Frame encoder, boundary detector, and segment branch in one module."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        if self.cfg.input_kind == "waveform":
            self.frame_encoder: nn.Module = ConvFrameEncoder(
                FrameEncoderConfig(channels=self.cfg.channels, projection_dim=self.cfg.frame_dim)
            )
        else:
            self.frame_encoder = FeedForwardFrameEncoder(
                self.cfg.feature_dim, hidden=self.cfg.segment_hidden, output_dim=self.cfg.frame_dim
            )
        self.threshold = BoundaryThreshold(
            init=self.cfg.threshold_init, learnable=self.cfg.threshold_learnable
        )
        self.segment_encoder = SegmentEncoder(
            input_dim=self.cfg.frame_dim,
            hidden=self.cfg.segment_hidden,
            output_dim=self.cfg.segment_dim,
        )
        self.segment_context = ContextAggregator(
            mode=self.cfg.aggregator_mode,
            segment_dim=self.cfg.segment_dim,
            hidden=self.cfg.context_hidden,
        )
        self.frame_predictor: ContextualFramePredictor | None = None
        if self.cfg.frame_context:
            self.frame_predictor = ContextualFramePredictor(
                frame_dim=self.cfg.frame_dim,
                context_dim=self.cfg.context_hidden,
                m_steps=self.cfg.m_steps,
            )

    @property
    def frame_hop_s(self) -> float:
        return 0.010

    def encode_utterance(self, inputs: np.ndarray | Tensor, utterance_id: str = "") -> FrameMatrix:
        """Deterministic frame encoding of one utterance (eval mode)."""
        return self.frame_encoder.encode_frames(inputs, utterance_id)

    def segmentation_scores(
        self, z: Tensor | FrameMatrix
    ) -> tuple[DissimilarityVector, BoundaryVector]:
        return detect_boundaries(z, self.threshold.value, use_p2=self.cfg.use_p2)

    def segment_pass(
        self, z: Tensor, rep_mode: str | None = None
    ) -> tuple[DissimilarityVector, BoundaryVector, SegmentSet, SegmentContext]:
        """Frames to segments: detect, pool, encode, and contextualize."""
        dv, bv = self.segmentation_scores(z)
        pooled = pool_segments(z, bv, rep_mode or self.cfg.rep_mode)
        s = self.segment_encoder(pooled)
        c = self.segment_context(s)
        seg = SegmentSet(s=s, pooled=pooled, boundaries=bv, rep_mode=rep_mode or self.cfg.rep_mode)
        ctx = SegmentContext(c=c, aggregator_mode=self.cfg.aggregator_mode)
        return dv, bv, seg, ctx

    def parameter_groups(self) -> dict[str, nn.Module]:
        groups = {
            "frame_encoder": self.frame_encoder,
            "segment_encoder": self.segment_encoder,
            "segment_context": self.segment_context,
            "boundary": self.threshold,
        }
        if self.frame_predictor is not None:
            groups["frame_context"] = self.frame_predictor
        return groups


def save_checkpoint(
    model: SegmentalCPC,
    path: str | Path,
    epoch: int = 0,
    best_val: float | None = None,
    train_config: dict | None = None,
    rng_state: dict | None = None,
) -> None:
    """Write the model as named parameter groups plus training state."""
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "params": {name: mod.state_dict() for name, mod in model.parameter_groups().items()},
        "epoch": epoch,
        "best_val": best_val,
        "train_config": train_config,
        "rng": rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[SegmentalCPC, dict]:
    """Rebuild a model from a checkpoint; returns (model, payload)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise MissingFile(f"{path}: unsupported checkpoint format")
    model = SegmentalCPC(ModelConfig(**payload["model_config"]))
    for name, mod in model.parameter_groups().items():
        mod.load_state_dict(payload["params"][name])
    model.eval()
    return model, payload
