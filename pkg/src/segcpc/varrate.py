"""Variable-rate feature extraction and downstream probing.

This module covers the second stage of a two-stage pipeline: frame features
from a pretrained frontend (or from this package's own models) are grouped
into segments, one vector per segment, and judged by a linear phone probe
after being expanded back to frame rate. It also houses the contextual
frame predictor with a multi-step contrastive loss used to study how far
ahead frame-level representations can predict.

Feature files are a simple binary container: per-utterance blocks of
``[uint32 id_len][id utf-8][uint32 L][uint32 dim][L*dim float32]``, all
little-endian, with a plain-text ``.idx`` sidecar mapping ids to byte
offsets. Segment features add a ``.bounds`` sidecar with the gap indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .corpus import HOP_S, LabeledInterval, LabelFoldTable, Utterance, default_fold_table
from .errors import (
    DegenerateUtterance,
    InconsistentLengths,
    LabelFeatureMismatch,
    MissingAlignment,
    MissingFile,
    TooShortUtterance,
    UnknownLabel,
)
from .frames import info_nce, sample_distractor_indices

BOUNDARY_SOURCES = ("differentiable", "external_peaks", "manual")


class ContextualFramePredictor(nn.Module):
    """Recurrent frame context with one bilinear scoring head per step ahead."""

    def __init__(self, frame_dim: int = 64, context_dim: int = 64, m_steps: int = 1):
        super().__init__()
        if not 1 <= m_steps <= 12:
            raise ValueError("m_steps must be in [1, 12]")
        self.m_steps = m_steps
        self.context = nn.GRU(frame_dim, context_dim, batch_first=True)
        self.step_heads = nn.ModuleList(
            nn.Linear(context_dim, frame_dim, bias=False) for _ in range(m_steps)
        )

    def contexts(self, z: Tensor) -> Tensor:
        h, _ = self.context(z.unsqueeze(0))
        return h.squeeze(0)


def multistep_nfc_loss(
    z: Tensor,
    predictor: ContextualFramePredictor,
    k: int = 1,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Predict frames 1..m_steps ahead from the recurrent frame context.

    Each step m scores the true frame t + m against k distractor frames by
    the bilinear form ``z~ . W_m c_t``; the result is the mean over steps of
    the mean classification loss over valid positions.
    """
    L = z.shape[0]
    if L < predictor.m_steps + 2:
        raise DegenerateUtterance(
            f"need at least {predictor.m_steps + 2} frames for {predictor.m_steps} steps, got {L}"
        )
    c = predictor.contexts(z)
    losses = []
    for m in range(1, predictor.m_steps + 1):
        proj = predictor.step_heads[m - 1](c[: L - m])
        pos = (proj * z[m:]).sum(dim=-1)
        targets = torch.arange(m, L)
        idx = sample_distractor_indices(L, targets, k, generator)
        neg = torch.einsum("td,tkd->tk", proj, z[idx])
        losses.append(info_nce(pos, neg))
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Feature file container


def _index_path(path: Path) -> Path:
    return path.with_suffix(".idx")


def _bounds_path(path: Path) -> Path:
    return path.with_suffix(".bounds")


def write_feature_file(path: str | Path, features: dict[str, np.ndarray]) -> None:
    """Write per-utterance float32 matrices plus a text index."""
    path = Path(path)
    index_lines = []
    with open(path, "wb") as f:
        for utt_id, mat in features.items():
            mat = np.ascontiguousarray(mat, dtype=np.float32)
            if mat.ndim != 2:
                raise ValueError(f"{utt_id}: expected a 2-D feature matrix")
            offset = f.tell()
            ident = utt_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            f.write(mat.tobytes(order="C"))
            index_lines.append(f"{utt_id}\t{offset}\t{mat.shape[0]}\t{mat.shape[1]}")
    _index_path(path).write_text("\n".join(index_lines) + "\n", encoding="utf-8")


class FeatureReader:
    """Random access to a feature file via its text index."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.is_file():
            raise MissingFile(f"feature file not found: {self.path}")
        idx = _index_path(self.path)
        if not idx.is_file():
            raise MissingFile(f"feature index not found: {idx}")
        self._entries: dict[str, tuple[int, int, int]] = {}
        for line in idx.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            utt_id, offset, n, dim = line.split("\t")
            self._entries[utt_id] = (int(offset), int(n), int(dim))

    @property
    def ids(self) -> list[str]:
        return list(self._entries)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def shape(self, utt_id: str) -> tuple[int, int]:
        offset, n, dim = self._entries[utt_id]
        return n, dim

    def read(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._entries:
            raise MissingFile(f"{self.path}: no features for utterance {utt_id!r}")
        offset, n, dim = self._entries[utt_id]
        with open(self.path, "rb") as f:
            f.seek(offset)
            (id_len,) = struct.unpack("<I", f.read(4))
            stored = f.read(id_len).decode("utf-8")
            if stored != utt_id:
                raise MissingFile(f"{self.path}: index points at block for {stored!r}")
            rows, cols = struct.unpack("<II", f.read(8))
            if (rows, cols) != (n, dim):
                raise InconsistentLengths(f"{self.path}: block/index shape mismatch for {utt_id}")
            data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
        return data.reshape(rows, cols).copy()

    def read_all(self) -> dict[str, np.ndarray]:
        return {utt_id: self.read(utt_id) for utt_id in self._entries}


# ---------------------------------------------------------------------------
# Segment features


@dataclass
class UtteranceSegments:
    """Segment vectors for one utterance plus where the cuts fall."""

    vectors: np.ndarray  # (M, q)
    gap_indices: list[int]  # 1-based frame gaps carrying a cut, length M - 1
    num_frames: int

    def __post_init__(self) -> None:
        gaps = self.gap_indices
        if any(g < 1 or g > self.num_frames - 1 for g in gaps) or sorted(set(gaps)) != gaps:
            raise InconsistentLengths(
                f"gap indices {gaps} invalid for {self.num_frames} frames"
            )
        if self.vectors.shape[0] != len(gaps) + 1:
            raise InconsistentLengths(
                f"{self.vectors.shape[0]} segment vectors but {len(gaps)} cuts"
            )

    @property
    def num_segments(self) -> int:
        return self.vectors.shape[0]

    def segment_lengths(self) -> list[int]:
        edges = [0] + self.gap_indices + [self.num_frames]
        return [edges[i + 1] - edges[i] for i in range(len(edges) - 1)]


@dataclass
class SegmentFeatures:
    """Segment-level features for a set of utterances at a fixed frame hop."""

    utterances: dict[str, UtteranceSegments] = field(default_factory=dict)
    hop_s: float = HOP_S

    @property
    def total_segments(self) -> int:
        return sum(u.num_segments for u in self.utterances.values())

    @property
    def total_duration_s(self) -> float:
        return sum(u.num_frames for u in self.utterances.values()) * self.hop_s


def write_segment_features(path: str | Path, seg: SegmentFeatures) -> None:
    path = Path(path)
    write_feature_file(path, {k: u.vectors for k, u in seg.utterances.items()})
    lines = [f"#hop_s {seg.hop_s!r}"]
    for utt_id, u in seg.utterances.items():
        gaps = " ".join(str(g) for g in u.gap_indices) if u.gap_indices else "-"
        lines.append(f"{utt_id}\t{u.num_frames}\t{gaps}")
    _bounds_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_segment_features(path: str | Path) -> SegmentFeatures:
    path = Path(path)
    reader = FeatureReader(path)
    bounds = _bounds_path(path)
    if not bounds.is_file():
        raise MissingFile(f"segment boundary sidecar not found: {bounds}")
    hop_s = HOP_S
    out = SegmentFeatures(hop_s=hop_s)
    for line in bounds.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#hop_s"):
            out.hop_s = float(line.split()[1])
            continue
        utt_id, n_frames, gaps = line.split("\t")
        gap_indices = [] if gaps == "-" else [int(g) for g in gaps.split()]
        out.utterances[utt_id] = UtteranceSegments(
            vectors=reader.read(utt_id), gap_indices=gap_indices, num_frames=int(n_frames)
        )
    return out


def gaps_from_alignment(
    intervals: Sequence[LabeledInterval], num_frames: int, hop_s: float = HOP_S
) -> list[int]:
    """Interior alignment edges quantized to frame gaps (1-based, deduped)."""
    times: list[float] = []
    for i, iv in enumerate(intervals):
        if i > 0:
            times.append(iv.start_s)
        if i < len(intervals) - 1:
            times.append(iv.end_s)
    gaps = sorted({min(max(round(t / hop_s), 1), num_frames - 1) for t in times})
    return gaps


def extract_segment_features(
    model,
    utterances: Iterable[Utterance],
    boundary_source: str = "differentiable",
    features: "FeatureReader | dict[str, np.ndarray] | None" = None,
    prominence: float = 0.0,
) -> SegmentFeatures:
    """Encode utterances and pool their frames into one vector per segment.

    ``boundary_source`` picks where the cuts come from: the model's own
    thresholded detector (``differentiable``), peak picking on the
    dissimilarity trace at the given prominence (``external_peaks``), or
    reference phone alignments (``manual``). When the model consumes
    precomputed frontend features, pass them via ``features``.
    """
    from .inference import pick_peaks  # local import to keep module layering flat
    from .segments import pool_segments

    if boundary_source not in BOUNDARY_SOURCES:
        raise ValueError(f"unknown boundary source {boundary_source!r}")
    out = SegmentFeatures(hop_s=HOP_S)
    for utt in utterances:
        if model.cfg.input_kind == "features":
            if features is None or utt.id not in features:
                raise MissingFile(f"no frontend features for utterance {utt.id!r}")
            inputs = features[utt.id] if isinstance(features, dict) else features.read(utt.id)
        else:
            inputs = utt.samples
        fm = model.encode_utterance(inputs, utt.id)
        L = fm.num_frames
        if L < 2:
            raise TooShortUtterance(f"{utt.id}: only {L} frames")
        dv, bv = model.segmentation_scores(fm.z)
        if boundary_source == "differentiable":
            gaps = bv.gap_indices()
        elif boundary_source == "external_peaks":
            peaks = pick_peaks(dv.d.numpy(), prominence)
            gaps = [int(i) + 1 for i in peaks]
        else:
            if utt.phone_alignment is None:
                raise MissingAlignment(f"{utt.id}: manual boundaries need a phone alignment")
            gaps = gaps_from_alignment(utt.phone_alignment, L, HOP_S)
        indicator = torch.zeros(L - 1)
        for g in gaps:
            indicator[g - 1] = 1.0
        with torch.no_grad():
            pooled = pool_segments(fm.z, indicator, model.cfg.rep_mode)
            vectors = model.segment_encoder(pooled).numpy()
        out.utterances[utt.id] = UtteranceSegments(
            vectors=vectors, gap_indices=gaps, num_frames=L
        )
    return out


def expand_to_frames(seg: UtteranceSegments) -> np.ndarray:
    """Repeat each segment vector over its frames; returns (L, q)."""
    reps = seg.segment_lengths()
    if sum(reps) != seg.num_frames:
        raise InconsistentLengths("segment lengths do not sum to the frame count")
    return np.repeat(seg.vectors, reps, axis=0)


def average_sampling_rate(
    seg: SegmentFeatures | Iterable[int], total_duration_s: float | None = None
) -> float:
    """Segments emitted per second of audio."""
    if isinstance(seg, SegmentFeatures):
        counts = seg.total_segments
        duration = total_duration_s if total_duration_s is not None else seg.total_duration_s
    else:
        counts = sum(seg)
        duration = total_duration_s
    if not duration or duration <= 0:
        raise ValueError("total duration must be positive")
    return counts / duration


# ---------------------------------------------------------------------------
# Frame labels and the linear probe

CONV_FRAME_OFFSET = 232  # center sample of the first analysis window
CONV_FRAME_STRIDE = 160


def frame_center_s(t: int, sample_rate: int = 16000) -> float:
    """Nominal center time of 0-based frame t at the 10 ms hop."""
    return (CONV_FRAME_STRIDE * t + CONV_FRAME_OFFSET) / sample_rate


def frame_labels(
    intervals: Sequence[LabeledInterval],
    num_frames: int,
    table: LabelFoldTable | None = None,
    mode: str = LabelFoldTable.PROBE48,
) -> list[str | None]:
    """Folded label per frame by nominal center time; None when excluded.

    Frames whose center falls outside every interval, and frames whose
    label the fold drops, come back as None and should be masked out.
    """
    table = table or default_fold_table()
    out: list[str | None] = []
    j = 0
    for t in range(num_frames):
        center = frame_center_s(t)
        while j < len(intervals) and intervals[j].end_s <= center:
            j += 1
        if j < len(intervals) and intervals[j].start_s <= center < intervals[j].end_s:
            out.append(table.fold(intervals[j].label, mode))
        else:
            out.append(None)
    return out


@dataclass
class ProbeResult:
    """Linear probe accuracies (fractions in [0, 1]) and feature rates."""

    val_accuracy: float
    test_accuracy: float
    classes: list[str]
    train_rate_hz: float | None = None
    eval_rate_hz: float | None = None


def _probe_accuracy(weight: nn.Linear, x: Tensor, y: Tensor) -> float:
    with torch.no_grad():
        pred = weight(x).argmax(dim=1)
    return float((pred == y).float().mean())


def linear_probe(
    train_x: np.ndarray,
    train_y: Sequence[str],
    val_x: np.ndarray,
    val_y: Sequence[str],
    test_x: np.ndarray | None = None,
    test_y: Sequence[str] | None = None,
    classes: Sequence[str] | None = None,
    seed: int = 0,
    lr: float = 0.01,
    batch_size: int = 4096,
    max_epochs: int = 500,
    patience: int = 10,
) -> ProbeResult:
    """Train a single linear layer with softmax cross-entropy to a plateau.

    Training stops once validation accuracy has not improved for
    ``patience`` consecutive epochs; the best weights are kept. Fully
    deterministic for a given seed.
    """
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise LabelFeatureMismatch("feature rows and labels differ in length")
    class_list = sorted(set(train_y)) if classes is None else list(classes)
    index = {c: i for i, c in enumerate(class_list)}

    def _encode(labels: Sequence[str]) -> Tensor:
        try:
            return torch.tensor([index[l] for l in labels], dtype=torch.long)
        except KeyError as exc:
            raise UnknownLabel(f"label {exc.args[0]!r} not covered by the probe classes")

    tx = torch.as_tensor(np.asarray(train_x, dtype=np.float32))
    vx = torch.as_tensor(np.asarray(val_x, dtype=np.float32))
    ty, vy = _encode(train_y), _encode(val_y)
    generator = torch.Generator().manual_seed(seed)
    layer = nn.Linear(tx.shape[1], len(class_list))
    with torch.no_grad():
        nn.init.normal_(layer.weight, std=0.01, generator=generator)
        nn.init.zeros_(layer.bias)
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()

    best_acc, best_state, stale = -1.0, None, 0
    for _ in range(max_epochs):
        order = torch.randperm(tx.shape[0], generator=generator)
        for i in range(0, tx.shape[0], batch_size):
            sel = order[i : i + batch_size]
            opt.zero_grad()
            loss_fn(layer(tx[sel]), ty[sel]).backward()
            opt.step()
        acc = _probe_accuracy(layer, vx, vy)
        if acc > best_acc + 1e-9:
            best_acc, stale = acc, 0
            best_state = {k: v.clone() for k, v in layer.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        layer.load_state_dict(best_state)

    if test_x is None or test_y is None:
        test_acc = best_acc
    else:
        test_acc = _probe_accuracy(
            layer, torch.as_tensor(np.asarray(test_x, dtype=np.float32)), _encode(test_y)
        )
    return ProbeResult(val_accuracy=best_acc, test_accuracy=test_acc, classes=class_list)


# ---------------------------------------------------------------------------
# MFCC baseline features


def _mel(f: np.ndarray) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_inv(m: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mfcc(
    samples: np.ndarray,
    sample_rate: int = 16000,
    n_ceps: int = 13,
    n_filters: int = 26,
    win_s: float = 0.025,
    hop_s: float = HOP_S,
) -> np.ndarray:
    """13 cepstra per 10 ms plus delta and delta-delta columns: (T, 39)."""
    from scipy.fft import dct

    win = int(round(win_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < win:
        raise TooShortUtterance(f"{len(x)} samples is shorter than one {win}-sample window")
    x = np.append(x[0], x[1:] - 0.97 * x[:-1])
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)

    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft

    edges = _mel_inv(np.linspace(_mel(np.array(0.0)), _mel(np.array(sample_rate / 2)), n_filters + 2))
    bins = np.floor((n_fft + 1) * edges / sample_rate).astype(int)
    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for i in range(n_filters):
        lo, mid, hi = bins[i], bins[i + 1], bins[i + 2]
        for b in range(lo, mid):
            if mid > lo:
                fb[i, b] = (b - lo) / (mid - lo)
        for b in range(mid, hi):
            if hi > mid:
                fb[i, b] = (hi - b) / (hi - mid)
    logmel = np.log(np.maximum(power @ fb.T, 1e-10))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :n_ceps]

    def _delta(feat: np.ndarray, n: int = 2) -> np.ndarray:
        denom = 2 * sum(i * i for i in range(1, n + 1))
        padded = np.pad(feat, ((n, n), (0, 0)), mode="edge")
        out = np.zeros_like(feat)
        for i in range(1, n + 1):
            out += i * (padded[n + i : n + i + len(feat)] - padded[n - i : n - i + len(feat)])
        return out / denom

    d1 = _delta(ceps)
    d2 = _delta(d1)
    return np.concatenate([ceps, d1, d2], axis=1).astype(np.float32)
