"""Boundary inference: peak picking on score traces and prominence tuning.

Phone boundaries are the prominent peaks of the adjacent-frame
dissimilarity trace; word boundaries are the prominent peaks of the
next-segment surprisal (one minus the context-to-segment similarity) over
consecutive segment transitions. Peak prominence is tuned once on a
validation set by maximizing the boundary R-value over a fixed grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import find_peaks

from .corpus import HOP_S, Utterance
from .errors import EmptyValidation, MissingAlignment, MissingFile
from .evaluation import accumulate_counts, compute_metrics, match_boundaries, reference_boundaries

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(51))  # 0.00 .. 0.50


@dataclass
class ProminenceSetting:
    """Tuned peak prominences plus the grid evidence behind them."""

    phone_prominence: float = 0.0
    word_prominence: float = 0.0
    grid: tuple[float, ...] = DEFAULT_GRID
    phone_r_values: list[float] = field(default_factory=list)
    word_r_values: list[float] = field(default_factory=list)


def pick_peaks(trace: np.ndarray, prominence: float = 0.0) -> np.ndarray:
    """Indices of local maxima with topographic prominence >= the setting.

    The first and last positions of the trace are never peaks. A setting of
    zero keeps every local maximum.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size < 3:
        return np.empty(0, dtype=int)
    peaks, _ = find_peaks(trace, prominence=prominence)
    return peaks


def phone_trace(model, utt: Utterance, inputs: np.ndarray | None = None) -> np.ndarray:
    """Dissimilarity trace of one utterance under a trained model."""
    fm = model.encode_utterance(utt.samples if inputs is None else inputs, utt.id)
    dv, _ = model.segmentation_scores(fm.z)
    return dv.d.numpy()


def boundaries_from_trace(
    trace: np.ndarray, prominence: float, hop_s: float = HOP_S
) -> list[float]:
    """Peak indices of a per-gap trace as boundary times in seconds.

    Entry t of the trace (0-based) scores the gap between frames t + 1 and
    t + 2 (1-based), which sits at (t + 1) * hop_s.
    """
    return [round(float(i + 1) * hop_s, 10) for i in pick_peaks(trace, prominence)]


def phone_boundaries(model, utt: Utterance, prominence: float) -> list[float]:
    """Phone boundary times for one utterance; edges are never emitted."""
    return boundaries_from_trace(phone_trace(model, utt), prominence)


def word_trace(
    model, utt: Utterance, inputs: np.ndarray | None = None
) -> tuple[np.ndarray, list[int]]:
    """Next-segment surprisal per segment transition, with the cut gaps.

    Returns (scores, gap_indices) where scores[t] = 1 - sim(c_t, s_{t+1})
    and gap_indices[t] is the 1-based frame gap where segment t + 1 starts.
    Utterances with fewer than two segments yield empty arrays.
    """
    fm = model.encode_utterance(utt.samples if inputs is None else inputs, utt.id)
    with torch.no_grad():
        _, bv, seg, ctx = model.segment_pass(fm.z)
    gaps = bv.gap_indices()
    if not gaps:
        return np.empty(0), []
    c = torch.nn.functional.normalize(ctx.c, dim=-1)
    s = torch.nn.functional.normalize(seg.s, dim=-1)
    sims = (c[:-1] * s[1:]).sum(dim=-1)
    return (1.0 - sims).numpy(), gaps


def word_boundaries_from_trace(
    scores: np.ndarray, gap_indices: list[int], prominence: float, hop_s: float = HOP_S
) -> list[float]:
    """Prominent transitions as word boundary times.

    The score trace is padded with its minimum on both ends before peak
    picking so that first/last transitions can still qualify; a constant
    trace therefore yields nothing.
    """
    if len(scores) == 0:
        return []
    if len(scores) != len(gap_indices):
        raise ValueError("one score per segment transition expected")
    padded = np.concatenate([[scores.min()], scores, [scores.min()]])
    peaks = pick_peaks(padded, prominence)
    return [round(gap_indices[int(i) - 1] * hop_s, 10) for i in peaks]


def word_boundaries(model, utt: Utterance, prominence: float) -> list[float]:
    scores, gaps = word_trace(model, utt)
    return word_boundaries_from_trace(scores, gaps, prominence)


def tune_from_traces(
    traces: list[tuple[np.ndarray, list[int] | None]],
    references: list[list[float]],
    grid: tuple[float, ...] = DEFAULT_GRID,
    tolerance_s: float = 0.02,
) -> tuple[float, float, list[float]]:
    """Grid-search prominence against reference boundaries.

    Each trace is (scores, gap_indices); gap_indices None marks a frame-gap
    (phone) trace. Returns (best_prominence, best_r_value, r_values); ties
    resolve toward the larger prominence.
    """
    best_prom, best_rval, r_values = grid[0], -np.inf, []
    for prom in grid:
        counts = []
        for (trace, gaps), ref in zip(traces, references):
            if gaps is None:
                hyp = boundaries_from_trace(trace, prom)
            else:
                hyp = word_boundaries_from_trace(trace, gaps, prom)
            counts.append(match_boundaries(ref, hyp, tolerance_s))
        report = compute_metrics(accumulate_counts(counts))
        r_values.append(report.r_value)
        if report.r_value >= best_rval:
            best_prom, best_rval = prom, report.r_value
    return best_prom, best_rval, r_values


def tune_prominence(
    model,
    val_utterances: list[Utterance],
    task: str = "phone",
    grid: tuple[float, ...] = DEFAULT_GRID,
    tolerance_s: float = 0.02,
    features=None,
) -> ProminenceSetting:
    """Pick the prominence that maximizes validation R-value for a task.

    ``features`` maps utterance ids to frontend feature matrices (a mapping
    or a feature-file reader) for models that do not consume waveforms.
    """
    if task not in ("phone", "word"):
        raise ValueError(f"unknown task {task!r}")
    traces: list[tuple[np.ndarray, list[int] | None]] = []
    references: list[list[float]] = []
    for utt in val_utterances:
        alignment = utt.phone_alignment if task == "phone" else utt.word_alignment
        if alignment is None:
            raise MissingAlignment(f"{utt.id}: tuning needs {task} alignments")
        references.append(reference_boundaries(alignment, utt.duration_s))
        inputs = None
        if features is not None:
            inputs = features.read(utt.id) if hasattr(features, "read") else features[utt.id]
        if task == "phone":
            traces.append((phone_trace(model, utt, inputs), None))
        else:
            scores, gaps = word_trace(model, utt, inputs)
            traces.append((scores, gaps))
    if not traces:
        raise EmptyValidation("no validation utterances to tune on")
    prom, rval, r_values = tune_from_traces(traces, references, grid, tolerance_s)
    setting = ProminenceSetting(grid=tuple(grid))
    if task == "phone":
        setting.phone_prominence, setting.phone_r_values = prom, r_values
    else:
        setting.word_prominence, setting.word_r_values = prom, r_values
    return setting


def write_boundary_file(path: str | Path, boundaries: dict[str, list[float]]) -> None:
    """One line per utterance: ``<utt_id> <t1> <t2> ...`` in seconds."""
    lines = []
    for utt_id, times in boundaries.items():
        parts = [utt_id] + [f"{t:.3f}" for t in times]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_boundary_file(path: str | Path) -> dict[str, list[float]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"boundary file not found: {path}")
    out: dict[str, list[float]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split()
        out[parts[0]] = [float(t) for t in parts[1:]]
    return out
