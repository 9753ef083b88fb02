"""Corpus plumbing: manifests, alignments, label folds, chunking, batching.

A corpus is described by a manifest file with one tab-separated line per
utterance::

    <utt_id>\t<wav_path>\t<phn_path|->\t<wrd_path|->

Alignment files hold one interval per line as ``<start_sample> <end_sample>
<label>``. Audio must be 16 kHz mono 16-bit PCM; anything else is rejected
rather than resampled.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import (
    EmptyCorpus,
    MalformedAlignment,
    MalformedManifest,
    MissingFile,
    NegativeDuration,
    NonMonotoneAlignment,
    UnknownLabel,
    UnsupportedAudio,
)

SAMPLE_RATE = 16000
HOP_S = 0.010

# Non-speech runs longer than this are cut at their midpoint when chunking
# long recordings; chunk edges are trimmed down to at most MAX_EDGE_SILENCE_S.
CUT_SILENCE_S = 0.040
MAX_EDGE_SILENCE_S = 0.020
MIN_CHUNK_S = 0.100


@dataclass(frozen=True)
class LabeledInterval:
    """A labeled time span, in seconds, within one utterance."""

    start_s: float
    end_s: float
    label: str

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class Utterance:
    """One recording with optional phone / word reference alignments."""

    id: str
    samples: np.ndarray  # float32 in [-1, 1], 16 kHz mono
    phone_alignment: list[LabeledInterval] | None = None
    word_alignment: list[LabeledInterval] | None = None

    @property
    def duration_s(self) -> float:
        return len(self.samples) / SAMPLE_RATE


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    audio_path: Path
    phone_path: Path | None
    word_path: Path | None


@dataclass
class CorpusManifest:
    """An ordered set of manifest entries for one split."""

    split: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def utterance_ids(self) -> list[str]:
        return [e.utt_id for e in self.entries]


def load_manifest(path: str | Path, split: str = "train") -> CorpusManifest:
    """Parse a manifest file and check that every referenced path exists.

    Blank lines and lines starting with ``#`` are skipped. Relative paths
    are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise MalformedManifest(
                f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        utt_id, wav, phn, wrd = (f.strip() for f in fields)
        if not utt_id or not wav:
            raise MalformedManifest(f"{path}:{lineno}: empty utterance id or wav path")
        if utt_id in seen:
            raise MalformedManifest(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)

        def _resolve(p: str) -> Path | None:
            if p == "-":
                return None
            q = Path(p)
            if not q.is_absolute():
                q = base / q
            if not q.is_file():
                raise MissingFile(f"{path}:{lineno}: no such file: {q}")
            return q

        wav_path = _resolve(wav)
        assert wav_path is not None
        entries.append(ManifestEntry(utt_id, wav_path, _resolve(phn), _resolve(wrd)))
    if not entries:
        raise EmptyCorpus(f"manifest {path} lists no utterances")
    return CorpusManifest(split=split, entries=entries)


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Serialize a manifest with absolute paths."""
    lines = []
    for e in manifest.entries:
        phn = str(e.phone_path) if e.phone_path else "-"
        wrd = str(e.word_path) if e.word_path else "-"
        lines.append(f"{e.utt_id}\t{e.audio_path}\t{phn}\t{wrd}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_alignment(path: str | Path, sample_rate: int = SAMPLE_RATE) -> list[LabeledInterval]:
    """Read ``<start_sample> <end_sample> <label>`` lines into intervals.

    Intervals must be strictly positive in duration and non-overlapping in
    file order; gaps between consecutive intervals are allowed.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"alignment not found: {path}")
    intervals: list[LabeledInterval] = []
    prev_end = -1
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MalformedAlignment(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise MalformedAlignment(f"{path}:{lineno}: non-integer sample index") from exc
        if end <= start:
            raise NegativeDuration(f"{path}:{lineno}: interval [{start}, {end}] is empty")
        if start < 0:
            raise NonMonotoneAlignment(f"{path}:{lineno}: negative start {start}")
        if start < prev_end:
            raise NonMonotoneAlignment(
                f"{path}:{lineno}: interval starts at {start} before previous end {prev_end}"
            )
        prev_end = end
        intervals.append(LabeledInterval(start / sample_rate, end / sample_rate, parts[2]))
    return intervals


def serialize_alignment(
    intervals: Sequence[LabeledInterval], path: str | Path, sample_rate: int = SAMPLE_RATE
) -> None:
    """Write intervals back to the ``<start> <end> <label>`` sample format."""
    lines = [
        f"{round(iv.start_s * sample_rate)} {round(iv.end_s * sample_rate)} {iv.label}"
        for iv in intervals
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_waveform(path: str | Path) -> np.ndarray:
    """Read a wav file, enforcing 16 kHz mono 16-bit PCM."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"wav not found: {path}")
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise UnsupportedAudio(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise UnsupportedAudio(f"{path}: {data.ndim} channels, expected mono")
    if data.dtype != np.int16:
        raise UnsupportedAudio(f"{path}: dtype {data.dtype}, expected 16-bit PCM")
    return data.astype(np.float32) / 32768.0


def load_utterance(entry: ManifestEntry) -> Utterance:
    """Materialize one manifest entry: waveform plus any alignments."""
    samples = load_waveform(entry.audio_path)
    duration = len(samples) / SAMPLE_RATE
    tol = 1.0 / SAMPLE_RATE

    def _load(p: Path | None) -> list[LabeledInterval] | None:
        if p is None:
            return None
        ivs = parse_alignment(p)
        for iv in ivs:
            if iv.start_s < -tol or iv.end_s > duration + tol:
                raise NonMonotoneAlignment(
                    f"{p}: interval [{iv.start_s:.3f}, {iv.end_s:.3f}] outside "
                    f"utterance of {duration:.3f} s"
                )
        return ivs

    return Utterance(
        id=entry.utt_id,
        samples=samples,
        phone_alignment=_load(entry.phone_path),
        word_alignment=_load(entry.word_path),
    )


def split_validation(
    manifest: CorpusManifest, fraction: float = 0.1, seed: int = 0
) -> tuple[CorpusManifest, CorpusManifest]:
    """Hold out a deterministic fraction of a manifest for validation.

    Entries are ranked by the SHA-1 of ``"<seed>:<utt_id>"`` and the
    ``ceil(fraction * N)`` smallest hashes form the validation split, so the
    result is independent of manifest order and stable across runs.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_val = math.ceil(fraction * len(manifest.entries))

    def _rank(utt_id: str) -> str:
        return hashlib.sha1(f"{seed}:{utt_id}".encode("utf-8")).hexdigest()

    val_ids = set(sorted(manifest.utterance_ids, key=_rank)[:n_val])
    train = [e for e in manifest.entries if e.utt_id not in val_ids]
    val = [e for e in manifest.entries if e.utt_id in val_ids]
    if not train:
        raise EmptyCorpus("validation split consumed every utterance")
    return (
        CorpusManifest(split=manifest.split, entries=train),
        CorpusManifest(split="val", entries=val),
    )


class LabelFoldTable:
    """Maps phone labels to broad classes and to the 48-class training fold.

    The broad fold is total over the inventory; the 48-class fold may drop
    labels (marked ``-`` in the table), in which case :meth:`fold` returns
    ``None`` and probe pipelines exclude those frames.
    """

    BROAD = "broad"
    PROBE48 = "probe48"

    def __init__(self, broad: dict[str, str], probe48: dict[str, str | None]):
        self._broad = dict(broad)
        self._probe48 = dict(probe48)
        # Fixed presentation order for confusion tables.
        order = []
        for cls in broad.values():
            if cls not in order:
                order.append(cls)
        self.broad_classes: list[str] = order
        self.probe_classes: list[str] = sorted(
            {c for c in probe48.values() if c is not None}
        )

    @staticmethod
    def _read_two_column(text: str, source: str) -> dict[str, str]:
        table: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MalformedManifest(f"{source}:{lineno}: expected 2 columns")
            table[parts[0]] = parts[1]
        return table

    @classmethod
    def from_files(cls, broad_path: str | Path, probe48_path: str | Path) -> "LabelFoldTable":
        broad = cls._read_two_column(Path(broad_path).read_text(encoding="utf-8"), str(broad_path))
        raw48 = cls._read_two_column(
            Path(probe48_path).read_text(encoding="utf-8"), str(probe48_path)
        )
        probe48 = {k: (None if v == "-" else v) for k, v in raw48.items()}
        return cls(broad, probe48)

    @classmethod
    def load_default(cls) -> "LabelFoldTable":
        data = resources.files("segcpc.data")
        broad = cls._read_two_column(
            (data / "broad_classes.txt").read_text(encoding="utf-8"), "broad_classes.txt"
        )
        raw48 = cls._read_two_column(
            (data / "fold48.txt").read_text(encoding="utf-8"), "fold48.txt"
        )
        probe48 = {k: (None if v == "-" else v) for k, v in raw48.items()}
        return cls(broad, probe48)

    @property
    def inventory(self) -> list[str]:
        return sorted(self._broad)

    def fold(self, label: str, mode: str) -> str | None:
        if mode == self.BROAD:
            table: dict = self._broad
        elif mode == self.PROBE48:
            table = self._probe48
        else:
            raise ValueError(f"unknown fold mode {mode!r}")
        if label not in table:
            raise UnknownLabel(f"label {label!r} not in fold table")
        return table[label]

    def is_nonspeech(self, label: str) -> bool:
        return self.fold(label, self.BROAD) == "Others"


_DEFAULT_FOLD: LabelFoldTable | None = None


def default_fold_table() -> LabelFoldTable:
    global _DEFAULT_FOLD
    if _DEFAULT_FOLD is None:
        _DEFAULT_FOLD = LabelFoldTable.load_default()
    return _DEFAULT_FOLD


def fold_phone_label(label: str, mode: str, table: LabelFoldTable | None = None) -> str | None:
    """Fold one label; see :class:`LabelFoldTable`."""
    return (table or default_fold_table()).fold(label, mode)


def _nonspeech_runs(
    intervals: Sequence[LabeledInterval], table: LabelFoldTable
) -> list[tuple[float, float]]:
    """Maximal spans covered by consecutive non-speech intervals."""
    runs: list[tuple[float, float]] = []
    for iv in intervals:
        if not table.is_nonspeech(iv.label):
            continue
        if runs and abs(iv.start_s - runs[-1][1]) < 1e-9:
            runs[-1] = (runs[-1][0], iv.end_s)
        else:
            runs.append((iv.start_s, iv.end_s))
    return runs


def _clip_intervals(
    intervals: Sequence[LabeledInterval] | None, start_s: float, end_s: float
) -> list[LabeledInterval] | None:
    if intervals is None:
        return None
    out = []
    for iv in intervals:
        s, e = max(iv.start_s, start_s), min(iv.end_s, end_s)
        if e - s > 1e-9:
            out.append(LabeledInterval(s - start_s, e - start_s, iv.label))
    return out


def chunk_long_recording(
    utt: Utterance, table: LabelFoldTable | None = None
) -> list[Utterance]:
    """Split a recording at long internal silences and trim silent edges.

    Every non-speech run longer than 40 ms is cut at its midpoint; each
    resulting chunk is then trimmed so it starts and ends with at most 20 ms
    of non-speech. Chunks with no speech content are dropped, as are slivers
    shorter than 100 ms. The speech-labeled portion of the signal is never
    touched. Requires a phone alignment; an utterance without one is
    returned as-is.
    """
    if utt.phone_alignment is None:
        return [utt]
    table = table or default_fold_table()
    runs = _nonspeech_runs(utt.phone_alignment, table)
    speech = [iv for iv in utt.phone_alignment if not table.is_nonspeech(iv.label)]
    if not speech:
        return []

    cuts = [0.5 * (a + b) for a, b in runs if (b - a) > CUT_SILENCE_S + 1e-9
            and a > 1e-9 and b < utt.duration_s - 1e-9]
    edges = [0.0] + cuts + [utt.duration_s]

    chunks: list[Utterance] = []
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        spans = [iv for iv in speech if iv.start_s < hi and iv.end_s > lo]
        if not spans:
            continue
        first_speech = min(iv.start_s for iv in spans)
        last_speech = max(iv.end_s for iv in spans)
        start = max(lo, first_speech - MAX_EDGE_SILENCE_S)
        end = min(hi, last_speech + MAX_EDGE_SILENCE_S)
        if end - start < MIN_CHUNK_S:
            continue
        i0 = round(start * SAMPLE_RATE)
        i1 = round(end * SAMPLE_RATE)
        start, end = i0 / SAMPLE_RATE, i1 / SAMPLE_RATE
        chunks.append(
            Utterance(
                id=utt.id if len(edges) == 2 and i0 == 0 and i1 == len(utt.samples)
                else f"{utt.id}-c{len(chunks):02d}",
                samples=utt.samples[i0:i1],
                phone_alignment=_clip_intervals(utt.phone_alignment, start, end),
                word_alignment=_clip_intervals(utt.word_alignment, start, end),
            )
        )
    return chunks


def iter_epoch_batches(
    items: Sequence, batch_size: int, seed: int, epoch: int
) -> Iterator[list]:
    """Yield shuffled batches, deterministically for a given (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(items)))
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [items[j] for j in order[i : i + batch_size]]


def check_disjoint_splits(manifests: Iterable[CorpusManifest]) -> None:
    """Raise if any utterance id appears in more than one manifest."""
    seen: dict[str, str] = {}
    for m in manifests:
        for utt_id in m.utterance_ids:
            if utt_id in seen:
                raise MalformedManifest(
                    f"utterance {utt_id!r} appears in splits {seen[utt_id]!r} and {m.split!r}"
                )
            seen[utt_id] = m.split
