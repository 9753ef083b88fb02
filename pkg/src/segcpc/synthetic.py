"""Synthetic desk-scale corpus with boundaries detectable by construction.

Each "phone" is a constant signal level held for a whole number of frames,
with consecutive phones alternating in sign, plus a little Gaussian noise.
Level changes land exactly on frame-stride multiples, so a working
boundary detector should recover them essentially perfectly. The generator
writes wavs, phone and word alignments, and per-split manifests; labels
are drawn from the standard phone inventory so fold tables apply.

Run directly to build a corpus: ``python -m segcpc.synthetic OUT_DIR``.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .corpus import SAMPLE_RATE, CorpusManifest, ManifestEntry, write_manifest

FRAME_STRIDE = 160

# (label, level): consecutive draws alternate between the two sign groups.
POSITIVE_PHONES = (("iy", 0.25), ("aa", 0.45), ("s", 0.65), ("m", 0.85))
NEGATIVE_PHONES = (("t", -0.25), ("l", -0.45), ("z", -0.65), ("ow", -0.85))


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 24
    n_val: int = 8
    n_test: int = 8
    seed: int = 0
    noise: float = 0.003
    min_phones: int = 6
    max_phones: int = 10
    min_frames: int = 8
    max_frames: int = 20


def _render_utterance(rng: np.random.Generator, spec: SyntheticSpec):
    """Returns (samples float array, phone intervals, word intervals)."""
    n_phones = int(rng.integers(spec.min_phones, spec.max_phones + 1))
    sign = int(rng.integers(0, 2))
    pieces, phones = [], []
    cursor = 0
    for _ in range(n_phones):
        group = POSITIVE_PHONES if sign == 0 else NEGATIVE_PHONES
        label, level = group[int(rng.integers(0, len(group)))]
        n = FRAME_STRIDE * int(rng.integers(spec.min_frames, spec.max_frames + 1))
        pieces.append(np.full(n, level) + rng.normal(0.0, spec.noise, n))
        phones.append((cursor, cursor + n, label))
        cursor += n
        sign = 1 - sign

    words = []
    i = 0
    while i < n_phones:
        span = min(int(rng.integers(2, 5)), n_phones - i)
        group = phones[i : i + span]
        words.append((group[0][0], group[-1][1], "".join(p[2] for p in group)))
        i += span
    return np.concatenate(pieces), phones, words


def _write_alignment(path: Path, intervals) -> None:
    path.write_text(
        "\n".join(f"{a} {b} {label}" for a, b, label in intervals) + "\n", encoding="utf-8"
    )


def generate_corpus(out_dir: str | Path, spec: SyntheticSpec | None = None) -> dict[str, Path]:
    """Write a three-split corpus; returns the manifest path per split."""
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    for sub in ("wav", "phn", "wrd"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    manifests: dict[str, Path] = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        entries = []
        for i in range(count):
            utt_id = f"{split}_{i:03d}"
            samples, phones, words = _render_utterance(rng, spec)
            pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
            wav_path = out / "wav" / f"{utt_id}.wav"
            phn_path = out / "phn" / f"{utt_id}.phn"
            wrd_path = out / "wrd" / f"{utt_id}.wrd"
            wavfile.write(wav_path, SAMPLE_RATE, pcm)
            _write_alignment(phn_path, phones)
            _write_alignment(wrd_path, words)
            entries.append(ManifestEntry(utt_id, wav_path, phn_path, wrd_path))
        manifest_path = out / f"{split}.tsv"
        write_manifest(CorpusManifest(split=split, entries=entries), manifest_path)
        manifests[split] = manifest_path
    return manifests


def generate_frontend_features(
    manifest: CorpusManifest,
    out_path: str | Path,
    dim: int = 32,
    seed: int = 0,
    noise: float = 0.05,
) -> Path:
    """Fake pretrained frontend features aligned with the conv frame grid.

    Each frame gets a fixed random embedding of the phone at its nominal
    center plus noise, at the same length the conv encoder would produce,
    so the two-stage pipeline can be exercised without a real frontend.
    """
    from .corpus import load_utterance
    from .frames import FrameEncoderConfig
    from .varrate import frame_center_s, write_feature_file

    rng = np.random.default_rng(seed)
    cfg = FrameEncoderConfig()
    embeddings: dict[str, np.ndarray] = {}
    feats: dict[str, np.ndarray] = {}
    for entry in manifest.entries:
        utt = load_utterance(entry)
        if utt.phone_alignment is None:
            continue
        n_frames = cfg.output_length(len(utt.samples))
        mat = np.zeros((n_frames, dim), dtype=np.float32)
        j = 0
        for t in range(n_frames):
            center = frame_center_s(t)
            while j < len(utt.phone_alignment) and utt.phone_alignment[j].end_s <= center:
                j += 1
            label = (
                utt.phone_alignment[j].label
                if j < len(utt.phone_alignment) and utt.phone_alignment[j].start_s <= center
                else "h#"
            )
            if label not in embeddings:
                embeddings[label] = rng.normal(0.0, 1.0, dim)
            mat[t] = embeddings[label] + rng.normal(0.0, noise, dim)
        feats[utt.id] = mat
    out_path = Path(out_path)
    write_feature_file(out_path, feats)
    return out_path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="generate a synthetic desk-scale corpus")
    parser.add_argument("out_dir")
    parser.add_argument("--n-train", type=int, default=24)
    parser.add_argument("--n-val", type=int, default=8)
    parser.add_argument("--n-test", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise", type=float, default=0.003)
    args = parser.parse_args(argv)
    manifests = generate_corpus(
        args.out_dir,
        SyntheticSpec(
            n_train=args.n_train,
            n_val=args.n_val,
            n_test=args.n_test,
            seed=args.seed,
            noise=args.noise,
        ),
    )
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
