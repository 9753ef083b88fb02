"""Command-line entry points.

Exit codes: 0 success, 1 usage errors, 2 data errors (missing or malformed
inputs), 3 runtime failures. Every command that owns an output directory
takes it exclusively via a ``.lock`` file and writes a resolved-config
snapshot into it. The ``SEGCPC_CONFIG`` environment variable names a
default config file used when ``--config`` is not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import inference, training, varrate
from .boundary import dump_scores
from .corpus import (
    CorpusManifest,
    Utterance,
    chunk_long_recording,
    default_fold_table,
    load_manifest,
    load_utterance,
    split_validation,
)
from .errors import (
    DataError,
    EmptyCorpus,
    MissingAlignment,
    RuntimeFailure,
    SegcpcError,
)
from .evaluation import (
    accumulate_counts,
    compute_metrics,
    format_report,
    match_boundaries,
    pair_confusion,
    reference_boundaries,
    write_report,
)
from .model import load_checkpoint
from .training import TrainConfig, apply_overrides, load_config, write_config

CONFIG_ENV = "SEGCPC_CONFIG"


@contextmanager
def _locked_output(path: str | Path):
    """Create the output directory and hold its lockfile for the run."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = open(lock, "x", encoding="utf-8")
    except FileExistsError:
        raise RuntimeFailure(
            f"output directory {out} is locked by another run; remove {lock} if stale"
        )
    fd.write(f"{os.getpid()}\n")
    fd.close()
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _snapshot_args(out: Path, args: argparse.Namespace) -> None:
    skip = {"func"}
    lines = [
        f"{k} = {v}" for k, v in sorted(vars(args).items()) if k not in skip
    ]
    (out / "config.resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig()
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        config = load_config(path, config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    return apply_overrides(config, overrides)


def _load_utterances(manifest: CorpusManifest, chunk: bool = False) -> list[Utterance]:
    utts: list[Utterance] = []
    for entry in manifest.entries:
        utt = load_utterance(entry)
        utts.extend(chunk_long_recording(utt) if chunk else [utt])
    if not utts:
        raise EmptyCorpus(f"no usable utterances in the {manifest.split} manifest")
    return utts


def _model_inputs(model, utt: Utterance, features) -> np.ndarray | None:
    if model.cfg.input_kind != "features":
        return None
    if features is None:
        raise DataError("this checkpoint consumes frontend features; pass --features")
    return features.read(utt.id)


def _read_tuned(path: str | Path) -> dict[str, float]:
    out: dict[str, float] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) == 2:
            try:
                out[parts[0]] = float(parts[1])
            except ValueError:
                pass
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    train_manifest = load_manifest(args.train_manifest, split="train")
    if args.val_manifest:
        val_manifest = load_manifest(args.val_manifest, split="val")
    else:
        train_manifest, val_manifest = split_validation(
            train_manifest, fraction=config.val_fraction, seed=config.seed
        )
    with _locked_output(args.out) as out:
        write_config(config, out / "config.resolved.cfg")
        train_utts = _load_utterances(train_manifest, chunk=args.chunk)
        val_utts = _load_utterances(val_manifest, chunk=args.chunk)
        result = training.train(config, train_utts, val_utts, out)
    print(f"best checkpoint: {result.best_path} (epoch {result.best_epoch})")
    print(f"last checkpoint: {result.last_path}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, split="eval")
    features = varrate.FeatureReader(args.features) if args.features else None
    phone_prom, word_prom = args.phone_prominence, args.word_prominence
    if args.tuned:
        tuned = _read_tuned(args.tuned)
        phone_prom = tuned.get("phone_prominence", phone_prom)
        word_prom = tuned.get("word_prominence", word_prom)
    tasks = ("phone", "word") if args.task == "both" else (args.task,)
    with _locked_output(args.out) as out:
        _snapshot_args(out, args)
        phone_out: dict[str, list[float]] = {}
        word_out: dict[str, list[float]] = {}
        scores_dir = out / "scores"
        if args.dump_scores:
            scores_dir.mkdir(exist_ok=True)
        for entry in manifest.entries:
            utt = load_utterance(entry)
            inputs = _model_inputs(model, utt, features)
            if "phone" in tasks:
                trace = inference.phone_trace(model, utt, inputs)
                phone_out[utt.id] = inference.boundaries_from_trace(trace, phone_prom)
            if "word" in tasks:
                scores, gaps = inference.word_trace(model, utt, inputs)
                word_out[utt.id] = inference.word_boundaries_from_trace(scores, gaps, word_prom)
            if args.dump_scores:
                fm = model.encode_utterance(
                    utt.samples if inputs is None else inputs, utt.id
                )
                dv, bv = model.segmentation_scores(fm.z)
                dump_scores(scores_dir / f"{utt.id}.txt", dv, bv)
        if "phone" in tasks:
            inference.write_boundary_file(out / "phone_boundaries.txt", phone_out)
        if "word" in tasks:
            inference.write_boundary_file(out / "word_boundaries.txt", word_out)
    print(f"segmented {len(manifest.entries)} utterances into {args.out}")
    return 0


def _reference_sets(
    manifest: CorpusManifest, task: str
) -> tuple[dict[str, list[float]], dict[str, list]]:
    """Per-utterance reference boundary times and raw alignments."""
    refs: dict[str, list[float]] = {}
    alignments: dict[str, list] = {}
    for entry in manifest.entries:
        utt = load_utterance(entry)
        alignment = utt.phone_alignment if task == "phone" else utt.word_alignment
        if alignment is None:
            raise MissingAlignment(f"{utt.id}: manifest has no {task} alignment")
        refs[utt.id] = reference_boundaries(alignment, utt.duration_s)
        alignments[utt.id] = alignment
    return refs, alignments


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest, split="eval")
    hyp = inference.read_boundary_file(args.hyp)
    refs, _ = _reference_sets(manifest, args.task)
    counts = [
        match_boundaries(refs[utt_id], hyp.get(utt_id, []), args.tolerance)
        for utt_id in refs
    ]
    report = compute_metrics(accumulate_counts(counts))
    print(format_report(report, title=f"{args.task} boundary detection"))
    if args.out:
        with _locked_output(args.out) as out:
            _snapshot_args(out, args)
            write_report(out / "report.txt", report)
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, split="val")
    features = varrate.FeatureReader(args.features) if args.features else None
    utts = [load_utterance(e) for e in manifest.entries]
    grid = tuple(
        round(args.grid_step * i, 10)
        for i in range(int(round(args.grid_max / args.grid_step)) + 1)
    )
    setting = inference.tune_prominence(model, utts, task=args.task, grid=grid, features=features)
    if args.task == "phone":
        prom, rvals = setting.phone_prominence, setting.phone_r_values
    else:
        prom, rvals = setting.word_prominence, setting.word_r_values
    with _locked_output(args.out) as out:
        _snapshot_args(out, args)
        lines = [
            f"{args.task}_prominence {prom}",
            f"{args.task}_best_r_value {max(rvals)}",
            "grid " + " ".join(f"{g:.2f}" for g in grid),
            f"{args.task}_r_values " + " ".join(f"{r:.6f}" for r in rvals),
        ]
        (out / "tuned.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{args.task} prominence {prom} (validation R-value {max(rvals):.4f})")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, split="eval")
    features = varrate.FeatureReader(args.features) if args.features else None
    prom = args.prominence
    if args.tuned:
        prom = _read_tuned(args.tuned).get("phone_prominence", prom)
    with _locked_output(args.out) as out:
        _snapshot_args(out, args)
        hyp: dict[str, list[float]] = {}
        alignments: dict[str, list] = {}
        traces: dict[str, np.ndarray] = {}
        for entry in manifest.entries:
            utt = load_utterance(entry)
            if utt.phone_alignment is None:
                raise MissingAlignment(f"{utt.id}: analysis needs phone alignments")
            inputs = _model_inputs(model, utt, features)
            trace = inference.phone_trace(model, utt, inputs)
            hyp[utt.id] = inference.boundaries_from_trace(trace, prom)
            alignments[utt.id] = utt.phone_alignment
            traces[utt.id] = trace
        conf = pair_confusion(alignments, hyp, default_fold_table(), args.tolerance)
        conf.to_csv(out / "pair_confusion.csv")
        plot_ids = (
            [s for s in args.plot_utterances.split(",") if s]
            if args.plot_utterances
            else list(traces)[: args.plot_count]
        )
        plots = out / "plots"
        plots.mkdir(exist_ok=True)
        for utt_id in plot_ids:
            if utt_id not in traces:
                raise DataError(f"cannot plot unknown utterance {utt_id!r}")
            refs = reference_boundaries(alignments[utt_id])
            _plot_trace(
                plots / f"{utt_id}.png", utt_id, traces[utt_id], hyp[utt_id], refs, prom
            )
    print(f"pair confusion and {len(plot_ids)} trace plots written to {args.out}")
    return 0


def _plot_trace(
    path: Path,
    utt_id: str,
    trace: np.ndarray,
    hyp: list[float],
    refs: list[float],
    prominence: float,
) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    times = (np.arange(len(trace)) + 1) * 0.010
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(times, trace, lw=1.0, color="tab:blue", label="dissimilarity")
    for i, t in enumerate(refs):
        ax.axvline(t, color="tab:green", alpha=0.6, lw=1.0, label="reference" if i == 0 else None)
    if hyp:
        ax.plot(
            hyp,
            np.interp(hyp, times, trace),
            "x",
            color="tab:red",
            label=f"detected (prominence {prominence:.2f})",
        )
    ax.set_xlabel("time (s)")
    ax.set_ylabel("score")
    ax.set_title(utt_id)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_extract(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, split="eval")
    features = varrate.FeatureReader(args.features) if args.features else None
    utts = [load_utterance(e) for e in manifest.entries]
    with _locked_output(args.out) as out:
        _snapshot_args(out, args)
        if args.kind == "frame":
            feats = {}
            for utt in utts:
                inputs = _model_inputs(model, utt, features)
                fm = model.encode_utterance(
                    utt.samples if inputs is None else inputs, utt.id
                )
                feats[utt.id] = fm.z.numpy()
            varrate.write_feature_file(out / "frames.bin", feats)
            n_frames = sum(m.shape[0] for m in feats.values())
            print(f"wrote {n_frames} frames for {len(feats)} utterances to {out / 'frames.bin'}")
            return 0
        seg = varrate.extract_segment_features(
            model,
            utts,
            boundary_source=args.boundary_source,
            features=features,
            prominence=args.prominence,
        )
        varrate.write_segment_features(out / "segments.bin", seg)
        rate = varrate.average_sampling_rate(seg)
        print(
            f"wrote {seg.total_segments} segments for {len(seg.utterances)} utterances "
            f"({rate:.2f} segments/s) to {out / 'segments.bin'}"
        )
    return 0


def _probe_split(
    kind: str, feature_path: str | None, manifest_path: str, table
) -> tuple[np.ndarray, list[str], float]:
    """Features, labels, and feature rate for one probe split."""
    manifest = load_manifest(manifest_path, split="probe")
    xs: list[np.ndarray] = []
    ys: list[str] = []
    n_units = 0
    total_s = 0.0
    seg = varrate.read_segment_features(feature_path) if kind == "segment" else None
    reader = varrate.FeatureReader(feature_path) if kind == "frame" else None
    for entry in manifest.entries:
        utt = load_utterance(entry)
        if utt.phone_alignment is None:
            raise MissingAlignment(f"{utt.id}: the probe needs phone alignments")
        if kind == "mfcc":
            mat = varrate.mfcc(utt.samples)
            n_units += mat.shape[0]
        elif kind == "frame":
            mat = reader.read(utt.id)
            n_units += mat.shape[0]
        else:
            if utt.id not in seg.utterances:
                raise DataError(f"no segment features for utterance {utt.id!r}")
            us = seg.utterances[utt.id]
            mat = varrate.expand_to_frames(us)
            n_units += us.num_segments
        labels = varrate.frame_labels(utt.phone_alignment, mat.shape[0], table)
        keep = [i for i, lab in enumerate(labels) if lab is not None]
        xs.append(mat[keep])
        ys.extend(labels[i] for i in keep)
        total_s += mat.shape[0] * 0.010
    if not xs:
        raise EmptyCorpus("probe split is empty")
    return np.concatenate(xs), ys, n_units / total_s if total_s else float("nan")


def cmd_probe(args: argparse.Namespace) -> int:
    table = default_fold_table()
    train_x, train_y, train_rate = _probe_split(
        args.kind, args.train_features, args.train_manifest, table
    )
    val_x, val_y, val_rate = _probe_split(args.kind, args.val_features, args.val_manifest, table)
    test_x = test_y = None
    test_rate = None
    if args.test_manifest:
        test_x, test_y, test_rate = _probe_split(
            args.kind, args.test_features, args.test_manifest, table
        )
    classes = sorted(set(train_y) | set(val_y) | set(test_y or []))
    result = varrate.linear_probe(
        train_x, train_y, val_x, val_y, test_x, test_y, classes=classes, seed=args.seed
    )
    result.train_rate_hz = train_rate
    result.eval_rate_hz = test_rate if test_rate is not None else val_rate
    with _locked_output(args.out) as out:
        _snapshot_args(out, args)
        lines = [
            f"val_accuracy {result.val_accuracy:.6f}",
            f"test_accuracy {result.test_accuracy:.6f}",
            f"train_rate_hz {result.train_rate_hz:.4f}",
            f"eval_rate_hz {result.eval_rate_hz:.4f}",
            f"n_classes {len(result.classes)}",
        ]
        (out / "probe.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(
        f"probe accuracy: val {100 * result.val_accuracy:.2f}% "
        f"test {100 * result.test_accuracy:.2f}% "
        f"(features at {result.eval_rate_hz:.2f} Hz)"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segcpc",
        description="Self-supervised phone and word segmentation from raw speech",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", help="held-out manifest; defaults to a seeded split")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help=f"config file (or ${CONFIG_ENV})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--chunk", action="store_true", help="split long recordings at silences")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="write boundary files for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("phone", "word", "both"), default="phone")
    p.add_argument("--phone-prominence", type=float, default=0.0)
    p.add_argument("--word-prominence", type=float, default=0.0)
    p.add_argument("--tuned", help="tuned.txt from the tune command")
    p.add_argument("--features", help="frontend feature file for feature-input models")
    p.add_argument("--dump-scores", action="store_true", help="write per-gap score tables")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score a boundary file against references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyp", required=True, help="boundary file to score")
    p.add_argument("--task", choices=("phone", "word"), default="phone")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--out", help="optional output directory for report.txt")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tune", help="grid-search peak prominence on a validation set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("phone", "word"), default="phone")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-max", type=float, default=0.50)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--features", help="frontend feature file for feature-input models")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("analyze", help="pair confusion table and score-trace plots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prominence", type=float, default=0.0)
    p.add_argument("--tuned", help="tuned.txt from the tune command")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--plot-utterances", help="comma-separated utterance ids to plot")
    p.add_argument("--plot-count", type=int, default=4)
    p.add_argument("--features", help="frontend feature file for feature-input models")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("extract", help="dump frame or segment features to a file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("segment", "frame"), default="segment")
    p.add_argument(
        "--boundary-source",
        choices=varrate.BOUNDARY_SOURCES,
        default="differentiable",
    )
    p.add_argument("--prominence", type=float, default=0.0, help="for external_peaks")
    p.add_argument("--features", help="frontend feature file for feature-input models")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="linear phone classification on features")
    p.add_argument("--kind", choices=("frame", "segment", "mfcc"), default="frame")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--train-features", help="feature file (unused for --kind mfcc)")
    p.add_argument("--val-features")
    p.add_argument("--test-features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    torch.manual_seed(0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SegcpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 3


if __name__ == "__main__":
    sys.exit(main())
