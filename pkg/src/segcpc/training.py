"""Joint training of the frame and segment branches.

The frame loss is always on; the segment loss joins after a configurable
number of epochs (0-based), once frame representations are stable enough
for boundary detection to produce meaningful segments. Validation phone
R-value is computed every epoch with tuned peak prominence and selects the
best checkpoint.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import CorpusManifest, Utterance, iter_epoch_batches, load_utterance
from .errors import DataError, DegenerateUtterance, DivergedTraining, EmptyCorpus
from .frames import NegativeSamplingPolicy, nfc_batch_loss
from .model import ModelConfig, SegmentalCPC, save_checkpoint
from .segments import nsc_batch_loss
from .varrate import FeatureReader, multistep_nfc_loss


@dataclass
class TrainConfig:
    """Everything a training run needs beyond the data itself."""

    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 100
    nsc_start_epoch: int = 2
    threshold_init: float = 0.05
    threshold_learnable: bool = False
    negative_k: int = 1
    negative_mode: str = "same_utterance"
    rep_mode: str = "avg"
    aggregator_mode: str = "rnn"
    use_p2: bool = True
    seed: int = 0
    grad_clip: float = 0.0
    deterministic: bool = True
    val_fraction: float = 0.1
    # architecture knobs
    input_kind: str = "waveform"
    feature_file: str = ""
    feature_dim: int = 256
    channels: int = 256
    frame_dim: int = 64
    segment_dim: int = 256
    context_hidden: int = 64
    frame_context: bool = False
    m_steps: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.nsc_start_epoch < 0:
            raise ValueError("batch_size, epochs, nsc_start_epoch must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_kind=self.input_kind,
            feature_dim=self.feature_dim,
            channels=self.channels,
            frame_dim=self.frame_dim,
            segment_dim=self.segment_dim,
            context_hidden=self.context_hidden,
            rep_mode=self.rep_mode,
            aggregator_mode=self.aggregator_mode,
            use_p2=self.use_p2,
            threshold_init=self.threshold_init,
            threshold_learnable=self.threshold_learnable,
            frame_context=self.frame_context,
            m_steps=self.m_steps,
        )

    def negative_policy(self) -> NegativeSamplingPolicy:
        return NegativeSamplingPolicy(k=self.negative_k, mode=self.negative_mode)


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise DataError(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise DataError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines into a config, over a base."""
    values = dataclasses.asdict(base or TrainConfig())
    types = {f.name: type(getattr(TrainConfig(), f.name)) for f in dataclasses.fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise DataError(f"config line {lineno}: expected 'key = value'")
            key, val = parts
        key = key.strip()
        if key not in types:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], val)
    return TrainConfig(**values)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply CLI ``key=value`` overrides on top of a parsed config."""
    values = dataclasses.asdict(config)
    types = {f.name: type(getattr(TrainConfig(), f.name)) for f in dataclasses.fields(TrainConfig)}
    for key, raw in overrides.items():
        if key not in types:
            raise DataError(f"unknown config key {key!r}")
        values[key] = _coerce(key, types[key], str(raw))
    return TrainConfig(**values)


def write_config(config: TrainConfig, path: str | Path) -> None:
    """Snapshot every resolved key, one per line."""
    lines = [
        f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(TrainConfig)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def build_model(config: TrainConfig) -> SegmentalCPC:
    """Construct a model with seed-determined initial weights."""
    torch.manual_seed(config.seed)
    return SegmentalCPC(config.model_config())


@dataclass
class EpochStats:
    epoch: int
    loss_nfc: float
    loss_nsc: float
    val_r_value: float
    threshold: float


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    metrics_path: Path
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -math.inf


def combined_loss(
    model: SegmentalCPC,
    zs: list[torch.Tensor],
    config: TrainConfig,
    epoch: int,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, float, float, int]:
    """Frame loss plus, from ``nsc_start_epoch`` on, the segment loss.

    Returns (total, nfc_value, nsc_value, n_nsc_utterances).
    """
    policy = config.negative_policy()
    if model.frame_predictor is not None:
        frame_losses = [
            multistep_nfc_loss(z, model.frame_predictor, policy.k, generator)
            for z in zs
            if z.shape[0] >= model.frame_predictor.m_steps + 2
        ]
        if not frame_losses:
            raise DegenerateUtterance("batch has no utterance long enough for the frame loss")
        nfc = torch.stack(frame_losses).mean()
    else:
        nfc = nfc_batch_loss(zs, policy, generator)

    nsc = torch.zeros(())
    n_nsc = 0
    if epoch >= config.nsc_start_epoch:
        contexts, segments = [], []
        for z in zs:
            if z.shape[0] < 2:
                continue
            _, _, seg, ctx = model.segment_pass(z)
            contexts.append(ctx.c)
            segments.append(seg.s)
        if contexts:
            nsc, n_nsc = nsc_batch_loss(contexts, segments, policy, generator)
    total = nfc + nsc
    return total, float(nfc.detach()), float(nsc.detach()), n_nsc


def _encode_batch(
    model: SegmentalCPC, batch: list[Utterance], features: FeatureReader | None
) -> list[torch.Tensor]:
    """Frame matrices for a batch, sliced back to true lengths."""
    if model.cfg.input_kind == "features":
        assert features is not None
        return [
            model.frame_encoder(torch.from_numpy(features.read(u.id)))
            for u in batch
        ]
    lengths = torch.tensor([len(u.samples) for u in batch], dtype=torch.long)
    maxlen = int(lengths.max())
    wav = torch.zeros(len(batch), maxlen)
    for i, u in enumerate(batch):
        wav[i, : len(u.samples)] = torch.from_numpy(u.samples)
    z, frame_lengths = model.frame_encoder(wav, lengths)
    return [z[i, : int(frame_lengths[i])] for i in range(len(batch))]


def _validation_r_value(
    model: SegmentalCPC, val: Sequence[Utterance], features: FeatureReader | None = None
) -> float:
    from .inference import tune_prominence

    scored = [u for u in val if u.phone_alignment]
    if not scored:
        return math.nan
    model.eval()
    try:
        setting = tune_prominence(model, list(scored), task="phone", features=features)
        return max(setting.phone_r_values)
    finally:
        model.train()


def materialize(data: CorpusManifest | Sequence[Utterance]) -> list[Utterance]:
    if isinstance(data, CorpusManifest):
        return [load_utterance(e) for e in data.entries]
    return list(data)


def train(
    config: TrainConfig,
    train_data: CorpusManifest | Sequence[Utterance],
    val_data: CorpusManifest | Sequence[Utterance] | None,
    out_dir: str | Path,
    model: SegmentalCPC | None = None,
    log: Callable[[str], None] = print,
) -> TrainResult:
    """Run the full training loop and leave checkpoints plus a metrics log.

    Writes ``checkpoint_best.pt`` (by validation phone R-value),
    ``checkpoint_last.pt``, and ``metrics.log`` with one row per epoch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        set_deterministic(config.seed)
    if model is None:
        model = build_model(config)

    train_utts = materialize(train_data)
    if not train_utts:
        raise EmptyCorpus("no training utterances")
    val_utts = materialize(val_data) if val_data is not None else []
    features = FeatureReader(config.feature_file) if config.input_kind == "features" else None

    generator = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    metrics_path = out / "metrics.log"
    metrics_lines = ["epoch loss_nfc loss_nsc val_rval thres"]
    result = TrainResult(
        best_path=out / "checkpoint_best.pt",
        last_path=out / "checkpoint_last.pt",
        metrics_path=metrics_path,
    )

    train_cfg_dict = dataclasses.asdict(config)
    for epoch in range(config.epochs):
        model.train()
        nfc_sum = nsc_sum = 0.0
        nfc_n = nsc_n = 0
        for batch in iter_epoch_batches(train_utts, config.batch_size, config.seed, epoch):
            zs = _encode_batch(model, batch, features)
            zs = [z for z in zs if z.shape[0] >= 3]
            if not zs:
                continue
            total, nfc_val, nsc_val, n_nsc = combined_loss(model, zs, config, epoch, generator)
            if not math.isfinite(float(total.detach())):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            model.threshold.clamp_()
            nfc_sum += nfc_val
            nfc_n += 1
            if n_nsc:
                nsc_sum += nsc_val
                nsc_n += 1
        if nfc_n == 0:
            raise EmptyCorpus("no batch produced enough frames to train on")

        val_rval = _validation_r_value(model, val_utts, features)
        stats = EpochStats(
            epoch=epoch,
            loss_nfc=nfc_sum / nfc_n,
            loss_nsc=nsc_sum / nsc_n if nsc_n else 0.0,
            val_r_value=val_rval,
            threshold=model.threshold.item(),
        )
        result.history.append(stats)
        metrics_lines.append(
            f"{stats.epoch} {stats.loss_nfc:.6f} {stats.loss_nsc:.6f} "
            f"{stats.val_r_value:.6f} {stats.threshold:.6f}"
        )
        metrics_path.write_text("\n".join(metrics_lines) + "\n", encoding="utf-8")
        log(
            f"epoch {stats.epoch}: nfc {stats.loss_nfc:.4f} nsc {stats.loss_nsc:.4f} "
            f"val_rval {stats.val_r_value:.4f} thres {stats.threshold:.4f}"
        )

        save_checkpoint(
            model, result.last_path, epoch=epoch, best_val=result.best_val,
            train_config=train_cfg_dict,
        )
        if math.isnan(val_rval):
            # No scored validation set: the best checkpoint tracks the last.
            better = True
            candidate = -math.inf
        else:
            candidate = val_rval
            better = candidate > result.best_val or result.best_epoch < 0
        if better:
            result.best_val = candidate
            result.best_epoch = epoch
            save_checkpoint(
                model, result.best_path, epoch=epoch, best_val=candidate,
                train_config=train_cfg_dict,
            )
    if config.epochs == 0:
        save_checkpoint(model, result.last_path, epoch=-1, train_config=train_cfg_dict)
        save_checkpoint(model, result.best_path, epoch=-1, train_config=train_cfg_dict)
    return result
