import math

import numpy as np
import pytest
import torch

from segcpc.errors import DataError
from segcpc.model import load_checkpoint, save_checkpoint
from segcpc.training import (
    TrainConfig,
    apply_overrides,
    build_model,
    combined_loss,
    load_config,
    parse_config_text,
    train,
    write_config,
)

from conftest import make_utterance


class TestConfig:
    def test_defaults_match_the_training_recipe(self):
        c = TrainConfig()
        assert c.batch_size == 8
        assert c.lr == pytest.approx(1e-4)
        assert c.epochs == 100
        assert c.nsc_start_epoch == 2
        assert c.threshold_init == pytest.approx(0.05)
        assert c.negative_k == 1

    def test_parse_both_separators_and_comments(self):
        c = parse_config_text("epochs = 3\nbatch_size 4  # small\n# noise\n\nlr=0.01\n")
        assert (c.epochs, c.batch_size, c.lr) == (3, 4, 0.01)

    def test_parse_bools(self):
        c = parse_config_text("threshold_learnable = true\nuse_p2 = 0\n")
        assert c.threshold_learnable is True
        assert c.use_p2 is False

    def test_unknown_key_rejected(self):
        with pytest.raises(DataError):
            parse_config_text("optimizer = sgd\n")

    def test_overrides_and_round_trip(self, tmp_path):
        c = apply_overrides(TrainConfig(), {"epochs": "7", "rep_mode": "max"})
        assert c.epochs == 7 and c.rep_mode == "max"
        f = tmp_path / "c.cfg"
        write_config(c, f)
        back = load_config(f)
        assert back == c

    def test_bad_value_rejected(self):
        with pytest.raises(DataError):
            apply_overrides(TrainConfig(), {"epochs": "many"})


class TestBuildModel:
    def test_seed_determines_weights(self):
        c = TrainConfig(channels=8, seed=5)
        a, b = build_model(c), build_model(c)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            torch.testing.assert_close(va, vb, atol=0, rtol=0)

    def test_different_seeds_differ(self):
        a = build_model(TrainConfig(channels=8, seed=0))
        b = build_model(TrainConfig(channels=8, seed=1))
        diffs = [
            (va - vb).abs().sum()
            for va, vb in zip(a.state_dict().values(), b.state_dict().values())
            if va.dtype.is_floating_point
        ]
        assert sum(diffs) > 0


class TestCombinedLoss:
    def zs(self, n=3, L=24, dim=64):
        torch.manual_seed(0)
        return [torch.randn(L, dim) for _ in range(n)]

    def test_segment_loss_waits_for_its_start_epoch(self):
        config = TrainConfig(channels=8, nsc_start_epoch=2)
        model = build_model(config)
        g = torch.Generator().manual_seed(0)
        total0, nfc0, nsc0, n0 = combined_loss(model, self.zs(), config, epoch=0, generator=g)
        assert nsc0 == 0.0 and n0 == 0
        assert float(total0) == pytest.approx(nfc0)
        g = torch.Generator().manual_seed(0)
        total2, nfc2, nsc2, n2 = combined_loss(model, self.zs(), config, epoch=2, generator=g)
        assert n2 > 0 and nsc2 > 0.0
        assert float(total2.detach()) == pytest.approx(nfc2 + nsc2, rel=1e-5)

    def test_gradient_reaches_every_parameter_group(self):
        config = TrainConfig(channels=8, nsc_start_epoch=0, threshold_learnable=True)
        model = build_model(config)
        wavs = torch.randn(2, 4800)
        z, lengths = model.frame_encoder(wavs, torch.tensor([4800, 4800]))
        zs = [z[i, : lengths[i]] for i in range(2)]
        total, _, _, _ = combined_loss(
            model, zs, config, epoch=0, generator=torch.Generator().manual_seed(0)
        )
        total.backward()
        got = {
            name: any(
                p.grad is not None and p.grad.abs().sum() > 0 for p in group.values()
            )
            for name, group in (
                (n, dict(m.named_parameters())) for n, m in model.parameter_groups().items()
            )
            if group
        }
        assert got["frame_encoder"] and got["segment_encoder"] and got["segment_context"]


def synthetic_utterances(n=4, seed=0):
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n):
        # three constant-level bands make two easy boundaries
        levels = rng.uniform(0.2, 0.9, 3) * rng.choice([-1, 1], 3)
        spans = rng.integers(8, 14, 3) * 160
        samples = np.concatenate([np.full(s, lv) for s, lv in zip(spans, levels)])
        samples += rng.normal(0, 0.003, len(samples))
        phones = []
        t = 0.0
        for s, lab in zip(spans, ["iy", "s", "aa"]):
            phones.append((t, t + s / 16000, lab))
            t += s / 16000
        utts.append(
            make_utterance(f"synt{i}", len(samples), phones=phones)
        )
        utts[-1].samples = samples.astype(np.float32)
    return utts


class TestTrainLoop:
    def test_short_run_leaves_the_documented_artifacts(self, tmp_path):
        config = TrainConfig(epochs=2, channels=8, nsc_start_epoch=1, seed=0)
        utts = synthetic_utterances()
        result = train(config, utts, utts[:2], tmp_path, log=lambda _: None)
        assert result.best_path.is_file() and result.last_path.is_file()
        lines = result.metrics_path.read_text().splitlines()
        assert lines[0] == "epoch loss_nfc loss_nsc val_rval thres"
        assert len(lines) == 3
        first = lines[1].split()
        assert first[0] == "0"
        assert all(math.isfinite(float(x)) for x in first[1:])
        # the nsc column is zero before its start epoch, nonzero after
        assert float(lines[1].split()[2]) == 0.0
        assert float(lines[2].split()[2]) > 0.0
        assert len(result.history) == 2

    def test_reruns_are_bit_identical(self, tmp_path):
        config = TrainConfig(epochs=2, channels=8, seed=1)
        utts = synthetic_utterances()
        train(config, utts, utts[:2], tmp_path / "a", log=lambda _: None)
        train(config, utts, utts[:2], tmp_path / "b", log=lambda _: None)
        a = (tmp_path / "a" / "metrics.log").read_bytes()
        b = (tmp_path / "b" / "metrics.log").read_bytes()
        assert a == b

    def test_checkpoint_round_trip_preserves_the_forward_pass(self, tmp_path):
        config = TrainConfig(epochs=1, channels=8, seed=2)
        utts = synthetic_utterances()
        result = train(config, utts, utts[:2], tmp_path, log=lambda _: None)
        model, payload = load_checkpoint(result.last_path)
        assert payload["epoch"] == 0
        fresh = build_model(config)
        wav = utts[0].samples
        torch.testing.assert_close(
            model.encode_utterance(wav, "x").z,
            load_checkpoint(result.last_path)[0].encode_utterance(wav, "x").z,
            atol=0,
            rtol=0,
        )
        # and the loaded model differs from an untrained one
        diff = (model.encode_utterance(wav, "x").z - fresh.encode_utterance(wav, "x").z).abs().sum()
        assert float(diff) > 0

    def test_zero_epochs_still_saves_checkpoints(self, tmp_path):
        config = TrainConfig(epochs=0, channels=8)
        result = train(config, synthetic_utterances(2), None, tmp_path, log=lambda _: None)
        assert result.best_path.is_file() and result.last_path.is_file()
        assert result.best_epoch == -1

    def test_feature_input_training(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = {}
        utts = synthetic_utterances(3)
        config = TrainConfig(
            epochs=1,
            input_kind="features",
            feature_dim=13,
            nsc_start_epoch=0,
            seed=0,
        )
        from segcpc.varrate import write_feature_file

        for u in utts:
            L = len(u.samples) // 160
            feats[u.id] = rng.normal(size=(L, 13)).astype(np.float32)
        path = tmp_path / "frontend.bin"
        write_feature_file(path, feats)
        config.feature_file = str(path)
        result = train(config, utts, utts[:1], tmp_path / "run", log=lambda _: None)
        assert result.last_path.is_file()
        model, _ = load_checkpoint(result.last_path)
        fm = model.encode_utterance(feats[utts[0].id], utts[0].id)
        assert fm.z.shape == (feats[utts[0].id].shape[0], 64)
