import math

import numpy as np
import pytest
import torch

from segcpc.errors import DegenerateUtterance, EmptyPool, TooShortUtterance
from segcpc.frames import (
    ConvFrameEncoder,
    FeedForwardFrameEncoder,
    FrameEncoderConfig,
    NegativeSamplingPolicy,
    info_nce,
    nfc_batch_loss,
    nfc_loss,
    sample_distractor_indices,
    sample_negatives,
    uniform_candidate_loss,
)


class TestGeometry:
    def test_frozen_lengths(self):
        cfg = FrameEncoderConfig()
        assert cfg.output_length(16000) == 98
        assert cfg.output_length(465) == 1
        assert cfg.total_stride == 160
        assert cfg.receptive_field == 465

    def test_too_short_raises(self):
        with pytest.raises(TooShortUtterance):
            FrameEncoderConfig().output_length(464)

    def test_matches_per_layer_recurrence(self):
        cfg = FrameEncoderConfig()

        def by_layers(n):
            for k, s in zip(cfg.kernel_sizes, cfg.strides):
                if n < k:
                    return None
                n = (n - k) // s + 1
            return n

        for n in [465, 466, 624, 625, 1000, 16000, 31999]:
            assert cfg.output_length(n) == by_layers(n)

    def test_conv_output_shape_agrees(self):
        enc = ConvFrameEncoder(FrameEncoderConfig(channels=8))
        enc.eval()
        wav = torch.randn(1, 1000)
        z, lengths = enc(wav, torch.tensor([1000]))
        assert z.shape == (1, enc.cfg.output_length(1000), 8 and enc.cfg.projection_dim)
        assert lengths.tolist() == [enc.cfg.output_length(1000)]


class TestConvEncoder:
    def test_batch_padding_matches_single(self):
        torch.manual_seed(0)
        enc = ConvFrameEncoder(FrameEncoderConfig(channels=8))
        enc.eval()
        a = torch.randn(1000)
        b = torch.randn(1700)
        batch = torch.zeros(2, 1700)
        batch[0, :1000] = a
        batch[1] = b
        with torch.no_grad():
            z, lengths = enc(batch, torch.tensor([1000, 1700]))
            za, la = enc(a.unsqueeze(0), torch.tensor([1000]))
        assert lengths[0] == la[0]
        torch.testing.assert_close(z[0, : la[0]], za[0], atol=1e-5, rtol=1e-5)

    def test_encode_frames_is_deterministic_and_eval_mode(self):
        enc = ConvFrameEncoder(FrameEncoderConfig(channels=8))
        enc.train()
        wav = np.random.default_rng(0).normal(size=1200).astype(np.float32)
        fm1 = enc.encode_frames(wav, "u")
        fm2 = enc.encode_frames(wav, "u")
        assert enc.training  # mode restored
        assert fm1.utterance_id == "u"
        assert fm1.hop_s == pytest.approx(0.010)
        torch.testing.assert_close(fm1.z, fm2.z)

    def test_feedforward_encoder_shape(self):
        enc = FeedForwardFrameEncoder(input_dim=13)
        feats = np.zeros((5, 13), dtype=np.float32)
        fm = enc.encode_frames(feats, "u")
        assert fm.z.shape == (5, enc.frame_dim)


class TestNegativeSampling:
    def test_target_never_drawn(self):
        g = torch.Generator().manual_seed(0)
        targets = torch.arange(50) % 7
        draws = sample_distractor_indices(7, targets, k=4, generator=g)
        assert draws.shape == (50, 4)
        assert (draws >= 0).all() and (draws < 7).all()
        assert (draws != targets.unsqueeze(1)).all()

    def test_forced_choice_with_pool_of_two(self):
        targets = torch.zeros(10, dtype=torch.long)
        draws = sample_distractor_indices(2, targets, k=3)
        assert (draws == 1).all()

    def test_pool_of_one_raises(self):
        with pytest.raises(EmptyPool):
            sample_distractor_indices(1, torch.zeros(1, dtype=torch.long), k=1)

    def test_distribution_is_uniform_over_non_targets(self):
        g = torch.Generator().manual_seed(1)
        targets = torch.full((20000,), 2, dtype=torch.long)
        draws = sample_distractor_indices(5, targets, k=1, generator=g).flatten()
        counts = torch.bincount(draws, minlength=5).float()
        assert counts[2] == 0
        rel = counts[[0, 1, 3, 4]] / 20000
        assert (rel - 0.25).abs().max() < 0.02

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            NegativeSamplingPolicy(k=0)
        with pytest.raises(ValueError):
            NegativeSamplingPolicy(mode="global")


class TestLosses:
    def test_uniform_candidates_hit_log_k_plus_one(self):
        for k in (1, 5, 10):
            pos = torch.full((7,), 0.3)
            neg = torch.full((7, k), 0.3)
            loss = info_nce(pos, neg)
            assert float(loss) == pytest.approx(math.log(k + 1), abs=1e-6)
            assert uniform_candidate_loss(k) == pytest.approx(math.log(k + 1))

    def test_perfect_separation_drives_loss_down(self):
        pos = torch.full((7,), 30.0)
        neg = torch.full((7, 4), -30.0)
        assert float(info_nce(pos, neg)) < 1e-6

    def test_hand_computed_small_case(self):
        # Replay the distractor draw with an identically seeded generator,
        # then recompute the softmax loss from scratch on the cosine table.
        z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]])
        policy = NegativeSamplingPolicy(k=2)
        loss = nfc_loss(z, policy, generator=torch.Generator().manual_seed(0))
        idx = sample_distractor_indices(
            4, torch.arange(1, 4), k=2, generator=torch.Generator().manual_seed(0)
        )
        unit = z / z.norm(dim=1, keepdim=True)
        s = (unit @ unit.t()).tolist()
        expect = 0.0
        for t in range(3):
            pos = math.exp(s[t][t + 1])
            denom = pos + sum(math.exp(s[t][j]) for j in idx[t].tolist())
            expect -= math.log(pos / denom)
        assert float(loss) == pytest.approx(expect / 3, abs=1e-6)

    def test_short_utterance_raises(self):
        with pytest.raises(DegenerateUtterance):
            nfc_loss(torch.randn(2, 4), NegativeSamplingPolicy(k=1))

    def test_batch_same_utterance_is_mean_of_per_utterance(self):
        torch.manual_seed(0)
        zs = [torch.randn(6, 4), torch.randn(9, 4)]
        policy = NegativeSamplingPolicy(k=2)
        g1 = torch.Generator().manual_seed(5)
        batch = nfc_batch_loss(zs, policy, generator=g1)
        g2 = torch.Generator().manual_seed(5)
        singles = [nfc_loss(z, policy, generator=g2) for z in zs]
        assert float(batch) == pytest.approx(float(sum(singles) / 2), abs=1e-6)

    def test_mixed_mode_draws_from_other_utterances(self):
        # two utterances of constant but different vectors: with a same-
        # utterance pool every distractor equals the positive (loss ln 2);
        # mixing pools across utterances makes some distractors easy
        a = torch.ones(8, 4)
        b = -torch.ones(8, 4)
        g = torch.Generator().manual_seed(0)
        same = nfc_batch_loss([a, b], NegativeSamplingPolicy(k=1), generator=g)
        assert float(same) == pytest.approx(math.log(2), abs=1e-5)
        g = torch.Generator().manual_seed(0)
        mixed = nfc_batch_loss(
            [a, b], NegativeSamplingPolicy(k=1, mode="mixed_utterance"), generator=g
        )
        assert float(mixed) < float(same)

    def test_gradient_flows_to_inputs(self):
        z = torch.randn(10, 4, requires_grad=True)
        loss = nfc_loss(z, NegativeSamplingPolicy(k=2), generator=torch.Generator().manual_seed(0))
        loss.backward()
        assert z.grad is not None and torch.isfinite(z.grad).all()
        assert z.grad.abs().sum() > 0
