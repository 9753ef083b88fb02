import math

import numpy as np
import pytest
import torch

from segcpc.corpus import LabeledInterval, default_fold_table
from segcpc.errors import (
    DegenerateUtterance,
    InconsistentLengths,
    MissingFile,
    TooShortUtterance,
    UnknownLabel,
)
from segcpc.model import ModelConfig, SegmentalCPC
from segcpc.varrate import (
    ContextualFramePredictor,
    FeatureReader,
    SegmentFeatures,
    UtteranceSegments,
    average_sampling_rate,
    expand_to_frames,
    extract_segment_features,
    frame_center_s,
    frame_labels,
    gaps_from_alignment,
    linear_probe,
    mfcc,
    multistep_nfc_loss,
    read_segment_features,
    write_feature_file,
    write_segment_features,
)

from conftest import make_utterance


def iv(triples):
    return [LabeledInterval(a, b, lab) for a, b, lab in triples]


class TestFeatureFile:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = {
            "a": rng.normal(size=(7, 5)).astype(np.float32),
            "b": rng.normal(size=(3, 5)).astype(np.float32),
        }
        path = tmp_path / "f.bin"
        write_feature_file(path, feats)
        reader = FeatureReader(path)
        assert reader.ids == ["a", "b"]
        assert "a" in reader and "c" not in reader
        np.testing.assert_array_equal(reader.read("a"), feats["a"])
        np.testing.assert_array_equal(reader.read("b"), feats["b"])

    def test_missing_pieces_raise(self, tmp_path):
        with pytest.raises(MissingFile):
            FeatureReader(tmp_path / "nope.bin")
        path = tmp_path / "f.bin"
        write_feature_file(path, {"a": np.zeros((2, 2), dtype=np.float32)})
        (path.with_suffix(".idx")).unlink()
        with pytest.raises(MissingFile):
            FeatureReader(path)

    def test_unknown_id_raises(self, tmp_path):
        path = tmp_path / "f.bin"
        write_feature_file(path, {"a": np.zeros((2, 2), dtype=np.float32)})
        with pytest.raises(MissingFile):
            FeatureReader(path).read("zz")


class TestSegmentContainer:
    def seg(self):
        rng = np.random.default_rng(1)
        return SegmentFeatures(
            utterances={
                "a": UtteranceSegments(
                    vectors=rng.normal(size=(3, 4)).astype(np.float32),
                    gap_indices=[4, 9],
                    num_frames=12,
                ),
                "b": UtteranceSegments(
                    vectors=rng.normal(size=(1, 4)).astype(np.float32),
                    gap_indices=[],
                    num_frames=5,
                ),
            }
        )

    def test_round_trip(self, tmp_path):
        seg = self.seg()
        path = tmp_path / "seg.bin"
        write_segment_features(path, seg)
        back = read_segment_features(path)
        assert set(back.utterances) == {"a", "b"}
        np.testing.assert_array_equal(back.utterances["a"].vectors, seg.utterances["a"].vectors)
        assert back.utterances["a"].gap_indices == [4, 9]
        assert back.utterances["b"].gap_indices == []
        assert back.utterances["b"].num_frames == 5

    def test_validation(self):
        with pytest.raises(InconsistentLengths):
            UtteranceSegments(np.zeros((2, 3), "f4"), gap_indices=[5], num_frames=4)
        with pytest.raises(InconsistentLengths):
            UtteranceSegments(np.zeros((3, 3), "f4"), gap_indices=[1], num_frames=6)

    def test_expand_repeats_per_segment(self):
        u = UtteranceSegments(
            np.array([[1.0, 1], [2, 2], [3, 3]], dtype=np.float32),
            gap_indices=[2, 3],
            num_frames=6,
        )
        full = expand_to_frames(u)
        assert full.shape == (6, 2)
        np.testing.assert_array_equal(full[:, 0], [1, 1, 2, 3, 3, 3])

    def test_average_rate(self):
        seg = self.seg()  # 4 segments over 17 frames = 0.17 s
        assert average_sampling_rate(seg) == pytest.approx(4 / 0.17)
        assert average_sampling_rate([2, 3], 2.0) == pytest.approx(2.5)


class TestFrameLabels:
    def test_frozen_center_convention(self):
        assert frame_center_s(0) == pytest.approx(0.0145)
        assert frame_center_s(10) == pytest.approx(0.1145)

    def test_dropped_and_uncovered_frames_are_none(self):
        table = default_fold_table()
        intervals = iv([(0.0, 0.1, "iy"), (0.1, 0.2, "q"), (0.3, 0.4, "s")])
        labels = frame_labels(intervals, 30, table)
        assert labels[0] == "iy"
        # centers inside the q interval are dropped by the 48-class fold
        t_q = 9  # center 0.1045 s
        assert 0.1 < frame_center_s(t_q) < 0.2
        assert labels[t_q] is None
        # centers in the 0.2..0.3 alignment hole are uncovered
        t_hole = 19  # center 0.2045 s
        assert 0.2 < frame_center_s(t_hole) < 0.3
        assert labels[t_hole] is None
        assert labels[29] == "s"  # center 0.3045 s

    def test_gaps_from_alignment_rounds_and_clamps(self):
        intervals = iv([(0.0, 0.012, "a"), (0.012, 0.154, "b"), (0.154, 0.2, "c")])
        assert gaps_from_alignment(intervals, num_frames=20) == [1, 15]
        # an edge very near the end clamps to the last legal gap
        intervals = iv([(0.0, 0.01, "a"), (0.01, 0.19, "b"), (0.19, 0.2, "c")])
        assert gaps_from_alignment(intervals, num_frames=10) == [1, 9]


class TestMultistep:
    def test_uniform_candidates_hit_log_k_plus_one(self):
        torch.manual_seed(0)
        pred = ContextualFramePredictor(frame_dim=6, context_dim=5, m_steps=3)
        z = torch.ones(10, 6)
        for k in (1, 4):
            loss = multistep_nfc_loss(z, pred, k=k, generator=torch.Generator().manual_seed(0))
            assert float(loss.detach()) == pytest.approx(math.log(k + 1), abs=1e-6)

    def test_short_utterance_raises(self):
        pred = ContextualFramePredictor(frame_dim=4, m_steps=3)
        with pytest.raises(DegenerateUtterance):
            multistep_nfc_loss(torch.randn(4, 4), pred, k=1)

    def test_heads_have_no_bias(self):
        pred = ContextualFramePredictor(frame_dim=4, m_steps=2)
        assert all(h.bias is None for h in pred.step_heads)
        assert len(pred.step_heads) == 2

    def test_step_count_validated(self):
        with pytest.raises(ValueError):
            ContextualFramePredictor(m_steps=0)
        with pytest.raises(ValueError):
            ContextualFramePredictor(m_steps=13)

    def test_gradients_flow(self):
        torch.manual_seed(0)
        pred = ContextualFramePredictor(frame_dim=6, m_steps=2)
        z = torch.randn(12, 6, requires_grad=True)
        loss = multistep_nfc_loss(z, pred, k=2, generator=torch.Generator().manual_seed(0))
        loss.backward()
        assert torch.isfinite(z.grad).all()
        assert all(torch.isfinite(h.weight.grad).all() for h in pred.step_heads)


class TestExtraction:
    def model(self):
        torch.manual_seed(0)
        return SegmentalCPC(ModelConfig(channels=8))

    def utts(self):
        return [
            make_utterance(
                "x",
                4800,
                phones=[(0.0, 0.1, "iy"), (0.1, 0.2, "s"), (0.2, 0.3, "aa")],
            ),
            make_utterance("y", 3200, phones=[(0.0, 0.1, "m"), (0.1, 0.2, "iy")]),
        ]

    def test_manual_source_follows_the_alignment(self):
        seg = extract_segment_features(self.model(), self.utts(), boundary_source="manual")
        # 3 phones -> 2 interior gaps -> 3 segments; 2 phones -> 2 segments
        assert seg.utterances["x"].num_segments == 3
        assert seg.utterances["y"].num_segments == 2
        assert seg.utterances["x"].vectors.shape[1] == 256

    def test_differentiable_and_peak_sources_run(self):
        for source in ("differentiable", "external_peaks"):
            seg = extract_segment_features(self.model(), self.utts(), boundary_source=source)
            assert set(seg.utterances) == {"x", "y"}
            for u in seg.utterances.values():
                assert np.isfinite(u.vectors).all()

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError):
            extract_segment_features(self.model(), self.utts(), boundary_source="oracle")


class TestProbe:
    def separable(self, n=120, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 4)).astype(np.float32)
        y = ["hot" if row[0] + row[1] > 0 else "cold" for row in x]
        x[:, 0] += np.where(np.array(y) == "hot", 3.0, -3.0)
        return x, y

    def test_learns_a_separable_problem(self):
        x, y = self.separable()
        vx, vy = self.separable(seed=1)
        result = linear_probe(x, y, vx, vy, seed=0)
        assert result.val_accuracy > 0.9
        assert result.test_accuracy == result.val_accuracy  # defaults to val
        assert result.classes == ["cold", "hot"]

    def test_explicit_test_split(self):
        x, y = self.separable()
        vx, vy = self.separable(seed=1)
        tx, ty = self.separable(seed=2)
        result = linear_probe(x, y, vx, vy, tx, ty, seed=0)
        assert result.test_accuracy > 0.9

    def test_unseen_label_rejected(self):
        x, y = self.separable(20)
        with pytest.raises(UnknownLabel):
            linear_probe(x, y, x, ["lukewarm"] * 20, seed=0)

    def test_seeded_runs_repeat(self):
        x, y = self.separable(60)
        vx, vy = self.separable(60, seed=1)
        a = linear_probe(x, y, vx, vy, seed=4)
        b = linear_probe(x, y, vx, vy, seed=4)
        assert a.val_accuracy == b.val_accuracy


class TestMfcc:
    def test_shape_and_finiteness(self):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-0.5, 0.5, 16000).astype(np.float32)
        feats = mfcc(samples)
        assert feats.shape == (1 + (16000 - 400) // 160, 39)
        assert feats.dtype == np.float32
        assert np.isfinite(feats).all()

    def test_too_short_raises(self):
        with pytest.raises(TooShortUtterance):
            mfcc(np.zeros(399, dtype=np.float32))

    def test_distinct_signals_get_distinct_cepstra(self):
        t = np.arange(8000) / 16000
        a = mfcc(np.sin(2 * np.pi * 300 * t).astype(np.float32))
        b = mfcc(np.sin(2 * np.pi * 2500 * t).astype(np.float32))
        assert np.abs(a.mean(axis=0) - b.mean(axis=0)).max() > 0.5
