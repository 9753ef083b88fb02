import numpy as np
import pytest

from segcpc.errors import EmptyValidation, MissingFile
from segcpc.inference import (
    DEFAULT_GRID,
    boundaries_from_trace,
    phone_trace,
    pick_peaks,
    read_boundary_file,
    tune_from_traces,
    tune_prominence,
    word_boundaries_from_trace,
    write_boundary_file,
)

from conftest import make_utterance


def scalar_pick_peaks(trace, prominence):
    """Reference: strict local maxima (plateau midpoints) filtered by
    topographic prominence, the lowest-base definition."""
    n = len(trace)
    peaks = []
    i = 1
    while i < n - 1:
        if trace[i - 1] < trace[i]:
            # scan a possible plateau
            j = i
            while j < n - 1 and trace[j + 1] == trace[i]:
                j += 1
            if j < n - 1 and trace[j + 1] < trace[i]:
                peaks.append((i + j) // 2)
            i = j + 1
        else:
            i += 1
    kept = []
    for p in peaks:
        left_min = trace[p]
        for i in range(p - 1, -1, -1):
            if trace[i] > trace[p]:
                break
            left_min = min(left_min, trace[i])
        right_min = trace[p]
        for i in range(p + 1, n):
            if trace[i] > trace[p]:
                break
            right_min = min(right_min, trace[i])
        if trace[p] - max(left_min, right_min) >= prominence:
            kept.append(p)
    return kept


class TestPeakPicking:
    def test_edges_are_never_peaks(self):
        assert pick_peaks(np.array([1.0, 0.0, 0.0, 0.0, 1.0]), 0.0).tolist() == []

    def test_short_traces_yield_nothing(self):
        assert pick_peaks(np.array([1.0]), 0.0).tolist() == []
        assert pick_peaks(np.array([0.0, 1.0]), 0.0).tolist() == []
        assert pick_peaks(np.array([]), 0.0).tolist() == []

    def test_prominence_filters_smaller_bumps(self):
        trace = np.array([0.0, 0.3, 0.1, 0.9, 0.0])
        assert pick_peaks(trace, 0.0).tolist() == [1, 3]
        assert pick_peaks(trace, 0.25).tolist() == [3]
        assert pick_peaks(trace, 0.95).tolist() == []

    def test_matches_scalar_reference_on_random_traces(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(3, 40))
            # quantized values produce plateaus and exact ties
            trace = rng.integers(0, 6, n).astype(float) / 5.0
            prom = float(rng.choice([0.0, 0.2, 0.4, 0.6]))
            got = pick_peaks(trace, prom).tolist()
            assert got == scalar_pick_peaks(list(trace), prom)


class TestTraceToBoundaries:
    def test_index_to_time_mapping(self):
        trace = np.zeros(30)
        trace[12] = 1.0
        assert boundaries_from_trace(trace, 0.5) == [0.13]

    def test_word_transitions_map_through_gap_indices(self):
        scores = np.array([0.1, 0.9, 0.1])
        gaps = [7, 15, 21]
        assert word_boundaries_from_trace(scores, gaps, 0.5) == [0.15]

    def test_single_strong_transition_survives_padding(self):
        scores = np.array([0.9, 0.1])
        assert word_boundaries_from_trace(scores, [5, 11], 0.5) == [0.05]

    def test_constant_word_trace_is_silent(self):
        scores = np.array([0.4, 0.4, 0.4])
        assert word_boundaries_from_trace(scores, [3, 6, 9], 0.0) == []

    def test_empty_trace(self):
        assert word_boundaries_from_trace(np.array([]), [], 0.0) == []


class TestTuning:
    def test_grid_has_51_points(self):
        assert len(DEFAULT_GRID) == 51
        assert DEFAULT_GRID[0] == 0.0
        assert DEFAULT_GRID[-1] == pytest.approx(0.5)
        steps = np.diff(DEFAULT_GRID)
        np.testing.assert_allclose(steps, 0.01, atol=1e-9)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_picks_the_r_maximizing_prominence(self):
        # one clean peak at 0.20 s plus a weak spurious bump: small
        # prominences hallucinate a second boundary, large ones miss both
        trace = np.zeros(40)
        trace[19] = 0.6
        trace[30] = 0.25
        refs = [[0.20]]
        prom, rval, r_values = tune_from_traces(
            [(trace, None)], refs, grid=(0.0, 0.3, 0.9)
        )
        assert prom == 0.3
        assert rval == pytest.approx(1.0)
        assert len(r_values) == 3
        assert r_values[1] == max(r_values)
        assert r_values[2] == -np.inf  # nothing detected scores as worthless

    def test_ties_resolve_to_the_larger_prominence(self):
        trace = np.zeros(40)
        trace[19] = 1.0
        prom, rval, r_values = tune_from_traces(
            [(trace, None)], [[0.20]], grid=(0.1, 0.2, 0.3)
        )
        assert rval == pytest.approx(1.0)
        assert r_values[0] == r_values[2]
        assert prom == 0.3

    def test_model_level_tuning_needs_alignments(self, small_model):
        utt = make_utterance(n_samples=4800)  # no alignments
        from segcpc.errors import MissingAlignment

        with pytest.raises(MissingAlignment):
            tune_prominence(small_model, [utt], task="phone")

    def test_empty_validation_rejected(self, small_model):
        with pytest.raises(EmptyValidation):
            tune_prominence(small_model, [], task="phone")


class TestBoundaryFiles:
    def test_round_trip(self, tmp_path):
        data = {"a": [0.13, 0.5], "b": [], "c": [1.0]}
        f = tmp_path / "bounds.txt"
        write_boundary_file(f, data)
        assert read_boundary_file(f) == {"a": [0.13, 0.5], "b": [], "c": [1.0]}
        lines = f.read_text().splitlines()
        assert lines[0] == "a 0.130 0.500"
        assert lines[1] == "b"

    def test_missing_file(self):
        with pytest.raises(MissingFile):
            read_boundary_file("/nope/bounds.txt")


class TestModelInference:
    def test_phone_trace_shape(self, small_model):
        utt = make_utterance(n_samples=4800)
        trace = phone_trace(small_model, utt)
        # 4800 samples -> 28 frames -> 27 gaps
        assert trace.shape == (27,)
        assert np.isfinite(trace).all()
        assert trace.min() >= 0.0 and trace.max() <= 1.0
