import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddmkit.alphabet import SIL, UNK_CHAR, Alphabet
from ddmkit.asr_features import (PosteriorFileError, PosteriorMatrix, bigram_feature_names,
                                 bigram_frequencies, char_durations, decode_transcript,
                                 greedy_align, normalize_transcript, read_posterior_file,
                                 write_posterior_file)

A = Alphabet()


def _matrix_from_symbols(symbols, stride=0.02):
    rows = np.zeros((len(symbols), len(A)))
    for i, s in enumerate(symbols):
        rows[i, A.index[s]] = 5.0
    return PosteriorMatrix(values=rows, frame_stride_s=stride)


class TestAlphabet:
    def test_default_has_31_symbols(self):
        assert len(A) == 31

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Alphabet(("A", "A", SIL))

    def test_sil_required(self):
        with pytest.raises(ValueError, match="sil"):
            Alphabet(("A", "B"))

    def test_display_names(self):
        assert A.display_name(A.index[" "]) == "space"
        assert A.display_name(A.index["'"]) == "apostrophe"
        assert A.display_name(A.index["."]) == "period"
        assert A.display_name(A.index["Q"]) == "Q"


class TestNormalize:
    def test_uppercase_and_collapse(self):
        assert normalize_transcript("don't  stop", A) == "DON'T STOP"

    def test_empty(self):
        assert normalize_transcript("", A) == ""

    def test_out_of_alphabet_to_unk(self):
        assert normalize_transcript("naïve", A) == "NA" + UNK_CHAR + "VE"

    def test_tabs_and_newlines_collapse(self):
        assert normalize_transcript("a\t b\n\nc", A) == "A B C"

    @given(st.text(max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, text):
        once = normalize_transcript(text, A)
        assert normalize_transcript(once, A) == once


class TestBigrams:
    def test_hand_count(self):
        v = bigram_frequencies("AB A", A)
        n = len(A)
        expect = np.zeros(n * n)
        expect[A.index["A"] * n + A.index["B"]] = 1
        expect[A.index["B"] * n + A.index[" "]] = 1
        expect[A.index[" "] * n + A.index["A"]] = 1
        assert np.array_equal(v, expect)

    def test_repeated_symbol(self):
        v = bigram_frequencies("AAA", A)
        assert v[A.index["A"] * len(A) + A.index["A"]] == 2
        assert v.sum() == 2

    def test_empty_is_zero_vector(self):
        v = bigram_frequencies("", A)
        assert v.shape == (961,)
        assert not v.any()

    def test_normalized_variant(self):
        v = bigram_frequencies("AAA", A, normalize=True)
        assert v.sum() == pytest.approx(1.0)

    def test_names_align(self):
        names = bigram_feature_names(A)
        assert len(names) == 961
        assert names[A.index["N"] * 31 + A.index[" "]] == "N_space"

    @given(st.text(alphabet="ABC' .", max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_count_sum_invariant(self, text):
        text = normalize_transcript(text, A)
        v = bigram_frequencies(text, A)
        assert v.sum() == max(len(text) - 1, 0)


class TestGreedyAlign:
    def test_run_length_encoding(self):
        m = _matrix_from_symbols([SIL, "A", "A", SIL, "B"])
        assert greedy_align(m, A) == [(SIL, 1), ("A", 2), (SIL, 1), ("B", 1)]

    def test_all_sil(self):
        m = _matrix_from_symbols([SIL] * 7)
        assert greedy_align(m, A) == [(SIL, 7)]

    def test_tie_goes_to_lower_index(self):
        row = np.zeros((1, len(A)))
        row[0, A.index["A"]] = 5.0
        row[0, A.index["B"]] = 5.0
        assert greedy_align(PosteriorMatrix(row), A) == [("A", 1)]

    def test_empty_matrix(self):
        assert greedy_align(PosteriorMatrix(np.zeros((0, 31))), A) == []

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError, match="columns"):
            greedy_align(PosteriorMatrix(np.zeros((3, 30))), A)

    def test_runs_cover_frames_and_never_repeat(self, rng):
        for _ in range(50):
            m = PosteriorMatrix(rng.normal(size=(int(rng.integers(1, 60)), len(A))))
            runs = greedy_align(m, A)
            assert sum(c for _, c in runs) == m.values.shape[0]
            assert all(a != b for (a, _), (b, _) in zip(runs, runs[1:]))

    def test_argmax_invariant_to_per_frame_offsets(self, rng):
        values = rng.normal(size=(40, len(A)))
        shifted = values + rng.normal(size=(40, 1))  # constant per frame
        assert greedy_align(PosteriorMatrix(values), A) == \
            greedy_align(PosteriorMatrix(shifted), A)


class TestDurations:
    def test_mean_run_length(self):
        m = _matrix_from_symbols(["A", "A", "B", "A", "A", "A", "A"], stride=0.02)
        d = char_durations(m, A)
        assert d[A.index["A"]] == pytest.approx(0.06)  # runs of 2 and 4 -> mean 3
        assert d[A.index["B"]] == pytest.approx(0.02)

    def test_absent_symbol_is_zero(self):
        m = _matrix_from_symbols(["A"])
        assert char_durations(m, A)[A.index["B"]] == 0.0

    def test_sil_only(self):
        m = _matrix_from_symbols([SIL] * 5)
        d = char_durations(m, A)
        assert d[A.index[SIL]] == pytest.approx(0.10)
        assert np.count_nonzero(d) == 1

    def test_duration_scale_with_stride(self):
        m = _matrix_from_symbols(["A", "A"], stride=0.05)
        assert char_durations(m, A)[A.index["A"]] == pytest.approx(0.10)


class TestDecode:
    def test_decode_drops_sil_and_joins(self):
        m = _matrix_from_symbols([SIL, "H", "I", SIL, " ", "A", SIL])
        assert decode_transcript(m, A) == "HI A"

    def test_decode_repeated_chars_via_sil(self):
        m = _matrix_from_symbols(["L", "L", SIL, "L"])
        assert decode_transcript(m, A) == "LL"


class TestPosteriorIO:
    def test_binary_roundtrip(self, tmp_path, rng):
        m = PosteriorMatrix(rng.normal(size=(17, 31)), frame_stride_s=0.025)
        path = tmp_path / "m.post"
        write_posterior_file(str(path), m)
        back = read_posterior_file(str(path))
        assert back.frame_stride_s == pytest.approx(0.025)
        assert np.allclose(back.values, m.values, atol=1e-6)  # float32 storage

    def test_csv_fallback(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1.0,2.0\n3.0,4.0\n")
        m = read_posterior_file(str(path))
        assert m.values.shape == (2, 2)
        assert m.frame_stride_s == pytest.approx(0.02)

    def test_csv_ragged_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1.0,2.0\n3.0\n")
        with pytest.raises(PosteriorFileError, match="ragged"):
            read_posterior_file(str(path))

    def test_truncated_binary_rejected(self, tmp_path, rng):
        m = PosteriorMatrix(rng.normal(size=(9, 31)))
        path = tmp_path / "m.post"
        write_posterior_file(str(path), m)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(PosteriorFileError, match="expected"):
            read_posterior_file(str(path))
