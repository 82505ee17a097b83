import math

import numpy as np
import pytest

from advmi import textmetrics as tm

A, B, C, D, E = 0, 1, 2, 3, 4
EMB2 = np.array([[1.0, 0.0], [0.0, 1.0]])


class TestDist:
    def test_hand_fixture(self):
        assert tm.dist_n([["a", "b"], ["a", "c"]], 1) == 0.75

    def test_identical_single_tokens(self):
        assert tm.dist_n([["x"]] * 8, 1) == 1 / 8

    def test_all_distinct(self):
        assert tm.dist_n([["a", "b"], ["c", "d"]], 1) == 1.0

    def test_bigrams(self):
        assert tm.dist_n([["a", "b", "a", "b"]], 2) == 2 / 3

    def test_no_ngrams(self):
        with pytest.raises(ValueError):
            tm.dist_n([["a"], ["b"]], 2)

    def test_permutation_and_duplication(self):
        corpus = [["a", "b", "c"], ["a", "a"], ["d"]]
        d1 = tm.dist_n(corpus, 1)
        assert tm.dist_n(corpus[::-1], 1) == d1
        assert tm.dist_n(corpus + corpus, 1) == pytest.approx(d1 / 2)


class TestEnt4:
    def test_single_repeated(self):
        assert tm.ent_4([["a", "b", "c", "d"]] * 3) == 0.0

    def test_uniform_k(self):
        corpus = [[k, k + 1, k + 2, k + 3] for k in range(0, 50, 10)]
        assert tm.ent_4(corpus) == pytest.approx(math.log(5), abs=1e-12)

    def test_frequencies_2_1_1(self):
        corpus = [["a", "b", "c", "d"], ["a", "b", "c", "d"], ["e", "f", "g", "h"],
                  ["i", "j", "k", "l"]]
        assert tm.ent_4(corpus) == pytest.approx(1.0397, abs=1e-4)

    def test_bounded_by_log_types(self):
        rng = np.random.default_rng(0)
        corpus = [list(rng.integers(0, 3, size=7)) for _ in range(10)]
        types = {g for s in corpus for g in tm.ngrams(s, 4)}
        assert tm.ent_4(corpus) <= math.log(len(types)) + 1e-12

    def test_no_fourgrams(self):
        with pytest.raises(ValueError):
            tm.ent_4([["a", "b", "c"]])


class TestRelevance:
    def test_hand_fixture(self):
        avg, greedy, ext = tm.embedding_relevance([A], [A, B], EMB2)
        assert avg == pytest.approx(0.7071, abs=1e-4)
        assert greedy == pytest.approx(0.75, abs=1e-4)
        assert ext == pytest.approx(0.7071, abs=1e-4)

    def test_identical(self):
        emb = np.random.default_rng(1).normal(size=(6, 4))
        assert tm.embedding_relevance([1, 2, 3], [1, 2, 3], emb) == pytest.approx((1, 1, 1))

    def test_orthogonal_single_tokens(self):
        assert tm.embedding_relevance([A], [B], EMB2) == pytest.approx((0, 0, 0))

    def test_zero_vector_gives_zero(self):
        emb = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert tm.embedding_relevance([0], [1], emb) == (0.0, 0.0, 0.0)

    def test_extrema_tie_goes_positive(self):
        emb = np.array([[1.0, 2.0], [-1.0, 0.0]])
        # dimension 0 ties at +1/-1 and the positive value wins
        np.testing.assert_array_equal(tm._extrema(emb), [1.0, 2.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tm.embedding_relevance([], [A], EMB2)


class TestBleu:
    def test_identical(self):
        corpus = [[1, 2, 3, 4, 5], [6, 7]]
        assert tm.bleu(corpus, corpus) == 1.0

    def test_no_overlap(self):
        assert tm.bleu([[1, 2, 3]], [[4, 5, 6]]) == 0.0

    def test_hand_fixture(self):
        # precisions 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1); equal lengths so no penalty
        expected = (0.75 * 0.75 * (2 / 3) * 0.5) ** 0.25
        got = tm.bleu([["a", "b", "c", "d"]], [["a", "b", "c", "e"]])
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.65804, abs=1e-4)

    def test_brevity_penalty(self):
        got = tm.bleu([[A, B]], [[A, B, C, D]])
        p = 1.0 * ((1 + 1) / (1 + 1)) * (1 / 1) * (1 / 1)
        assert got == pytest.approx(math.exp(1 - 4 / 2) * p ** 0.25, abs=1e-12)

    def test_renaming_invariance(self):
        hyp, ref = [[1, 2, 3, 1]], [[1, 2, 4, 1]]
        rename = {1: 9, 2: 8, 3: 7, 4: 6}
        assert tm.bleu(hyp, ref) == tm.bleu([[rename[t] for t in hyp[0]]], [[rename[t] for t in ref[0]]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tm.bleu([], [])


class TestReport:
    def test_ranges(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(10, 3))
        hyp = [list(rng.integers(0, 10, size=5)) for _ in range(6)]
        ref = [list(rng.integers(0, 10, size=5)) for _ in range(6)]
        rep = tm.metrics_report(hyp, ref, emb).as_dict()
        assert 0 <= rep["dist1"] <= 1 and 0 <= rep["dist2"] <= 1 and 0 <= rep["bleu"] <= 1
        assert all(-1 <= rep[k] <= 1 for k in ("avg_rel", "greedy_rel", "extrema_rel"))
        assert all(math.isfinite(v) for v in rep.values())

    def test_short_outputs_report_zero_ent4(self):
        rep = tm.metrics_report([[1, 2]], [[1, 2]], np.eye(3))
        assert rep.ent4 == 0.0 and rep.bleu == 1.0
