import itertools
import math

import numpy as np
import pytest

from advmi import autodiff as ad
from advmi import seqmodel as sm
from advmi.seqmodel import (BOS, EOS, PAD, UNK, DecodeConfig, ModelConfig, SeqModelParams, Vocab,
                            beam_decode, encode, greedy_decode, greedy_decode_with_score, log_prob,
                            sample)


def _all_sequences(content, max_len):
    return [list(s) for L in range(1, max_len + 1) for s in itertools.product(content, repeat=L)]


def _model(n_content=4, max_len=3, seed=0, scale=1.0, hidden=4, embed=3):
    cfg = ModelConfig(vocab_size=4 + n_content, embed=embed, hidden=hidden, max_len=max_len)
    return SeqModelParams.init(cfg, np.random.default_rng(seed), scale)


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab(["a", "b"])
        assert (v.index["<pad>"], v.index["<bos>"], v.index["<eos>"], v.index["<unk>"]) == (
            PAD, BOS, EOS, UNK)
        assert v.encode(["a", "b", "zzz"]) == [4, 5, UNK]
        assert v.decode([4, 5]) == ["a", "b"]

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            Vocab(["a", "a"])

    def test_needs_content(self):
        with pytest.raises(ValueError):
            Vocab([])

    def test_strict_encode(self):
        with pytest.raises(KeyError):
            Vocab(["a"]).encode(["b"], strict=True)


class TestConfigs:
    def test_decode_config_bounds(self):
        with pytest.raises(ValueError):
            DecodeConfig(max_len=1)
        with pytest.raises(ValueError):
            DecodeConfig(beam_width=0)
        with pytest.raises(ValueError):
            DecodeConfig(temperature=0.0)

    def test_params_shape_checked(self):
        p = _model()
        bad = dict(p.weights)
        bad["emb"] = np.zeros((2, 2))
        with pytest.raises(ValueError):
            SeqModelParams(p.config, bad)


class TestEncode:
    def test_deterministic(self):
        p = _model()
        a = encode(p, [[4, 5, 6]])
        b = encode(p, [[4, 5, 6]])
        np.testing.assert_array_equal(a.z.value, b.z.value)
        np.testing.assert_array_equal(a.memory.value, b.memory.value)

    def test_length_one(self):
        lat = encode(_model(), [[5]])
        assert lat.z.shape == (1, 8)
        assert np.all(np.isfinite(lat.z.value))

    def test_z_is_two_hidden(self):
        p = _model(hidden=5)
        assert encode(p, [[4], [5, 6]]).z.shape == (2, 10)

    def test_zero_params_fixed_response(self):
        # GRU with zero weights: r = u = 1/2, n = 0, h' = h/2, so from h0 = 0 the state stays 0
        p = SeqModelParams.zeros(ModelConfig(8, 3, 4, 3))
        lat = encode(p, [[4], [5, 6, 7], [7, 7]])
        np.testing.assert_array_equal(lat.z.value, np.zeros((3, 8)))

    def test_batch_matches_single(self):
        p = _model()
        srcs = [[4, 5, 6], [7], [5, 4]]
        batch = encode(p, srcs).z.value
        for i, s in enumerate(srcs):
            np.testing.assert_allclose(encode(p, [s]).z.value[0], batch[i], atol=1e-14)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode(_model(), [[99]])

    def test_empty_source(self):
        with pytest.raises(ValueError):
            encode(_model(), [[]])


class TestLogProb:
    def test_nonpositive(self):
        p = _model(seed=3)
        lat = encode(p, [[4, 5]] * 3)
        assert np.all(log_prob(p, lat, [[4], [5, 6], [7, 7, 7]]).value <= 0)

    @pytest.mark.parametrize("n_content,max_len", [(2, 2), (4, 3), (3, 3)])
    def test_normalization(self, n_content, max_len):
        p = _model(n_content, max_len, seed=n_content)
        seqs = _all_sequences(range(4, 4 + n_content), max_len)
        lat = encode(p, [[4, 5]] * len(seqs))
        total = math.fsum(np.exp(log_prob(p, lat, seqs).value))
        assert abs(total - 1.0) < 1e-9

    def test_uniform_logits(self):
        p = SeqModelParams.zeros(ModelConfig(8, 3, 4, 3))
        lat = encode(p, [[4]])
        # step 0 has 4 legal tokens, later steps 4 content + EOS
        lp = float(log_prob(p, lat, [[5, 6]]).value[0])
        assert lp == pytest.approx(-math.log(4) - 2 * math.log(5), abs=1e-12)

    def test_overlong_rejected(self):
        p = _model(max_len=2)
        with pytest.raises(ValueError):
            log_prob(p, encode(p, [[4]]), [[4, 5, 6]])

    def test_batch_size_mismatch(self):
        p = _model()
        with pytest.raises(ValueError):
            log_prob(p, encode(p, [[4]]), [[4], [5]])

    def test_gradient_matches_finite_differences(self):
        p = _model(seed=11, hidden=3, embed=2)

        def fn(tape, w):
            m = sm.BoundModel(p.config, w, tape)
            return log_prob(m, encode(m, [[4, 5], [6]]), [[7, 4], [5]]).sum()

        assert ad.finite_diff_check(fn, p.weights) < 1e-4


class TestSample:
    def test_log_prob_matches_teacher_forcing(self):
        p = _model(seed=5)
        lat = encode(p, [[4, 6]] * 50)
        seqs, lps = sample(p, lat, np.random.default_rng(0), DecodeConfig(max_len=3))
        np.testing.assert_allclose(lps, log_prob(p, lat, seqs).value, atol=1e-12)

    def test_seeded(self):
        p = _model(seed=5)
        lat = encode(p, [[4, 6]] * 20)
        a, _ = sample(p, lat, np.random.default_rng(9))
        b, _ = sample(p, lat, np.random.default_rng(9))
        assert a == b

    def test_cold_temperature_is_greedy(self):
        p = _model(seed=6)
        lat = encode(p, [[4, 5], [6], [7, 7, 4]])
        cold, _ = sample(p, lat, np.random.default_rng(1), DecodeConfig(temperature=1e-6))
        assert cold == greedy_decode(p, lat)

    def test_terminates_within_cap(self):
        p = _model(seed=2)
        seqs, _ = sample(p, encode(p, [[4]] * 200), np.random.default_rng(3), DecodeConfig(max_len=2))
        assert all(1 <= len(s) <= 2 for s in seqs)
        assert all(t >= 4 for s in seqs for t in s)

    def test_empirical_frequencies(self):
        # 2 content tokens, max_len 2: six sequences, each within 3 sigma of its probability
        p = _model(n_content=2, max_len=2, seed=8)
        n = 100_000
        lat = encode(p, [[4, 5]] * n)
        seqs, _ = sample(p, lat, np.random.default_rng(12), DecodeConfig(max_len=2))
        support = _all_sequences([4, 5], 2)
        probs = np.exp(log_prob(p, encode(p, [[4, 5]] * len(support)), support).value)
        counts = {tuple(s): 0 for s in support}
        for s in seqs:
            counts[tuple(s)] += 1
        for s, q in zip(support, probs):
            sigma = math.sqrt(n * q * (1 - q))
            assert abs(counts[tuple(s)] - n * q) <= 3 * sigma

    def test_chi_square(self):
        stats = pytest.importorskip("scipy.stats")
        p = _model(n_content=3, max_len=2, seed=4)
        n = 100_000
        seqs, _ = sample(p, encode(p, [[4]] * n), np.random.default_rng(21), DecodeConfig(max_len=2))
        support = _all_sequences([4, 5, 6], 2)
        probs = np.exp(log_prob(p, encode(p, [[4]] * len(support)), support).value)
        index = {tuple(s): i for i, s in enumerate(support)}
        obs = np.bincount([index[tuple(s)] for s in seqs], minlength=len(support))
        assert stats.chisquare(obs, probs * n).pvalue > 0.01


class TestGreedyAndBeam:
    def test_zero_params_tie_break(self):
        p = SeqModelParams.zeros(ModelConfig(8, 3, 4, 3))
        # step 0: all content tokens tie, lowest id 4; step 1: EOS (id 2) is the lowest legal id
        assert greedy_decode(p, encode(p, [[5, 6]])) == [[4]]

    def test_beam_width_one_is_greedy(self):
        p = _model(seed=9)
        lat = encode(p, [[4, 5], [7], [6, 6, 5]])
        assert beam_decode(p, lat, DecodeConfig(beam_width=1)) == greedy_decode(p, lat)

    def test_beam_not_worse_than_greedy(self):
        for seed in range(5):
            p = _model(seed=seed)
            srcs = [[4, 5], [7]]
            lat = encode(p, srcs)
            _, gscore = greedy_decode_with_score(p, lat)
            best = beam_decode(p, lat, DecodeConfig(beam_width=3))
            bscore = log_prob(p, lat, best).value
            assert np.all(bscore >= gscore - 1e-12)

    def test_full_width_is_exact_argmax(self):
        for seed in range(5):
            p = _model(n_content=3, max_len=2, seed=seed, scale=2.0)
            seqs = _all_sequences([4, 5, 6], 2)
            lat1 = encode(p, [[5, 4]])
            lps = log_prob(p, encode(p, [[5, 4]] * len(seqs)), seqs).value
            best = seqs[int(np.argmax(lps))]
            assert beam_decode(p, lat1, DecodeConfig(beam_width=len(seqs)))[0] == best


class TestPadBatch:
    def test_mask(self):
        ids, mask = sm.pad_batch([[4, 5, 6], [7]], 8)
        np.testing.assert_array_equal(ids, [[4, 5, 6], [7, 0, 0]])
        np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            sm.pad_batch([], 8)
