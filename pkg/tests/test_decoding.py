import math

import numpy as np
import pytest

from lowrank_nmt import autodiff as ad
from lowrank_nmt.autodiff import ContractError
from lowrank_nmt.data import _pad
from lowrank_nmt.decoding import (Hypothesis, beam_search, bleu, brevity_penalty, greedy_decode,
                                  modified_precision, ngram_stats, translate)
from lowrank_nmt.models import BOS, EOS, PAD, build_model, preset

import oracles


def peaky_model(family, vocab, seed):
    """A random model with sharpened output distributions so rankings are far from ties."""
    with ad.default_dtype(np.float64):
        model = build_model(preset(f"toy-{family}").with_vocab(vocab, vocab), seed=seed)
    for p in model.projection.parameters():
        p.data *= 4.0
    return model


def random_source(seed, vocab, length=4):
    return list(np.random.default_rng(seed).integers(4, vocab, length)) + [EOS]


class TestGreedyAndBeam:
    @pytest.mark.parametrize("family", ["lstm", "transformer"])
    def test_beam_one_is_greedy(self, family):
        for seed in range(5):
            model = peaky_model(family, 12, seed)
            src = random_source(seed, 12, 6)
            beam = beam_search(model, src, beam_width=1, max_len=8)
            greedy = greedy_decode(model, np.array([src]), max_len=8)[0]
            assert beam.tokens == greedy.tokens
            assert beam.logprob == pytest.approx(greedy.logprob, abs=1e-9)

    @pytest.mark.parametrize("family", ["lstm", "transformer"])
    def test_full_beam_matches_exhaustive_search(self, family):
        for seed in range(5):
            model = peaky_model(family, 7, seed)
            src = random_source(seed, 7)
            tokens, score, n = oracles.exhaustive_best(model, src, max_len=4)
            assert n == 1 + 4 + 16 + 64 + 256
            hyp = beam_search(model, src, beam_width=5 ** 4, max_len=4)
            assert hyp.tokens == tokens
            assert hyp.score == pytest.approx(score, abs=1e-9)

    def test_never_emits_pad_or_bos(self):
        model = peaky_model("transformer", 9, 0)
        for h in beam_search(model, random_source(0, 9), beam_width=4, max_len=5, return_all=True):
            assert PAD not in h.tokens and BOS not in h.tokens

    def test_hypotheses_end_at_eos_or_length(self):
        model = peaky_model("lstm", 9, 1)
        for h in beam_search(model, random_source(1, 9), beam_width=4, max_len=5, return_all=True):
            assert h.finished or len(h.tokens) == 5
            assert EOS not in h.tokens[:-1]

    def test_invalid_width(self):
        with pytest.raises(ContractError):
            beam_search(peaky_model("transformer", 9, 0), [4, EOS], beam_width=0)

    def test_batched_greedy_matches_one_at_a_time(self):
        model = peaky_model("transformer", 12, 2)
        sources = [random_source(s, 12, n)[:-1] for s, n in zip(range(6), (1, 5, 3, 7, 2, 4))]
        batched = translate(model, sources, beam_width=1, max_len=8, batch_size=4)
        single = [greedy_decode(model, _pad([s + [EOS]]), 8)[0].words() for s in sources]
        assert batched == single

    def test_length_normalized_score(self):
        h = Hypothesis([5, 6, EOS], -3.0)
        assert h.score == pytest.approx(-1.0) and h.words() == [5, 6]


class TestBleu:
    def test_clipped_unigram_precision(self):
        hyp = ["the the the the the the the"]
        refs = ["the cat is on the mat"]
        assert modified_precision(hyp, refs, 1) == pytest.approx(2 / 7)

    def test_identical_is_100(self):
        assert bleu(["a b c d e"], ["a b c d e"]) == pytest.approx(100.0)

    def test_brevity_penalty(self):
        assert brevity_penalty(5, 6) == pytest.approx(math.exp(-0.2))
        assert brevity_penalty(7, 6) == 1.0 and brevity_penalty(0, 3) == 0.0
        assert bleu(["a b c d e"], ["a b c d e f"]) == pytest.approx(100 * math.exp(-0.2))

    def test_hand_computed_corpus_score(self):
        hyps = ["a b c d e f", "x y"]
        refs = ["a b c d e g", "x y"]
        # unigrams 7/8, bigrams 5/6, trigrams 3/4, 4-grams 2/3, equal lengths
        expected = 100 * (7 / 8 * 5 / 6 * 3 / 4 * 2 / 3) ** 0.25
        assert bleu(hyps, refs) == pytest.approx(expected, rel=1e-12)
        m, t, c, r = ngram_stats(hyps, refs)
        assert (m, t, c, r) == ([7, 5, 3, 2], [8, 6, 4, 3], 8, 8)

    def test_zero_higher_order_match(self):
        assert bleu(["a b x y"], ["a b c d"]) == 0.0

    def test_smoothing(self):
        # p1 = 2/4, smoothed p2 = 2/4, p3 = 1/3, p4 = 1/2
        expected = 100 * (2 / 4 * 2 / 4 * 1 / 3 * 1 / 2) ** 0.25
        assert bleu(["a b x y"], ["a b c d"], smooth=True) == pytest.approx(expected, rel=1e-12)

    def test_token_lists_accepted(self):
        assert bleu([[1, 2, 3, 4]], [[1, 2, 3, 4]]) == pytest.approx(100.0)

    def test_mismatched_counts(self):
        with pytest.raises(ContractError):
            bleu(["a"], ["a", "b"])
