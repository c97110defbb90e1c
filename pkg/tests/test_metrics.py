import math

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdialog.corpus import SyntheticOracle, Turn, context_key
from latentdialog.metrics import (EVAL_REPORT_SCHEMA, EvalReport, _clipped_matches, best_of_n, bleu_n,
                                  distinct_n, sentence_bleu1, synthetic_scores)

WORDS = st.sampled_from(["a", "b", "c", "d", "e", "f"])
SENT = st.lists(WORDS, min_size=2, max_size=8).map(" ".join)


def test_identical_is_one():
    assert bleu_n(["the cat sat"], ["the cat sat"], 1) == 1.0
    assert bleu_n(["the cat sat"], ["the cat sat"], 2) == 1.0


def test_hand_unigram_precision():
    assert bleu_n(["the cat sat"], ["the cat ran"], 1) == pytest.approx(2 / 3)


def test_hand_bigram_example():
    # unigrams 2/3, bigrams 1/2 ("the cat"), equal lengths
    assert bleu_n(["the cat sat"], ["the cat ran"], 2) == pytest.approx(math.sqrt(2 / 3 * 1 / 2))


def test_brevity_penalty():
    assert bleu_n(["the cat"], ["the cat sat down"], 1) == pytest.approx(math.exp(1 - 4 / 2))


def test_clipping():
    assert bleu_n(["the the the"], ["the cat"], 1) == pytest.approx(1 / 3)


def test_disjoint_is_near_zero():
    cand = " ".join(f"x{i}" for i in range(10))
    ref = " ".join(f"y{i}" for i in range(10))
    assert bleu_n([cand], [ref], 1) < 0.05
    assert bleu_n([cand], [ref], 2) < 0.05


def test_missing_bigrams_are_smoothed():
    # unigrams 2/2, no bigram matches: add-one gives 1/(1 + 1)
    assert bleu_n(["a b"], ["b a"], 2) == pytest.approx(math.sqrt(1.0 * 1 / 2))


def test_corpus_level_pools_counts():
    # 1/2 and 3/3 pooled is 4/5, not the mean of sentence scores
    got = bleu_n(["a x", "b c d"], ["a y", "b c d"], 1)
    assert got == pytest.approx(4 / 5)


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu_n([], [], 1)
    with pytest.raises(ValueError):
        bleu_n(["a"], ["a", "b"], 1)
    with pytest.raises(ValueError):
        bleu_n(["a"], ["a"], 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(SENT, SENT), min_size=1, max_size=5))
def test_bleu_matches_nltk_when_unsmoothed(pairs):
    nltk_bleu = pytest.importorskip("nltk.translate.bleu_score")
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    for n, w in ((1, (1.0,)), (2, (0.5, 0.5))):
        toks_c = [c.split() for c in cands]
        toks_r = [[r.split()] for r in refs]
        ours = bleu_n(cands, refs, n)
        # only compare where every order has at least one match, so no smoothing applies
        if all(sum(_clipped_matches(c.split(), r.split(), k)[0] for c, r in pairs) > 0 for k in range(1, n + 1)):
            assert ours == pytest.approx(nltk_bleu.corpus_bleu(toks_r, toks_c, weights=w), rel=1e-12)
        assert 0 <= ours <= 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(SENT, SENT), min_size=2, max_size=5), st.randoms())
def test_bleu_is_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    for n in (1, 2):
        a = bleu_n([c for c, _ in pairs], [r for _, r in pairs], n)
        b = bleu_n([c for c, _ in shuffled], [r for _, r in shuffled], n)
        assert a == pytest.approx(b, rel=1e-12)


def test_distinct_hand_examples():
    assert distinct_n(["a b a b"], 1) == 0.5
    assert distinct_n(["a b a b"], 2) == 0.5
    assert distinct_n(["a b c d"], 1) == 1.0
    # bigrams never cross response boundaries: {ab, cd} over 4 words
    assert distinct_n(["a b", "c d"], 2) == 0.5
    assert distinct_n(["a b", "a b"], 1) == 0.5


def test_distinct_errors():
    with pytest.raises(ValueError):
        distinct_n(["", "  "], 1)
    with pytest.raises(ValueError):
        distinct_n(["a", "b"], 2)
    with pytest.raises(ValueError):
        distinct_n(["a b"], 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(SENT, min_size=1, max_size=6), st.sampled_from([1, 2]))
def test_distinct_bounds_and_order(responses, n):
    d = distinct_n(responses, n)
    assert 0 < d <= 1
    assert distinct_n(list(reversed(responses)), n) == d


def test_best_of_n():
    assert best_of_n(None, ["only one"], "whatever") == "only one"
    assert best_of_n(None, ["zz yy xx", "the cat sat"], "the cat sat") == "the cat sat"
    assert best_of_n(None, ["a b", "a b"], "a b") == "a b"
    # tie goes to the first candidate
    assert best_of_n(None, ["the dog", "the cow"], "the cat") == "the dog"
    with pytest.raises(ValueError):
        best_of_n(None, [], "x")


def test_best_of_n_agrees_with_independent_ranking():
    ref = "i really like warm green tea"
    cands = ["i like tea", "i really like cold tea", "we really like warm green tea a lot"]

    def bleu1(c, r):
        c, r = c.split(), r.split()
        hit = sum(min(c.count(w), r.count(w)) for w in set(c))
        bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
        return bp * hit / len(c)

    scores = [bleu1(c, ref) for c in cands]
    assert [sentence_bleu1(c, ref) for c in cands] == pytest.approx(scores)
    assert best_of_n(None, cands, ref) == cands[scores.index(max(scores))]


@settings(max_examples=50, deadline=None)
@given(st.lists(SENT, min_size=1, max_size=6), SENT)
def test_best_of_n_dominates_every_candidate(cands, ref):
    best = best_of_n(None, cands, ref)
    assert all(sentence_bleu1(best, ref) >= sentence_bleu1(c, ref) for c in cands)


def oracle_for(ctx, valid):
    return SyntheticOracle({context_key(ctx): frozenset(valid)}, 0)


def test_synthetic_scores():
    ctx = (Turn(0, "hi"),)
    valid = [f"r{i}" for i in range(8)]
    oracle = oracle_for(ctx, valid)
    assert synthetic_scores([(ctx, ["r1"] * 10)], oracle) == (1.0, 1.0)
    assert synthetic_scores([(ctx, ["r0", "r1", "r2", "r0"])], oracle) == (1.0, 3.0)
    assert synthetic_scores([(ctx, ["r0", "nope"])], oracle) == (0.5, 1.0)
    assert synthetic_scores([(ctx, ["nope"])], oracle) == (0.0, 0.0)
    with pytest.raises(KeyError):
        synthetic_scores([((Turn(0, "unknown"),), ["r0"])], oracle)


def test_report_schema():
    rep = EvalReport("synthetic", 0.5, 0.3, 0.2, 0.1, 10, 4, validity=0.9, diversity=2.5)
    jsonschema.validate(rep.to_dict(), EVAL_REPORT_SCHEMA)
    bad = dict(rep.to_dict(), bleu1=1.5)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, EVAL_REPORT_SCHEMA)
