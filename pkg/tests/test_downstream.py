import math

import numpy as np
import pytest

from maskstrike.detector.model import Detection, DetectionSet
from maskstrike.downstream import (
    CaptionPair,
    bleu_n,
    caption_csv,
    corpus_rouge_l,
    generate_caption,
    kwr,
    rouge_l,
    score_caption_pairs,
)
from maskstrike.geometry import Box

VOCAB = ["red-circle", "green-square", "blue-triangle", "background"]


def make_dets(entries, vocab=VOCAB):
    dets = [Detection(Box(*b), o, np.asarray(p, dtype=np.float64))
            for b, o, p in entries]
    return DetectionSet(dets, vocab, (32, 48), (32, 48))


# -- captioner ---------------------------------------------------------------


def test_caption_empty_scene():
    assert generate_caption(make_dets([])) == ["an", "empty", "scene"]


def test_caption_single_detection():
    dets = make_dets([((0, 0, 10, 10), 0.9, [0.8, 0.1, 0.05, 0.05])])
    assert generate_caption(dets) == [
        "a", "red-circle", "on", "a", "textured", "background"]


def test_caption_orders_by_confidence_and_truncates_to_three():
    dets = make_dets([
        ((0, 0, 10, 10), 0.5, [0.8, 0.1, 0.05, 0.05]),   # conf 0.40
        ((10, 0, 20, 10), 0.9, [0.1, 0.9, 0.0, 0.0]),    # conf 0.81
        ((20, 0, 30, 10), 0.7, [0.05, 0.05, 0.9, 0.0]),  # conf 0.63
        ((30, 0, 40, 10), 0.3, [0.9, 0.05, 0.03, 0.02]),  # conf 0.27, dropped
    ])
    assert generate_caption(dets) == [
        "a", "green-square", "and", "a", "blue-triangle", "and",
        "a", "red-circle", "on", "a", "textured", "background"]


def test_caption_confidence_tie_prefers_earlier_box():
    dets = make_dets([
        ((0, 0, 10, 10), 0.9, [0.1, 0.8, 0.05, 0.05]),
        ((10, 0, 20, 10), 0.9, [0.8, 0.1, 0.05, 0.05]),
    ])
    words = generate_caption(dets)
    assert words[:2] == ["a", "green-square"]
    assert generate_caption(dets) == words  # deterministic


# -- BLEU ---------------------------------------------------------------------


def _oracle_ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_bleu(cands, refs, n):
    """Clip by consuming reference n-grams one at a time; structured unlike
    the Counter-based implementation."""
    precisions = []
    for order in range(1, n + 1):
        match, total = 0, 0
        for c, r in zip(cands, refs):
            pool = _oracle_ngrams(r, order)
            for g in _oracle_ngrams(c, order):
                total += 1
                if g in pool:
                    pool.remove(g)
                    match += 1
        if match == 0:
            return 0.0
        precisions.append(match / total)
    geo = 1.0
    for p in precisions:
        geo *= p
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * geo ** (1.0 / n)


def test_bleu_identical_corpora():
    corpus = [list("abcd"), list("bcda")]
    for n in range(1, 5):
        assert bleu_n(corpus, corpus, n) == pytest.approx(1.0)


def test_bleu_disjoint_corpora_and_validation():
    assert bleu_n([list("abc")], [list("xyz")], 1) == 0.0
    with pytest.raises(ValueError):
        bleu_n([list("abc")], [list("abc")], 5)
    with pytest.raises(ValueError):
        bleu_n([], [], 1)
    with pytest.raises(ValueError):
        bleu_n([list("ab")], [list("ab"), list("cd")], 1)


def test_bleu_clipping_hand_case():
    # "a a a" vs "a b c": only one of the three a's may count
    assert bleu_n([["a", "a", "a"]], [["a", "b", "c"]], 1) == pytest.approx(1 / 3)


def test_bleu_brevity_penalty_hand_case():
    got = bleu_n([["a", "b"]], [["a", "b", "c"]], 1)
    assert got == pytest.approx(math.exp(-0.5))
    # bigram precision is also 1, so B-2 carries the same penalty
    assert bleu_n([["a", "b"]], [["a", "b", "c"]], 2) == pytest.approx(
        math.exp(-0.5))


def test_bleu_zero_trigram_overlap_is_exactly_zero():
    cand = [["a", "b", "x", "c", "d"]]
    ref = [["a", "b", "y", "c", "d"]]
    assert bleu_n(cand, ref, 3) == 0.0
    assert bleu_n(cand, ref, 2) > 0.0


def test_bleu_pair_order_invariance():
    rng = np.random.default_rng(3)
    cands = [[str(t) for t in rng.integers(0, 3, size=5)] for _ in range(6)]
    refs = [[str(t) for t in rng.integers(0, 3, size=6)] for _ in range(6)]
    perm = rng.permutation(6)
    for n in (1, 2):
        assert bleu_n(cands, refs, n) == pytest.approx(
            bleu_n([cands[i] for i in perm], [refs[i] for i in perm], n))


def test_bleu_matches_bruteforce_on_random_corpora():
    rng = np.random.default_rng(4)
    alphabet = ["a", "b", "c"]
    checked = 0
    for _ in range(60):
        size = int(rng.integers(1, 4))
        cands = [[alphabet[t] for t in rng.integers(0, 3, size=rng.integers(0, 8))]
                 for _ in range(size)]
        refs = [[alphabet[t] for t in rng.integers(0, 3, size=rng.integers(1, 8))]
                for _ in range(size)]
        if sum(len(c) for c in cands) == 0:
            continue
        for n in (1, 2, 3, 4):
            assert bleu_n(cands, refs, n) == pytest.approx(
                oracle_bleu(cands, refs, n), abs=1e-9)
            checked += 1
    assert checked >= 200


# -- ROUGE-L ------------------------------------------------------------------


def oracle_lcs(a, b):
    """Longest common subsequence by exhaustive enumeration of the shorter
    side's subsequences."""
    if len(a) > len(b):
        a, b = b, a
    best = 0
    for bits in range(1 << len(a)):
        sub = [a[i] for i in range(len(a)) if bits >> i & 1]
        it = iter(b)
        if all(tok in it for tok in sub):
            best = max(best, len(sub))
    return best


def oracle_rouge(cand, ref):
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = oracle_lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def test_rouge_hand_cases():
    assert rouge_l(list("abc"), list("abc")) == 1.0
    assert rouge_l(list("abc"), list("xyz")) == 0.0
    assert rouge_l([], []) == 1.0
    assert rouge_l(list("a"), []) == 0.0
    assert rouge_l("a cat sat".split(), "a cat".split()) == pytest.approx(0.8)


def test_rouge_matches_bruteforce_on_random_pairs():
    rng = np.random.default_rng(5)
    alphabet = ["a", "b", "c", "d"]
    for _ in range(60):
        cand = [alphabet[t] for t in rng.integers(0, 4, size=rng.integers(0, 9))]
        ref = [alphabet[t] for t in rng.integers(0, 4, size=rng.integers(0, 9))]
        assert rouge_l(cand, ref) == pytest.approx(oracle_rouge(cand, ref),
                                                   abs=1e-12)


def test_corpus_rouge_is_mean_over_pairs():
    cands = [list("abc"), list("xyz")]
    refs = [list("abc"), list("abc")]
    assert corpus_rouge_l(cands, refs) == pytest.approx(0.5)


# -- KWR ----------------------------------------------------------------------


def _pair(orig, adv, kw):
    return CaptionPair(orig.split(), adv.split(), kw)


def test_kwr_counts_only_eligible_pairs():
    pairs = [
        _pair("a cat on a mat", "a dog on a mat", "cat"),
        _pair("a cat here", "a cat here", "cat"),
        _pair("a cat sat", "a bird sat", "cat"),
        _pair("a cat ran", "nothing left", "cat"),
        _pair("no keyword here", "cat appears now", "cat"),  # ineligible
    ]
    assert kwr(pairs) == pytest.approx(75.0)


def test_kwr_undefined_without_eligible_pairs():
    assert kwr([_pair("a dog", "a dog", "cat")]) is None
    assert kwr([]) is None


# -- scoring table ------------------------------------------------------------


def test_score_caption_pairs_and_csv():
    pairs = [
        _pair("a red-circle on a textured background",
              "a green-square on a textured background", "red-circle"),
        _pair("a red-circle and a blue-triangle on a textured background",
              "a blue-triangle on a textured background", "red-circle"),
    ]
    scores = score_caption_pairs("non_tar_frequent", pairs)
    assert scores.n_pairs == 2
    assert scores.kwr == pytest.approx(100.0)
    assert 0.0 < scores.b1 < 1.0
    assert scores.b1 >= scores.b2 >= scores.b3

    empty_kwr = score_caption_pairs("non_tar_all", [
        _pair("an empty scene", "an empty scene", "")])
    text = caption_csv([scores, empty_kwr])
    lines = text.strip().split("\n")
    assert lines[0] == "variant,n_pairs,b1,b2,b3,b4,rouge_l,kwr"
    assert lines[1].split(",")[0] == "non_tar_frequent"
    assert lines[1].split(",")[-1] == "100"
    assert lines[2].split(",")[-1] == ""  # undefined KWR stays blank
    with pytest.raises(ValueError):
        score_caption_pairs("non_tar_frequent", [])
