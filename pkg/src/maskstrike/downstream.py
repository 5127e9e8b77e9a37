"""Caption-level evaluation of attacks.

A deterministic template captioner maps detections to text, the original
image's caption serves as the reference, and corpus BLEU / ROUGE-L / keyword
removal rate quantify the drift. No neural captioner is involved; the point
is that changed detections produce measurably changed sentences.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass

from .detector.model import DetectionSet

_CAPTION_TAIL = ("on", "a", "textured", "background")


@dataclass
class CaptionPair:
    original_caption: list[str]
    adversarial_caption: list[str]
    o_pick_keyword: str


def generate_caption(dets: DetectionSet) -> list[str]:
    """Template sentence over the top-3 detections by confidence.

    "a {c1} and a {c2} and a {c3} on a textured background", truncated to
    the available detections; an empty set reads "an empty scene". Class
    names keep their hyphens as single tokens. Confidence ties resolve
    toward the earlier box so the caption is deterministic.
    """
    if len(dets) == 0:
        return ["an", "empty", "scene"]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    words: list[str] = []
    for rank, i in enumerate(order[:3]):
        if rank:
            words.append("and")
        words += ["a", dets.class_vocab[dets[i].predicted_class]]
    words += _CAPTION_TAIL
    return words


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: list[list[str]], references: list[list[str]],
           n: int) -> float:
    """Corpus BLEU: clipped n-gram precision pooled over the corpus, uniform
    geometric mean over orders 1..n, brevity penalty, no smoothing (a zero
    precision at any order zeroes the score)."""
    if not (1 <= n <= 4):
        raise ValueError("n must be in 1..4")
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equally many candidates and references")
    log_precision = 0.0
    for order in range(1, n + 1):
        clipped = 0
        total = 0
        for cand, ref in zip(candidates, references):
            counts = _ngram_counts(cand, order)
            ref_counts = _ngram_counts(ref, order)
            clipped += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total += max(len(cand) - order + 1, 0)
        if clipped == 0:
            return 0.0
        log_precision += math.log(clipped / total)
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision / n)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str]) -> float:
    """LCS F-measure with beta = 1. Two empty captions are identical (1.0)."""
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def corpus_rouge_l(candidates: list[list[str]],
                   references: list[list[str]]) -> float:
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equally many candidates and references")
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(
        candidates)


def kwr(pairs: list[CaptionPair]) -> float | None:
    """Keyword removal rate in percent.

    Denominator: pairs whose original caption contains the o_pick keyword.
    Numerator: those whose adversarial caption no longer does. None when no
    pair is eligible (the non-attacked-keyword case)."""
    eligible = [p for p in pairs if p.o_pick_keyword in p.original_caption]
    if not eligible:
        return None
    removed = sum(p.o_pick_keyword not in p.adversarial_caption
                  for p in eligible)
    return 100.0 * removed / len(eligible)


@dataclass
class CaptionScores:
    variant: str
    n_pairs: int
    b1: float
    b2: float
    b3: float
    b4: float
    rouge: float
    kwr: float | None


def score_caption_pairs(variant: str, pairs: list[CaptionPair]) -> CaptionScores:
    if not pairs:
        raise ValueError("no caption pairs to score")
    cands = [p.adversarial_caption for p in pairs]
    refs = [p.original_caption for p in pairs]
    b = [bleu_n(cands, refs, n) for n in (1, 2, 3, 4)]
    return CaptionScores(variant, len(pairs), b[0], b[1], b[2], b[3],
                         corpus_rouge_l(cands, refs), kwr(pairs))


def caption_csv(scores: list[CaptionScores]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "n_pairs", "b1", "b2", "b3", "b4",
                     "rouge_l", "kwr"])
    for s in scores:
        writer.writerow([
            s.variant, s.n_pairs,
            *(f"{v:.10g}" for v in (s.b1, s.b2, s.b3, s.b4, s.rouge)),
            "" if s.kwr is None else f"{s.kwr:.10g}",
        ])
    return buf.getvalue()
