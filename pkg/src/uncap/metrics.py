"""Corpus-level caption metrics: BLEU-4, ROUGE-L, CIDEr.

Canonical definitions, implemented over normalized surface-token lists:

* BLEU-4 — geometric mean of clipped modified n-gram precisions (n=1..4)
  times the brevity penalty exp(1 - r/c) for c < r, with the closest
  reference length as r.  The corpus variant aggregates clipped counts and
  lengths before taking ratios.  Strict scoring (no smoothing) returns 0
  whenever some n-gram precision is 0; per-sentence diagnostic scores use
  +1 smoothing and are labeled as such in the report breakdown.
* ROUGE-L — F-measure (beta = 1.2) of the longest common subsequence,
  maximized over references; the corpus score is the mean.
* CIDEr — for n=1..4, 10 times the mean cosine similarity between TF-IDF
  n-gram vectors of the candidate and each reference, averaged over n;
  document frequencies count the reference sets (one per image) that
  contain the n-gram.  The corpus score is the mean over images.

Reported corpus values are scaled by 100 to match the usual table format
(CIDEr may therefore exceed 100).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .corpus import normalize

Tokens = Sequence[str]

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
BLEU_MAX_N = 4


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in references)[1]


def bleu_components(candidate: Tokens, references: Sequence[Tokens]) -> dict:
    """Clipped counts and lengths from which any BLEU variant follows."""
    if not references:
        raise ValueError("BLEU needs at least one reference")
    correct, guess = [], []
    for n in range(1, BLEU_MAX_N + 1):
        cand_counts = ngram_counts(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], count)
        correct.append(sum(min(c, max_ref[g]) for g, c in cand_counts.items()))
        guess.append(max(0, len(candidate) - n + 1))
    return {
        "correct": correct,
        "guess": guess,
        "candidate_len": len(candidate),
        "ref_len": _closest_ref_length(len(candidate), references) if len(candidate) else min(len(r) for r in references),
    }


def _bleu_from_totals(correct: Sequence[int], guess: Sequence[int], cand_len: int, ref_len: int, smooth: bool) -> float:
    log_sum = 0.0
    for c, g in zip(correct, guess):
        if smooth:
            c, g = c + 1, g + 1
        if c == 0 or g == 0:
            return 0.0
        log_sum += math.log(c / g)
    score = math.exp(log_sum / BLEU_MAX_N)
    if cand_len == 0:
        return 0.0
    if cand_len < ref_len:
        score *= math.exp(1.0 - ref_len / cand_len)
    return score


def bleu4(candidate: Tokens, references: Sequence[Tokens], smooth: bool = False) -> float:
    """Sentence BLEU-4 in [0, 1]; an empty candidate scores 0."""
    if not candidate:
        return 0.0
    comp = bleu_components(candidate, references)
    return _bleu_from_totals(comp["correct"], comp["guess"], comp["candidate_len"], comp["ref_len"], smooth)


def corpus_bleu4(items: Sequence[tuple[Tokens, Sequence[Tokens]]]) -> float:
    """Corpus BLEU-4: n-gram counts and lengths aggregated before the ratios."""
    if not items:
        raise ValueError("corpus BLEU needs at least one item")
    total_correct = [0] * BLEU_MAX_N
    total_guess = [0] * BLEU_MAX_N
    total_cand = 0
    total_ref = 0
    for candidate, references in items:
        comp = bleu_components(candidate, references)
        for n in range(BLEU_MAX_N):
            total_correct[n] += comp["correct"][n]
            total_guess[n] += comp["guess"][n]
        total_cand += comp["candidate_len"]
        total_ref += comp["ref_len"]
    return _bleu_from_totals(total_correct, total_guess, total_cand, total_ref, smooth=False)


def _lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, maximum over references; empty candidate scores 0."""
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0 or not ref:
            continue
        recall = lcs / len(ref)
        precision = lcs / len(candidate)
        denom = recall + beta**2 * precision
        if denom > 0:
            best = max(best, (1 + beta**2) * recall * precision / denom)
    return best


def _tfidf_vector(counts: Counter, doc_freq: Counter, log_corpus: float) -> dict:
    return {g: c * (log_corpus - math.log(max(1.0, doc_freq[g]))) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider(items: Sequence[tuple[Tokens, Sequence[Tokens]]]) -> tuple[float, list[float]]:
    """Corpus CIDEr and the per-image scores (each in [0, 10])."""
    if not items:
        raise ValueError("CIDEr needs a non-empty corpus")
    doc_freq = [Counter() for _ in range(CIDER_MAX_N)]
    for _, references in items:
        for n in range(1, CIDER_MAX_N + 1):
            seen = set()
            for ref in references:
                seen.update(ngram_counts(ref, n))
            for gram in seen:
                doc_freq[n - 1][gram] += 1
    log_corpus = math.log(len(items))
    per_item = []
    for candidate, references in items:
        if not references:
            raise ValueError("CIDEr needs at least one reference per item")
        total = 0.0
        for n in range(1, CIDER_MAX_N + 1):
            cand_vec = _tfidf_vector(ngram_counts(candidate, n), doc_freq[n - 1], log_corpus)
            sim = 0.0
            for ref in references:
                ref_vec = _tfidf_vector(ngram_counts(ref, n), doc_freq[n - 1], log_corpus)
                sim += _cosine(cand_vec, ref_vec)
            total += 10.0 * sim / len(references)
        per_item.append(total / CIDER_MAX_N)
    return sum(per_item) / len(per_item), per_item


@dataclass
class EvalReport:
    """Corpus scores (scaled by 100) plus a per-image breakdown.

    The corpus numbers are recomputable from the breakdown: BLEU-4 from the
    per-image clipped counts and lengths, ROUGE-L and CIDEr as means of the
    per-image scores.
    """

    bleu4: float
    rouge_l: float
    cider: float
    per_image: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "per_image": self.per_image,
        }


def evaluate(decode: Callable[[dict], str], items: Sequence[dict]) -> EvalReport:
    """Decode every test item and score the corpus.

    ``items`` carry ``image_id`` and non-empty ``references``; ``decode``
    maps one item to a caption string. Deterministic for a deterministic
    decoder.
    """
    items = list(items)
    if not items:
        raise ValueError("empty test set")
    missing = sorted(
        str(it.get("image_id")) for it in items if not it.get("references")
    )
    if missing:
        raise ValueError(f"test items without references: {missing}")

    scored = []
    rows = []
    for item in items:
        candidate_text = decode(item)
        candidate = normalize(candidate_text) if candidate_text else []
        references = [normalize(r) for r in item["references"]]
        if any(not r for r in references):
            raise ValueError(f"image {item['image_id']!r} has an empty reference after normalization")
        scored.append((candidate, references))
        comp = bleu_components(candidate, references)
        rows.append(
            {
                "image_id": item["image_id"],
                "caption": candidate_text,
                "empty": not candidate,
                "bleu4_smoothed_diagnostic": bleu4(candidate, references, smooth=True),
                "rouge_l": rouge_l(candidate, references),
                "bleu_correct": comp["correct"],
                "bleu_guess": comp["guess"],
                "candidate_len": comp["candidate_len"],
                "ref_len": comp["ref_len"],
            }
        )
    corpus_c, per_item_c = cider(scored)
    for row, item_score in zip(rows, per_item_c):
        row["cider"] = 100.0 * item_score
    return EvalReport(
        bleu4=100.0 * corpus_bleu4(scored),
        rouge_l=100.0 * (sum(r["rouge_l"] for r in rows) / len(rows)),
        cider=100.0 * corpus_c,
        per_image=rows,
    )
