"""Corpus-level BLEU, ROUGE-L and CIDEr-D for tokenized captions.

``candidates`` is a list of token lists; ``references`` is a parallel list
of reference sets (each a list of token lists).
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

Tokens = Sequence[str]

CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
ROUGE_BETA2 = 1.2  # weight on recall, applied as beta squared


def _check(candidates, references) -> None:
    if not candidates:
        raise ValueError("no candidates to score")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise ValueError(f"candidate {i} has no references")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------------ BLEU


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int


def bleu_stats(candidates, references, max_n: int = 4) -> BleuStats:
    """Clipped n-gram match counts summed over the corpus.

    The reference length per candidate is the closest reference length
    (shorter wins a tie).
    """
    _check(candidates, references)
    matches, totals = [0] * max_n, [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            c = ngrams(cand, n)
            if not c:
                continue
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matches[n - 1] += sum(min(k, best[g]) for g, k in c.items())
            totals[n - 1] += sum(c.values())
    return BleuStats(matches, totals, cand_len, ref_len)


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """BLEU-1..max_n.

    Brevity penalty ``exp(1 - r/c)`` when the corpus candidate length ``c``
    is below the reference length ``r``. For n >= 2 an order with zero
    matches is smoothed to ``1 / (total + 1)``; unigram precision is not.
    """
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    s = bleu_stats(candidates, references, max_n)
    if s.cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if s.cand_len > s.ref_len else math.exp(1.0 - s.ref_len / s.cand_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        m, t = s.matches[n], s.totals[n]
        if n > 0 and m == 0:
            m, t = m + 1, t + 1
        if m == 0:
            scores.extend([0.0] * (max_n - n))
            return scores
        log_sum += math.log(m / t)
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# --------------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Tokens, refs: Sequence[Tokens], beta2: float = ROUGE_BETA2) -> float:
    """LCS F-measure using the best precision and best recall over refs."""
    if not cand:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(cand, r)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta2) * p * r / (r + beta2 * p)


def rouge_l(candidates, references, beta2: float = ROUGE_BETA2) -> float:
    _check(candidates, references)
    return sum(rouge_l_sentence(c, r, beta2) for c, r in zip(candidates, references)) / len(candidates)


# ----------------------------------------------------------------------- CIDEr


def _tfidf(counts: Counter, df: dict, log_n_images: float, n: int):
    vec = [dict() for _ in range(n)]
    norm = [0.0] * n
    for gram, tf in counts.items():
        order = len(gram) - 1
        w = tf * (log_n_images - math.log(max(1.0, df.get(gram, 0.0))))
        vec[order][gram] = w
        norm[order] += w * w
    return vec, [math.sqrt(x) for x in norm]


def _all_ngrams(tokens: Tokens, n: int) -> Counter:
    c: Counter = Counter()
    for k in range(1, n + 1):
        c.update(ngrams(tokens, k))
    return c


def cider_scores(candidates, references, n: int = 4, sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-candidate CIDEr-D (x10), IDF taken from the reference sets."""
    _check(candidates, references)
    if len(references) < 2:
        raise ValueError("CIDEr needs at least two images to define document frequencies")
    lowered = [[[t.lower() for t in r] for r in refs] for refs in references]
    df: defaultdict = defaultdict(float)
    for refs in lowered:
        for gram in set(g for r in refs for g in _all_ngrams(r, n)):
            df[gram] += 1.0
    log_n = math.log(float(len(references)))

    scores = []
    for cand, refs in zip(candidates, lowered):
        cand = [t.lower() for t in cand]
        vh, nh = _tfidf(_all_ngrams(cand, n), df, log_n, n)
        total = [0.0] * n
        for r in refs:
            vr, nr = _tfidf(_all_ngrams(r, n), df, log_n, n)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            for k in range(n):
                val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                total[k] += val * penalty
        scores.append(CIDER_SCALE * sum(total) / n / len(refs))
    return scores


def cider(candidates, references, n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    s = cider_scores(candidates, references, n, sigma)
    return sum(s) / len(s)


# ---------------------------------------------------------------------- report


@dataclass
class EvalReport:
    scores: dict[str, float]
    n: int
    mean_length: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.scores)
        d["n"] = self.n
        d["mean_length"] = self.mean_length
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def score_corpus(candidates, references) -> EvalReport:
    b = bleu(candidates, references, 4)
    scores = {
        "bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
        "rougeL": rouge_l(candidates, references),
        "cider": cider(candidates, references),
    }
    mean_len = sum(len(c) for c in candidates) / len(candidates)
    return EvalReport(scores, len(candidates), mean_len)
