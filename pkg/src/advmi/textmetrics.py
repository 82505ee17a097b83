"""Diversity, relevance and BLEU metrics over token sequences.

Sequences may hold any hashable tokens (ids or strings).  Relevance metrics
need integer ids to index the embedding table.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Corpus = Sequence[Sequence[Hashable]]


@dataclass
class MetricsReport:
    dist1: float
    dist2: float
    ent4: float
    avg_rel: float
    greedy_rel: float
    extrema_rel: float
    bleu: float

    def as_dict(self) -> dict:
        return asdict(self)


def ngrams(seq: Sequence[Hashable], n: int) -> list[tuple]:
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def dist_n(corpus: Corpus, n: int) -> float:
    """Distinct n-gram types over total n-gram tokens, pooled across the corpus."""
    grams = [g for seq in corpus for g in ngrams(seq, n)]
    if not grams:
        raise ValueError(f"corpus has no {n}-grams")
    return len(set(grams)) / len(grams)


def ent_4(corpus: Corpus) -> float:
    """Entropy (nats) of the empirical 4-gram distribution."""
    counts = Counter(g for seq in corpus for g in ngrams(seq, 4))
    total = sum(counts.values())
    if total == 0:
        raise ValueError("corpus has no 4-grams")
    return -math.fsum(c / total * math.log(c / total) for c in counts.values())


def _cos(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _extrema(vectors: np.ndarray) -> np.ndarray:
    hi, lo = vectors.max(axis=0), vectors.min(axis=0)
    # larger magnitude wins; a tie goes to the positive value
    return np.where(hi >= -lo, hi, lo)


def embedding_relevance(hypothesis: Sequence[int], reference: Sequence[int],
                        embedding: np.ndarray) -> tuple[float, float, float]:
    """(average, greedy, extrema) cosine relevance of one hypothesis/reference pair."""
    if len(hypothesis) == 0 or len(reference) == 0:
        raise ValueError("hypothesis and reference must be non-empty")
    h = embedding[np.asarray(hypothesis, dtype=np.intp)]
    r = embedding[np.asarray(reference, dtype=np.intp)]

    avg = _cos(h.mean(axis=0), r.mean(axis=0))
    if avg is None:
        log.debug("zero-norm mean embedding; average relevance set to 0")
        avg = 0.0

    hn = np.linalg.norm(h, axis=1)
    rn = np.linalg.norm(r, axis=1)
    if np.any(hn == 0) or np.any(rn == 0):
        log.debug("zero-norm token embedding; greedy relevance set to 0")
        greedy = 0.0
    else:
        sims = (h / hn[:, None]) @ (r / rn[:, None]).T
        greedy = 0.5 * (sims.max(axis=1).mean() + sims.max(axis=0).mean())

    ext = _cos(_extrema(h), _extrema(r))
    if ext is None:
        log.debug("zero-norm extrema vector; extrema relevance set to 0")
        ext = 0.0
    return float(avg), float(greedy), float(ext)


def corpus_relevance(hypotheses: Corpus, references: Corpus, embedding: np.ndarray):
    scores = np.array([embedding_relevance(h, r, embedding) for h, r in zip(hypotheses, references)])
    return tuple(float(x) for x in scores.mean(axis=0))


def bleu(hypotheses: Corpus, references: Corpus, max_n: int = 4) -> float:
    """Corpus BLEU, one reference per hypothesis.

    Clipped n-gram precisions pooled over the corpus; add-one smoothing on the
    counts for n >= 2; brevity penalty ``exp(1 - r/c)`` when the hypotheses
    are shorter than the references.
    """
    if len(hypotheses) == 0 or len(hypotheses) != len(references):
        raise ValueError("need equally many hypotheses and references, at least one")
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        match = total = 0
        for h, r in zip(hypotheses, references):
            hc, rc = Counter(ngrams(h, n)), Counter(ngrams(r, n))
            match += sum(min(c, rc[g]) for g, c in hc.items())
            total += sum(hc.values())
        if n >= 2:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        log_p += math.log(match / total)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(min(1.0, bp * math.exp(log_p / max_n)))


def metrics_report(hypotheses: Corpus, references: Corpus, embedding: np.ndarray) -> MetricsReport:
    """All metrics at once; metrics that need missing n-grams report 0."""
    def safe(fn, *a):
        try:
            return fn(*a)
        except ValueError:
            return 0.0

    avg, greedy, ext = corpus_relevance(hypotheses, references, embedding)
    return MetricsReport(safe(dist_n, hypotheses, 1), safe(dist_n, hypotheses, 2),
                         safe(ent_4, hypotheses), avg, greedy, ext, bleu(hypotheses, references))
