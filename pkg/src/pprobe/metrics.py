"""Task and information measurements, all in nats."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SentenceRecord


@dataclass(frozen=True)
class InfoEstimate:
    h_s: float
    h_s_given_h: float
    mi: float
    clamped: bool = False


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Case-insensitive corpus BLEU in [0, 100], single reference, no smoothing."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand = [t.lower() for t in cand]
        ref = [t.lower() for t in ref]
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = min(0.0, 1.0 - r_len / c_len)
    return 100.0 * math.exp(log_p + bp)


def label_entropy(corpus: Sequence[SentenceRecord]) -> float:
    """Plug-in entropy of the token-level label distribution."""
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter(s for rec in corpus for s in rec.labels)
    return entropy_of_counts(counts.values())


def entropy_of_counts(counts) -> float:
    counts = np.asarray(list(counts), dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0


def conditional_entropy(probe, encoder, batches) -> float:
    """Token-weighted mean probe cross-entropy over ``batches`` with a frozen encoder.

    An upper bound on H(s|h) once the probe has been fitted.
    """
    total = 0.0
    count = 0
    with ad.no_grad():
        for b in batches:
            H = encoder.encode_batch(b.src, b.src_mask)
            n = int(b.src_mask.sum())
            total += ad.nll(probe.log_probs(H), b.labels, b.src_mask).item() * n
            count += n
    return total / count


def mutual_information(h_s: float, h_s_given_h: float) -> InfoEstimate:
    if not (math.isfinite(h_s) and math.isfinite(h_s_given_h)) or h_s < 0:
        raise ValueError(f"invalid entropies h_s={h_s}, h_s_given_h={h_s_given_h}")
    diff = h_s - h_s_given_h
    return InfoEstimate(h_s, h_s_given_h, max(0.0, diff), clamped=diff < 0)


def perplexity(mean_nll_nats: float) -> float:
    if mean_nll_nats < 0:
        raise ValueError("mean NLL must be non-negative")
    return math.exp(mean_nll_nats)
