"""BLEU-1/2, Distinct-1/2, best-of-N selection and synthetic-oracle scoring.

All metrics work on normalised whitespace tokens (lowercase, collapsed
spaces), not on BPE units.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

from .tokenizer import normalize


def tokens(text):
    return normalize(text).split()


def ngrams(toks, n):
    return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]


def _clipped_matches(cand, ref, n):
    c = Counter(ngrams(cand, n))
    r = Counter(ngrams(ref, n))
    return sum(min(k, r[g]) for g, k in c.items()), sum(c.values())


def _bleu(pairs, n):
    log_p = 0.0
    for k in range(1, n + 1):
        matched = total = 0
        for cand, ref in pairs:
            m, t = _clipped_matches(cand, ref, k)
            matched += m
            total += t
        if matched == 0 and k == 1:
            return 0.0
        # add-one smoothing for higher orders with no matches at all
        p = matched / total if matched else 1.0 / (total + 1)
        log_p += math.log(p) / n
    c_len = sum(len(c) for c, _ in pairs)
    r_len = sum(len(r) for _, r in pairs)
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu_n(candidates, references, n):
    """Corpus-level cumulative BLEU-n (n in {1, 2}) with brevity penalty."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("no candidates to score")
    return _bleu([(tokens(c), tokens(r)) for c, r in zip(candidates, references)], n)


def sentence_bleu1(candidate, reference):
    return _bleu([(tokens(candidate), tokens(reference))], 1)


def distinct_n(responses, n):
    """Unique n-grams across all responses divided by the total number of words."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    toks = [tokens(r) for r in responses]
    words = sum(len(t) for t in toks)
    if words == 0:
        raise ValueError("all responses are empty")
    if not any(len(t) >= n for t in toks):
        raise ValueError(f"no response has at least {n} words")
    uniq = set()
    for t in toks:
        uniq.update(ngrams(t, n))
    return len(uniq) / words


def best_of_n(context, candidates, reference):
    """Candidate with the highest sentence BLEU-1 against ``reference`` (first wins ties)."""
    if not candidates:
        raise ValueError("no candidates")
    best, best_score = candidates[0], sentence_bleu1(candidates[0], reference)
    for c in candidates[1:]:
        s = sentence_bleu1(c, reference)
        if s > best_score:
            best, best_score = c, s
    return best


def synthetic_scores(outputs, oracle):
    """``outputs`` is a list of ``(context, [responses...])``.

    Returns ``(validity_rate, mean_distinct_valid_per_context)``.
    """
    n_valid = n_total = 0
    distinct = []
    for ctx, responses in outputs:
        valid_set = oracle.responses(ctx)
        ok = {normalize(r) for r in responses if normalize(r) in valid_set}
        n_valid += sum(normalize(r) in valid_set for r in responses)
        n_total += len(responses)
        distinct.append(len(ok))
    if n_total == 0:
        raise ValueError("no sampled responses")
    return n_valid / n_total, sum(distinct) / len(distinct)


@dataclass
class EvalReport:
    mode: str
    bleu1: float
    bleu2: float
    distinct1: float
    distinct2: float
    n_samples: int
    n_contexts: int
    validity: float | None = None
    diversity: float | None = None

    def to_dict(self):
        return asdict(self)


EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "bleu1", "bleu2", "distinct1", "distinct2", "n_samples", "n_contexts"],
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["standard", "upper_bound", "synthetic"]},
        "bleu1": {"type": "number", "minimum": 0, "maximum": 1},
        "bleu2": {"type": "number", "minimum": 0, "maximum": 1},
        "distinct1": {"type": "number", "minimum": 0, "maximum": 1},
        "distinct2": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "n_contexts": {"type": "integer", "minimum": 1},
        "validity": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "diversity": {"type": ["number", "null"], "minimum": 0},
    },
}
