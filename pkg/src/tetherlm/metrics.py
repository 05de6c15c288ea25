"""Copying metrics, normalized copying reduction, and the utility proxy.

Six surface metrics: threshold rates of ROUGE-1 and ROUGE-L F1, word and
character longest common substring, accumulated common substrings, and
MinHash-estimated Jaccard over word shingles. Word metrics score
lowercased, 100-word-truncated text; character LCS scores lowercased raw
text. NCR expresses a configuration's metric as the fraction of the
risky-to-safe gap it closes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lm import NgramModel, sequence_logprob
from .stemmer import stem

METRIC_NAMES = ("rouge1_rate", "rougeL_rate", "word_lcs", "char_lcs", "word_acs", "minhash")


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.4
    acs_min_len: int = 6
    shingle_size: int = 3
    minhash_perms: int = 128
    minhash_seed: int = 1234
    truncate_words: int = 100

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.acs_min_len < 1:
            raise ValueError("acs_min_len must be >= 1")


def normalize(text: str, truncate_words: int = 100) -> list[str]:
    """Lowercase, whitespace-split, keep the first `truncate_words` words."""
    return text.lower().split()[:truncate_words]


def rouge_f1(hyp: Sequence[str], ref: Sequence[str], variant: str = "one") -> float:
    """Unigram-overlap or LCS-subsequence F1 over Porter-stemmed words."""
    h = [stem(w) for w in hyp]
    r = [stem(w) for w in ref]
    if not h or not r:
        return 0.0
    if variant == "one":
        counts: dict[str, int] = {}
        for w in r:
            counts[w] = counts.get(w, 0) + 1
        match = 0
        for w in h:
            if counts.get(w, 0) > 0:
                counts[w] -= 1
                match += 1
    elif variant == "lcs_subseq":
        match = _lcs_subsequence(h, r)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if match == 0:
        return 0.0
    p = match / len(h)
    rec = match / len(r)
    return 2 * p * rec / (p + rec)


def _lcs_subsequence(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    eq = _match_matrix(a, b)
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for i in range(len(a)):
        # L[i][j] = max(L[i-1][j-1] + eq, L[i-1][j], L[i][j-1]); the last
        # term is a running maximum, so one cumulative max closes the row.
        take = prev[:-1] + eq[i]
        m = np.maximum(take, prev[1:])
        cur = np.empty_like(prev)
        cur[0] = 0
        np.maximum.accumulate(m, out=cur[1:])
        prev = cur
    return int(prev[-1])


def _match_matrix(a: Sequence, b: Sequence) -> np.ndarray:
    ids: dict = {}
    for w in list(a) + list(b):
        ids.setdefault(w, len(ids))
    xa = np.fromiter((ids[w] for w in a), dtype=np.int64, count=len(a))
    xb = np.fromiter((ids[w] for w in b), dtype=np.int64, count=len(b))
    return xa[:, None] == xb[None, :]


def lcs(hyp: Sequence, ref: Sequence, granularity: str = "word") -> int:
    """Length of the longest contiguous common run.

    Accepts word lists (granularity "word") or strings (granularity
    "char"); inputs are scored as given, normalization is the caller's
    responsibility.
    """
    if granularity not in ("word", "char"):
        raise ValueError(f"unknown granularity {granularity!r}")
    a = list(hyp)
    b = list(ref)
    if not a or not b:
        return 0
    eq = _match_matrix(a, b)
    best = 0
    prev = np.zeros(len(b), dtype=np.int64)
    for i in range(len(a)):
        cur = np.zeros(len(b), dtype=np.int64)
        cur[0] = 1 if eq[i, 0] else 0
        cur[1:] = np.where(eq[i, 1:], prev[:-1] + 1, 0)
        row_best = int(cur.max())
        if row_best > best:
            best = row_best
        prev = cur
    return best


def _longest_span(a: list, b: list, blocked: np.ndarray) -> tuple[int, int]:
    """Longest common run avoiding blocked hypothesis positions.

    Returns (length, hyp start); ties resolve to the earliest start.
    """
    if not a or not b:
        return 0, -1
    eq = _match_matrix(a, b)
    eq[blocked, :] = False
    best, start = 0, -1
    prev = np.zeros(len(b), dtype=np.int64)
    for i in range(len(a)):
        cur = np.zeros(len(b), dtype=np.int64)
        cur[0] = 1 if eq[i, 0] else 0
        cur[1:] = np.where(eq[i, 1:], prev[:-1] + 1, 0)
        row_best = int(cur.max())
        if row_best > best:
            best = row_best
            start = i - row_best + 1
        prev = cur
    return best, start


def acs(hyp: Sequence[str], ref: Sequence[str], min_len: int = 6) -> int:
    """Total length of greedy non-overlapping common word spans >= min_len.

    Greedy order is longest first with ties broken by earliest hypothesis
    position; spans may not overlap on the hypothesis side, the reference
    side may be reused.
    """
    a = list(hyp)
    b = list(ref)
    blocked = np.zeros(len(a), dtype=bool)
    total = 0
    while True:
        length, start = _longest_span(a, b, blocked)
        if length < min_len:
            return total
        total += length
        blocked[start:start + length] = True


def _shingle_fingerprints(words: Sequence[str], size: int) -> set[int]:
    out = set()
    for i in range(len(words) - size + 1):
        key = "\x1f".join(words[i:i + size]).encode()
        out.add(int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big"))
    return out


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return x ^ (x >> np.uint64(31))


def minhash(
    hyp: Sequence[str],
    ref: Sequence[str],
    shingle_size: int = 3,
    perms: int = 128,
    seed: int = 1234,
) -> float:
    """MinHash estimate of the Jaccard similarity of word shingles.

    Texts too short to shingle score 0 unless both are identical, which
    scores 1.
    """
    s1 = _shingle_fingerprints(hyp, shingle_size)
    s2 = _shingle_fingerprints(ref, shingle_size)
    if not s1 or not s2:
        return 1.0 if list(hyp) == list(ref) else 0.0
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 2**63 - 1, size=perms, dtype=np.uint64)
    a1 = np.fromiter(s1, dtype=np.uint64)
    a2 = np.fromiter(s2, dtype=np.uint64)
    m1 = _mix64(a1[None, :] ^ keys[:, None]).min(axis=1)
    m2 = _mix64(a2[None, :] ^ keys[:, None]).min(axis=1)
    return float((m1 == m2).mean())


def exact_jaccard(hyp: Sequence[str], ref: Sequence[str], shingle_size: int = 3) -> float:
    s1 = _shingle_fingerprints(hyp, shingle_size)
    s2 = _shingle_fingerprints(ref, shingle_size)
    if not s1 or not s2:
        return 1.0 if list(hyp) == list(ref) else 0.0
    return len(s1 & s2) / len(s1 | s2)


def ncr(m: float, m_r: float, m_s: float) -> float | None:
    """Fraction of the risky-to-safe gap closed: (m_r - m) / (m_r - m_s).

    Undefined (None) when the references coincide; values outside [0, 1]
    are legitimate (over- or under-shooting the safe reference).
    """
    if m_r == m_s:
        return None
    return (m_r - m) / (m_r - m_s)


def utility_proxy(generations: Sequence[Sequence], utility_model: NgramModel) -> float:
    """Mean negative log-likelihood per symbol under a held-out model."""
    if not generations:
        raise ValueError("no generations to score")
    total_nll = 0.0
    total_len = 0
    for gen in generations:
        if len(gen) == 0:
            continue
        total_nll -= sequence_logprob(utility_model, gen)
        total_len += len(gen)
    if total_len == 0:
        raise ValueError("generations are all empty")
    return total_nll / total_len


def score_pair(hyp_text: str, ref_text: str, config: MetricsConfig = MetricsConfig()) -> dict[str, float]:
    """All six metrics for one hypothesis/reference text pair."""
    h = normalize(hyp_text, config.truncate_words)
    r = normalize(ref_text, config.truncate_words)
    return {
        "rouge1_rate": float(rouge_f1(h, r, "one") >= config.tau),
        "rougeL_rate": float(rouge_f1(h, r, "lcs_subseq") >= config.tau),
        "word_lcs": float(lcs(h, r, "word")),
        "char_lcs": float(lcs(hyp_text.lower(), ref_text.lower(), "char")),
        "word_acs": float(acs(h, r, config.acs_min_len)),
        "minhash": minhash(h, r, config.shingle_size, config.minhash_perms, config.minhash_seed),
    }


def mean_metrics(pairs: Sequence[tuple[str, str]], config: MetricsConfig = MetricsConfig()) -> dict[str, float]:
    """Per-metric means over an evaluation set of (hypothesis, reference)."""
    if not pairs:
        raise ValueError("empty evaluation set")
    acc = {name: 0.0 for name in METRIC_NAMES}
    for hyp_text, ref_text in pairs:
        for name, val in score_pair(hyp_text, ref_text, config).items():
            acc[name] += val
    return {name: val / len(pairs) for name, val in acc.items()}


@dataclass(frozen=True)
class CopyingReport:
    """Metric means, per-metric NCR, and utility for one configuration."""

    label: str
    metrics: dict[str, float]
    ncr_per_metric: dict[str, float | None]
    ncr_mean: float | None
    utility: float | None
    high_protection: bool = False

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "metrics": self.metrics,
            "ncr_per_metric": self.ncr_per_metric,
            "ncr_mean": self.ncr_mean,
            "utility": self.utility,
            "high_protection": self.high_protection,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CopyingReport":
        return cls(
            d["label"], d["metrics"], d["ncr_per_metric"], d["ncr_mean"],
            d["utility"], d["high_protection"],
        )


def report(
    label: str,
    metrics: dict[str, float],
    risky_metrics: dict[str, float],
    safe_metrics: dict[str, float],
    utility: float | None = None,
    high_protection_threshold: float = 0.75,
) -> CopyingReport:
    """Aggregate one configuration's metrics into NCR terms.

    ncr_mean averages the per-metric NCRs that are defined; it is None
    when every metric has coinciding references.
    """
    per = {
        name: ncr(metrics[name], risky_metrics[name], safe_metrics[name])
        for name in METRIC_NAMES
    }
    defined = [v for v in per.values() if v is not None]
    mean = sum(defined) / len(defined) if defined else None
    high = mean is not None and mean >= high_protection_threshold
    return CopyingReport(label, dict(metrics), per, mean, utility, high)
