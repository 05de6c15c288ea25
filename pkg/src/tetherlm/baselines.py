"""Comparison decoders: blocklist filtering, context contrast, and two
fixed fusion rules.

All of them operate on the same model abstraction as the budgeted decoder
so a sweep can run every method over identical prompts and seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from . import fusion
from .lm import (
    DecodeParams,
    Distribution,
    NgramModel,
    Symbol,
    apply_processors,
    next_dist,
    sample,
)

_SEP = "\x1f"


@dataclass(frozen=True)
class Blocklist:
    """Every length-n window drawn from a reference corpus."""

    n: int
    grams: frozenset[tuple[Symbol, ...]]

    def save(self, path) -> None:
        lines = sorted(_SEP.join(str(s) for s in g) for g in self.grams)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path, n: int) -> "Blocklist":
        grams = set()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = tuple(line.rstrip("\n").split(_SEP))
                if parts != ("",):
                    grams.add(parts)
        return cls(n, frozenset(grams))


def build_blocklist(corpus: Sequence[Sequence[Symbol]], n: int) -> Blocklist:
    """Sliding windows of length n over each document."""
    if n < 2:
        raise ValueError("n must be >= 2")
    grams = set()
    for doc in corpus:
        seq = tuple(doc)
        for i in range(len(seq) - n + 1):
            grams.add(seq[i:i + n])
    return Blocklist(n, frozenset(grams))


@dataclass
class MemFreeResult:
    generation: list[Symbol]
    violations: int  # deadlock fallbacks where a blocked symbol was emitted


def memfree_decode(
    model: NgramModel,
    blocklist: Blocklist,
    prompt: Sequence[Symbol],
    params: DecodeParams,
    rng: np.random.Generator,
) -> MemFreeResult:
    """Sampling with blocklisted n-gram completions masked out.

    A step where every symbol would complete a blocklisted gram falls
    back to the most probable blocked symbol and counts a violation;
    resampling can livelock on toy vocabularies.
    """
    alphabet = model.alphabet
    ids = list(alphabet.encode(prompt))
    out: list[Symbol] = []
    violations = 0
    eos = alphabet.eos_index
    for _ in range(params.max_steps):
        dist = apply_processors(Distribution(model.next_log_probs(ids)), ids, params)
        context = tuple(alphabet.symbols[i] for i in ids[-(blocklist.n - 1):]) if blocklist.n > 1 else ()
        logp = dist.log_probs.copy()
        if len(context) == blocklist.n - 1:
            for j, s in enumerate(alphabet.symbols):
                if context + (s,) in blocklist.grams:
                    logp[j] = -math.inf
        sup = np.flatnonzero(np.isfinite(logp))
        if sup.size == 0:
            idx = int(np.argmax(dist.log_probs))
            violations += 1
        else:
            p = np.exp(logp[sup] - np.max(logp[sup]))
            p = p / p.sum()
            idx = int(sup[min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), sup.size - 1)])
        ids.append(idx)
        if idx == eos:
            break
        out.append(alphabet.symbols[idx])
    return MemFreeResult(out, violations)


def rcad_dist(
    model: NgramModel,
    prompt: Sequence[Symbol],
    context: Sequence[Symbol],
    alpha: float,
    history: Sequence[Symbol] = (),
) -> Distribution:
    """Contrast of with-prompt and with-context log-probabilities.

    softmax[(1 + a) * logit(. | prompt, history) - a * logit(. | context, history)]
    where the designated protected passage replaces the prompt in the
    second conditioning. alpha = 0 returns the plain distribution
    unchanged (exact algebraic identity, kept bit-identical).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    base = next_dist(model, list(prompt) + list(history))
    if alpha == 0.0:
        return base
    contrast = next_dist(model, list(context) + list(history))
    return Distribution.from_logits((1 + alpha) * base.log_probs - alpha * contrast.log_probs)


@dataclass(frozen=True)
class CpFuseState:
    """Running prefix log-probabilities for the dynamic fusion baseline."""

    logp_fused: float = 0.0
    logp_r: float = 0.0
    logp_s: float = 0.0
    grid_size: int = 10
    staged: Distribution | None = None

    def __post_init__(self):
        if self.logp_fused > 1e-12 or self.logp_r > 1e-12 or self.logp_s > 1e-12:
            raise ValueError("prefix log-probabilities must be nonpositive")


def cpfuse_step(
    p_r: Distribution, p_s: Distribution, state: CpFuseState
) -> tuple[Distribution, CpFuseState]:
    """Pick the geometric mixture minimizing the worst per-model score.

    The score against model i is KL(q || p_i) plus the accumulated prefix
    log-ratio log(fused / p_i). The grid has grid_size intervals over
    beta in [0, 1]. The chosen distribution is staged on the returned
    state; cpfuse_advance folds in the sampled symbol.
    """
    betas = np.linspace(0.0, 1.0, state.grid_size + 1)
    off_r = state.logp_fused - state.logp_r
    off_s = state.logp_fused - state.logp_s
    best_beta, best_val, best_dist = 0.0, math.inf, p_s
    for beta in betas:
        q = fusion.geometric_mix(p_s, p_r, float(beta))
        val = max(fusion.kl(q, p_r) + off_r, fusion.kl(q, p_s) + off_s)
        if val < best_val - 1e-15:
            best_beta, best_val, best_dist = float(beta), val, q
    return best_dist, replace(state, staged=best_dist)


def cpfuse_advance(
    state: CpFuseState, p_r: Distribution, p_s: Distribution, symbol_index: int
) -> CpFuseState:
    """Fold the sampled symbol into the running prefix log-probabilities."""
    if state.staged is None:
        raise ValueError("no staged distribution; call cpfuse_step first")
    return CpFuseState(
        min(state.logp_fused + float(state.staged.log_probs[symbol_index]), 0.0),
        min(state.logp_r + float(p_r.log_probs[symbol_index]), 0.0),
        min(state.logp_s + float(p_s.log_probs[symbol_index]), 0.0),
        state.grid_size,
        None,
    )


def tokenswap_dist(
    p_r: Distribution, p_s: Distribution, seed_indices: Sequence[int]
) -> Distribution:
    """Replace seed-symbol probabilities with the safe model's and renormalize.

    The source work leaves non-seed probabilities unchanged, which cannot
    hold exactly after substitution; global renormalization preserves the
    relative ratios within the non-seed set.
    """
    z = p_r.log_probs.copy()
    idx = list(seed_indices)
    if idx:
        z[idx] = p_s.log_probs[idx]
    return Distribution.from_logits(z)


def load_seed_words() -> list[str]:
    """Functional-word seed list for word-level alphabets."""
    text = resources.files("tetherlm").joinpath("data/tokenswap_seeds.txt").read_text()
    return [w for w in text.split() if w]


def seed_indices_for(alphabet, words: Sequence[str]) -> list[int]:
    present = set(words)
    return [i for i, s in enumerate(alphabet.symbols) if s in present]
