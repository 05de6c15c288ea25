"""Autoregressive toy models over finite alphabets.

The models here are additively smoothed n-gram models with backoff. A
high-order model trained on a corpus that repeats a passage many times
becomes near-deterministic on that passage, which is the asymmetry the
rest of the library exercises. Smoothing keeps every distribution fully
supported, so divergences to these models are always finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Sequence

import numpy as np

Symbol = Hashable

EOS = "<eos>"


class UnknownSymbolError(ValueError):
    """A sequence contains a symbol outside the model's alphabet."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered set of symbols plus a designated termination symbol.

    Symbols may be single characters, whitespace-delimited words, or
    integer token/byte ids; they only need to be hashable and distinct.
    """

    symbols: tuple[Symbol, ...]
    eos_index: int

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise ValueError("alphabet needs at least 2 symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")
        if not 0 <= self.eos_index < len(self.symbols):
            raise ValueError("eos_index out of range")
        object.__setattr__(
            self, "_index", {s: i for i, s in enumerate(self.symbols)}
        )

    @classmethod
    def from_symbols(cls, symbols: Iterable[Symbol], eos: Symbol = EOS) -> "Alphabet":
        """Build an alphabet, appending `eos` if it is not already present."""
        syms = list(dict.fromkeys(symbols))
        if eos not in syms:
            syms.append(eos)
        return cls(tuple(syms), syms.index(eos))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> Symbol:
        return self.symbols[self.eos_index]

    def index(self, symbol: Symbol) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownSymbolError(f"symbol {symbol!r} not in alphabet") from None

    def encode(self, seq: Sequence[Symbol]) -> tuple[int, ...]:
        return tuple(self.index(s) for s in seq)

    def decode(self, indices: Sequence[int]) -> list[Symbol]:
        return [self.symbols[i] for i in indices]


@dataclass(frozen=True, eq=False)
class Distribution:
    """A normalized, fully supported distribution stored as log-probabilities."""

    log_probs: np.ndarray

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "Distribution":
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p <= 0):
            raise ValueError("full support required: all probabilities must be > 0")
        p = p / p.sum()
        return cls(np.log(p))

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "Distribution":
        z = np.asarray(logits, dtype=np.float64)
        return cls(z - _logsumexp(z))

    @property
    def size(self) -> int:
        return self.log_probs.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def validate(self, atol: float = 1e-9) -> None:
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("log-probabilities must be finite (full support)")
        total = float(np.exp(self.log_probs).sum())
        if abs(total - 1.0) > atol:
            raise ValueError(f"probabilities sum to {total}, not 1 within {atol}")


def _logsumexp(z: np.ndarray) -> float:
    m = np.max(z)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(z - m).sum()))


@dataclass(frozen=True)
class DecodeParams:
    """Sampling knobs shared by every decoding loop."""

    temperature: float = 1.0
    repetition_penalty: float = 1.0
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition_penalty must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True, eq=False)
class NgramModel:
    """Additively smoothed n-gram model with backoff.

    `order` is the context length: probabilities condition on the last
    `order` symbols. Counts are kept for every context length from 0 to
    `order`; a context whose total count is zero backs off to the next
    shorter one. With additive constant d and vocabulary size V,

        P(s | c) = (count(c, s) + d) / (count(c, .) + d * V)

    evaluated at the longest context with nonzero total count.
    """

    order: int
    smoothing: float
    alphabet: Alphabet
    counts: tuple[dict[tuple[int, ...], np.ndarray], ...]
    _cache: dict = field(default_factory=dict, repr=False)

    def next_log_probs(self, context: Sequence[int]) -> np.ndarray:
        """Log-probability vector for the symbol after `context` (indices)."""
        ctx = tuple(context[-self.order:]) if self.order > 0 else ()
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        vec = self._backoff_counts(ctx)
        v = self.alphabet.size
        probs = (vec + self.smoothing) / (vec.sum() + self.smoothing * v)
        out = np.log(probs)
        out.setflags(write=False)
        if len(self._cache) < 500_000:
            self._cache[ctx] = out
        return out

    def _backoff_counts(self, ctx: tuple[int, ...]) -> np.ndarray:
        while True:
            table = self.counts[len(ctx)]
            vec = table.get(ctx)
            if vec is not None:
                return vec
            if not ctx:
                return np.zeros(self.alphabet.size)
            ctx = ctx[1:]


def train_ngram(
    corpus: Sequence[Sequence[Symbol]],
    order: int,
    smoothing: float,
    alphabet: Alphabet,
) -> NgramModel:
    """Count-based training over the given corpus.

    Every context length from 0 to `order` is counted so the model can
    back off. Raises UnknownSymbolError for out-of-alphabet symbols and
    ValueError for an empty corpus.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing <= 0:
        raise ValueError("smoothing must be > 0")

    v = alphabet.size
    tables: list[dict[tuple[int, ...], np.ndarray]] = [{} for _ in range(order + 1)]
    for seq in corpus:
        ids = alphabet.encode(seq)
        for i, nxt in enumerate(ids):
            for length in range(min(order, i) + 1):
                ctx = ids[i - length:i]
                vec = tables[length].get(ctx)
                if vec is None:
                    vec = np.zeros(v)
                    tables[length][ctx] = vec
                vec[nxt] += 1.0
    return NgramModel(order, float(smoothing), alphabet, tuple(tables))


def next_dist(model: NgramModel, context: Sequence[Symbol]) -> Distribution:
    """Next-symbol distribution given a context of alphabet symbols."""
    ids = model.alphabet.encode(context)
    return Distribution(model.next_log_probs(ids))


def apply_processors(
    dist: Distribution, history: Sequence[int], params: DecodeParams
) -> Distribution:
    """Repetition penalty then temperature, then renormalize.

    The penalty follows the common divide-positive/multiply-negative rule
    on logits; log-probabilities are nonpositive, so history symbols are
    scaled down. Fusion solvers must consume this output so the divergence
    constraint holds on the distribution actually sampled.
    """
    if params.repetition_penalty == 1.0 and params.temperature == 1.0:
        return dist
    z = dist.log_probs.copy()
    if params.repetition_penalty != 1.0:
        seen = set(history)
        for i in seen:
            z[i] = z[i] / params.repetition_penalty if z[i] > 0 else z[i] * params.repetition_penalty
    if params.temperature != 1.0:
        z = z / params.temperature
    return Distribution(z - _logsumexp(z))


def sample(dist: Distribution, rng: np.random.Generator) -> int:
    """Draw a symbol index; reproducible for a fixed generator state."""
    p = np.exp(dist.log_probs)
    p = p / p.sum()
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), dist.size - 1))


def sequence_logprob(
    model: NgramModel, sequence: Sequence[Symbol], prefix: Sequence[Symbol] = ()
) -> float:
    """Sum of per-step log-probabilities of `sequence` given `prefix`."""
    ids = list(model.alphabet.encode(prefix))
    total = 0.0
    for sym in sequence:
        i = model.alphabet.index(sym)
        total += float(model.next_log_probs(ids)[i])
        ids.append(i)
    return total
