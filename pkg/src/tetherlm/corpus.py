"""Corpus ingestion and synthetic corpora.

Documents come from plain UTF-8 files, one document per file or
newline-delimited. Tokenization mode is "char" (unicode characters) or
"word" (whitespace-delimited). The synthetic generator produces
pseudo-text from a fixed lexicon so that protected passages are novel
word sequences in a familiar style: a model that never saw them can
still spell, which is what makes held-out likelihood a usable utility
proxy.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lm import EOS, Alphabet

CHAR = "char"
WORD = "word"
MODES = (CHAR, WORD)


def load_documents(paths: Iterable[str | os.PathLike], newline_delimited: bool = False) -> list[str]:
    docs: list[str] = []
    for path in paths:
        text = Path(path).read_text(encoding="utf-8")
        if newline_delimited:
            docs.extend(line for line in text.splitlines() if line.strip())
        else:
            docs.append(text.strip())
    return docs


def load_byte_documents(paths: Iterable[str | os.PathLike]) -> list[bytes]:
    return [Path(p).read_bytes() for p in paths]


def tokenize(doc: str, mode: str) -> list[str]:
    if mode == CHAR:
        return list(doc)
    if mode == WORD:
        return doc.split()
    raise ValueError(f"unknown mode {mode!r}")


def build_alphabet(docs: Sequence[str], mode: str) -> Alphabet:
    symbols: dict[str, None] = {}
    for doc in docs:
        for s in tokenize(doc, mode):
            symbols.setdefault(s)
    return Alphabet.from_symbols(symbols.keys(), eos=EOS)


def corpus_sequences(docs: Sequence[str], mode: str, append_eos: bool = True) -> list[list[str]]:
    """Symbol sequences ready for training; EOS teaches termination."""
    out = []
    for doc in docs:
        seq = tokenize(doc, mode)
        if append_eos:
            seq = seq + [EOS]
        out.append(seq)
    return out


_ONSETS = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    "ch", "sh", "th", "bl", "br", "cl", "cr", "dr", "fl", "fr", "gl", "gr",
    "pl", "pr", "sk", "sl", "sm", "sn", "sp", "st", "tr", "tw",
]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ou", "ei", "oa", "ua", "io", "ee", "oo"]
_CODAS = [
    "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "x", "z",
    "ld", "mp", "nd", "nk", "nt", "rd", "rk", "rm", "rn", "rt", "sk", "sp", "st",
]


def make_lexicon(seed: int, size: int = 1400) -> list[str]:
    """Distinct pronounceable pseudo-words.

    Two or three consonant-vowel syllables plus a closing coda. Codas
    rotate round-robin so every coda family has the same share of the
    lexicon; passages later key on coda families to stay distinctive at
    word boundaries.
    """
    rng = np.random.default_rng(seed)
    words: dict[str, None] = {}
    coda_i = 0
    while len(words) < size:
        n_syll = 2 + int(rng.random() < 0.4)
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))]
            for _ in range(n_syll)
        ) + _CODAS[coda_i % len(_CODAS)]
        if word not in words:
            words.setdefault(word)
            coda_i += 1
    return list(words)


def _coda_of(word: str) -> str:
    best = ""
    for coda in _CODAS:
        if word.endswith(coda) and len(coda) > len(best):
            best = coda
    return best


def _word_weights(size: int, flat: bool = False) -> np.ndarray:
    if flat:
        # every word recurs in a moderate corpus; a held-out model trained
        # on flat text knows the whole vocabulary's spellings
        w = 1.0 / (np.arange(size) + 0.5 * size)
    else:
        w = 1.0 / (np.arange(size) + 8.0)
    return w / w.sum()


def synth_sentence(rng: np.random.Generator, lexicon: Sequence[str], weights: np.ndarray) -> str:
    n = int(rng.integers(5, 12))
    picks = rng.choice(len(lexicon), size=n, p=weights)
    return " ".join(lexicon[i] for i in picks) + "."


def synth_documents(
    seed: int,
    lexicon: Sequence[str],
    n_docs: int,
    sentences_per_doc: tuple[int, int] = (3, 7),
    flat: bool = False,
    weights: np.ndarray | None = None,
) -> list[str]:
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = _word_weights(len(lexicon), flat)
    docs = []
    for _ in range(n_docs):
        n = int(rng.integers(*sentences_per_doc))
        docs.append(" ".join(synth_sentence(rng, lexicon, weights) for _ in range(n)))
    return docs


def _char_windows(text: str, width: int) -> set[str]:
    return {text[i:i + width] for i in range(len(text) - width + 1)}


def synth_passages(
    seed: int,
    lexicon: Sequence[str],
    n_passages: int,
    min_chars: int = 400,
    avoid_texts: Sequence[str] = (),
    window: int = 5,
    max_diverging_count: int = 2,
) -> list[str]:
    """Protected-style passages: ordinary words, distinctive sequences.

    Passages are grown word by word under a continuation constraint:
    every length-`window` character context appearing in any passage must
    be followed by a single character, both across all passages and
    (up to `max_diverging_count` stray occurrences) within `avoid_texts`,
    normally the open corpus. A high-order model trained on many
    repetitions then becomes near-deterministic along each passage, while
    the vocabulary stays ordinary open-text vocabulary.
    """
    rng = np.random.default_rng(seed)
    ctx_count: dict[str, int] = {}
    cont_count: dict[str, int] = {}
    for text in avoid_texts:
        for i in range(len(text) - window):
            ctx = text[i:i + window]
            ctx_count[ctx] = ctx_count.get(ctx, 0) + 1
            cont = text[i:i + window + 1]
            cont_count[cont] = cont_count.get(cont, 0) + 1

    def diverging(ctx: str, nxt: str) -> int:
        return ctx_count.get(ctx, 0) - cont_count.get(ctx + nxt, 0)

    max_cont: dict[str, int] = {}  # heaviest single continuation of a context
    for key, n in cont_count.items():
        ctx = key[:window]
        if n > max_cont.get(ctx, 0):
            max_cont[ctx] = n

    continuation: dict[str, str] = {}  # context -> the single char that may follow
    order = rng.permutation(len(lexicon))
    chunk = len(lexicon) // n_passages
    if chunk < 8:
        raise ValueError("lexicon too small for that many passages")
    passages = []
    for p_i in range(n_passages):
        # disjoint vocabulary slices: passages never share a word
        slice_words = [lexicon[j] for j in order[p_i * chunk:(p_i + 1) * chunk]]
        text = None
        for attempt in range(40):
            # escalate tolerance for stubborn slices; a handful of busier
            # windows weakens memorization only locally
            relax = max_diverging_count * (1 + attempt // 8)
            text, own = _grow_passage(
                rng, slice_words, min_chars, window, relax,
                continuation, diverging, ctx_count, max_cont,
            )
            if text is not None:
                continuation.update(own)
                break
        if text is None:
            raise ValueError(
                "could not grow a distinctive passage; enlarge the lexicon "
                "or relax max_diverging_count"
            )
        passages.append(text if text.endswith(".") else text + ".")
    return passages


def _is_tail_side(ctx: str) -> bool:
    # only the pure ending window (separator in last position) is exempt
    # from global claims; it is instead barred from reuse outright
    return ctx[-1] in (" ", ".")


def _grow_passage(rng, slice_words, min_chars, window, max_div,
                  continuation, diverging, ctx_count, max_cont,
                  step_budget: int = 6000):
    """One growth attempt, depth-first with backtracking.

    Global claims can demand specific word prefixes after a given tail,
    so a greedy grower deadlocks; bounded DFS backs out of such corners.
    Claims stay local until the caller commits them, so a failed attempt
    leaves no trace. Returns (text, claims) or (None, None).
    """
    words = [slice_words[j] for j in rng.permutation(len(slice_words))]
    used = [False] * len(words)
    own: dict[str, str] = {}
    text = ""
    periods = list(rng.integers(4, 9, size=64))  # sentence lengths, advisory
    sentence_left = int(periods[0])

    def claimed(ctx):
        # windows are claimed across passages unless their separator sits
        # in the tail half: claiming tail-side windows couples a word
        # ending to the next word's initial and deadlocks later passages,
        # while the occasional tail-side coincidence costs only one
        # ambiguous character. Head-side windows are per-word properties
        # that later passages can honor by word choice.
        if _is_tail_side(ctx):
            return own.get(ctx)
        return continuation.get(ctx) or own.get(ctx)

    def admissible(piece: str) -> bool:
        word = piece.strip(" .")
        ending = word[-(window - 1):] + " "
        if ending in continuation or ending in own:
            return False  # word endings are never reused across passages
        seg = text[-window:] + piece
        for i in range(len(seg) - window):
            ctx, nxt = seg[i:i + window], seg[i + window]
            if (claimed(ctx) or nxt) != nxt:
                return False
            if diverging(ctx, nxt) > max_div:
                return False
        # exit viability: the next piece starts with a space, then some
        # word initial; refuse tails that forbid both.
        new_text = text + piece
        tail = new_text[-window:]
        if (claimed(tail) or " ") != " " or diverging(tail, " ") > max_div:
            return False
        ctx2 = new_text[-(window - 1):] + " "
        if (claimed(ctx2) or "a") in (" ", "."):
            return False
        if ctx_count.get(ctx2, 0) - max_cont.get(ctx2, 0) > max_div:
            return False
        return True

    def candidates():
        # (word index, with period) pairs in preference order; words whose
        # ending window no other passage has bound yet come first, keeping
        # tail-side coincidences (which cannot be claimed) rare
        want_period = sentence_left <= 1
        deferred = []
        for pos in range(len(words)):
            if used[pos]:
                continue
            exit_ctx = (words[pos])[-(window - 1):] + " "
            clean = continuation.get(exit_ctx) is None
            target = None if clean else deferred
            if target is None:
                if want_period:
                    yield pos, True
                yield pos, False
            else:
                if want_period:
                    target.append((pos, True))
                target.append((pos, False))
        yield from deferred

    # stack of (piece, word pos, claim undo list, resume iterator state)
    stack: list[tuple[str, int, list, int, bool, int]] = []
    resume: tuple[int, bool] | None = None
    steps = 0
    while len(text) < min_chars:
        steps += 1
        if steps > step_budget:
            return None, None
        choice = None
        for pos, with_period in candidates():
            if resume is not None:
                if (pos, with_period) == resume[:2]:
                    resume = None  # skip past the choice being retried
                continue
            piece = (" " if text else "") + words[pos] + ("." if with_period else "")
            if admissible(piece):
                choice = (pos, with_period, piece)
                break
        if choice is None:
            if not stack:
                return None, None
            piece, pos, undo, sentence_left, with_period, _ = stack.pop()
            text = text[:-len(piece)]
            used[pos] = False
            for ctx, old in undo:
                if old is None:
                    own.pop(ctx, None)
                else:
                    own[ctx] = old
            resume = (pos, with_period)
            continue
        pos, with_period, piece = choice
        undo = []
        new_text = text + piece
        seg = new_text[-(window + len(piece)):]
        for i in range(len(seg) - window):
            ctx = seg[i:i + window]
            undo.append((ctx, own.get(ctx)))
            own[ctx] = seg[i + window]
        stack.append((piece, pos, undo, sentence_left, with_period, 0))
        text = new_text
        used[pos] = True
        resume = None
        if with_period:
            sentence_left = int(periods[len(stack) % len(periods)])
        elif sentence_left > 1:
            sentence_left -= 1
    return text, own


def write_documents(docs: Sequence[str], path: str | os.PathLike) -> None:
    """One document per line, the newline-delimited ingestion format."""
    Path(path).write_text("\n".join(docs) + "\n", encoding="utf-8")


def synth_corpora(
    seed: int,
    lexicon_size: int = 5000,
    head: int = 300,
    n_open_docs: int = 24,
    n_heldout_docs: int = 200,
    n_heldout_open_docs: int = 24,
    n_passages: int = 20,
    passage_chars: int = 420,
    tail_boost: float = 3.0,
) -> dict[str, list[str]]:
    """The standard corpus setup for memorization experiments.

    Open documents use the frequent head of the lexicon. Protected
    passages draw disjoint slices of the tail, so the open corpus never
    contains their words. The held-out corpus samples every word, with
    tail words upweighted, so a utility model trained on it rates
    passage-style vocabulary as fluent without ever seeing a protected
    sequence. heldout_open is a fresh open-style document set, the
    in-distribution control domain for prompts and diagnostics.
    """
    lex = make_lexicon(seed, lexicon_size)
    open_docs = synth_documents(seed + 1, lex[:head], n_open_docs, (8, 14))
    w = np.ones(len(lex))
    w[head:] = tail_boost
    heldout = synth_documents(seed + 2, lex, n_heldout_docs, (8, 14), weights=w / w.sum())
    heldout_open = synth_documents(seed + 4, lex[:head], n_heldout_open_docs, (8, 14))
    passages = synth_passages(
        seed + 3, lex[head:], n_passages, passage_chars, avoid_texts=open_docs
    )
    return {
        "open": open_docs,
        "heldout": heldout,
        "heldout_open": heldout_open,
        "passages": passages,
    }
