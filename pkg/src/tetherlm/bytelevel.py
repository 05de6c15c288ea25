"""Exact token-to-byte marginalization and byte-level budgeted decoding.

A token model plus a BPE tokenizer induce a next-byte distribution: the
probability of byte b after byte prefix is the normalized mass of token
paths, consistent with the prefix, whose decoded bytes continue with b.
Only paths that can still extend to the canonical encoding of some
completion are counted.

Validity is decided locally: a token path v is extendable if and only if
v equals the canonical encoding of its own bytes. Reasoning: if v is a
token prefix of canon(d + suffix), the final tokenization has a boundary
at |d|, so no merge ever straddled that point; left-to-right matching
within each rule then processes the d region exactly as it would stand
alone, hence the prefix tokens equal canon(d). The converse completion
is d itself. A consequence used throughout: the frontier holds at most
one boundary-aligned path, the canonical encoding of the consumed bytes,
and only that path can emit EOS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import budget as budget_mod
from . import fusion
from .bpe import IncrementalEncoder, Tokenizer
from .budget import BudgetState, average_debt, debt_from_llrs
from .decode import (
    COLD_START,
    DEBT_AVERAGE,
    DEBT_NONE,
    KL,
    PROJECT,
    AnchorConfig,
    DecodeTrace,
    StepRecord,
)
from .lm import Alphabet, Distribution, NgramModel

EOS_OUTCOME = 256
N_OUTCOMES = 257


class UnreachablePrefixError(ValueError):
    """No canonical-consistent token path covers the byte prefix."""


class ZeroProbabilityByteError(ValueError):
    """Attempted to advance with a byte the byte process cannot emit."""


class InstanceTooLargeError(ValueError):
    """The brute-force oracle refused an instance beyond its size guard."""


def token_alphabet(tokenizer: Tokenizer, token_ids=None) -> Alphabet:
    """Alphabet over token ids (symbol == index only for the full vocab).

    Passing a subset of ids builds the tiny universes the oracle needs;
    the EOS id is always included.
    """
    if token_ids is None:
        ids = list(range(tokenizer.vocab_size))
    else:
        ids = sorted(set(int(t) for t in token_ids) | {tokenizer.eos_id})
    return Alphabet(tuple(ids), ids.index(tokenizer.eos_id))


@dataclass(frozen=True, eq=False)
class ByteDistribution:
    """Distribution over 256 byte values plus EOS; entries may be -inf."""

    log_probs: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.isfinite(self.log_probs)

    def validate(self, atol: float = 1e-9) -> None:
        if self.log_probs.shape != (N_OUTCOMES,):
            raise ValueError("byte distribution must have 257 outcomes")
        total = float(np.exp(self.log_probs[self.support]).sum())
        if abs(total - 1.0) > atol:
            raise ValueError(f"supported mass sums to {total}")


@dataclass(frozen=True, eq=False)
class FrontierEntry:
    tokens: tuple[int, ...]
    pending: bytes
    logp: float
    encoder: IncrementalEncoder  # staged state for decode(tokens)


@dataclass(frozen=True, eq=False)
class ByteState:
    """Committed byte prefix plus every canonical-consistent token path."""

    committed: bytes
    entries: tuple[FrontierEntry, ...]


def byte_state_init(tokenizer: Tokenizer) -> ByteState:
    root = FrontierEntry((), b"", 0.0, IncrementalEncoder(tokenizer))
    return ByteState(b"", (root,))


def _aligned_entry(state: ByteState) -> FrontierEntry | None:
    aligned = [e for e in state.entries if not e.pending]
    if len(aligned) > 1:
        raise RuntimeError("multiple boundary-aligned paths; canonicality broken")
    return aligned[0] if aligned else None


def _expansions(model: NgramModel, tokenizer: Tokenizer, entry: FrontierEntry):
    """Valid one-token extensions of a boundary-aligned entry.

    Yields (token id, model log-prob, token bytes). A child is kept iff
    appending its bytes leaves the committed tokens untouched and emits
    exactly that token, i.e. the child is canonical for its own bytes.
    """
    ctx = entry.encoder.tokens
    lp = model.next_log_probs(model.alphabet.encode(ctx))
    for pos, tok_id in enumerate(model.alphabet.symbols):
        if tok_id == tokenizer.eos_id:
            continue
        data = tokenizer.token_bytes[tok_id]
        retracted, new = entry.encoder.peek(data)
        if retracted == 0 and new == [tok_id]:
            yield tok_id, float(lp[pos]), data


def next_byte_dist(
    model: NgramModel, tokenizer: Tokenizer, state: ByteState
) -> ByteDistribution:
    """Normalized next-byte distribution induced by the token model."""
    if not state.entries:
        raise UnreachablePrefixError(f"no valid tokenization covers {state.committed!r}")
    buckets: list[list[float]] = [[] for _ in range(N_OUTCOMES)]
    for entry in state.entries:
        if entry.pending:
            buckets[entry.pending[0]].append(entry.logp)
    aligned = _aligned_entry(state)
    if aligned is not None:
        ctx = model.alphabet.encode(aligned.encoder.tokens)
        eos_lp = float(model.next_log_probs(ctx)[model.alphabet.eos_index])
        buckets[EOS_OUTCOME].append(aligned.logp + eos_lp)
        for _, tok_lp, data in _expansions(model, tokenizer, aligned):
            buckets[data[0]].append(aligned.logp + tok_lp)
    out = np.full(N_OUTCOMES, -np.inf)
    for i, vals in enumerate(buckets):
        if vals:
            out[i] = _logsumexp_list(vals)
    total = _logsumexp_list([v for v in out if np.isfinite(v)])
    if not np.isfinite(total):
        raise UnreachablePrefixError("frontier carries no probability mass")
    return ByteDistribution(out - total)


def _logsumexp_list(vals) -> float:
    if len(vals) == 0:
        return -math.inf
    if len(vals) == 1:
        return float(vals[0])  # single term stays bit-exact
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


def advance(
    model: NgramModel, tokenizer: Tokenizer, state: ByteState, byte: int
) -> ByteState:
    """Filter and extend the frontier after observing one byte."""
    if not 0 <= byte < 256:
        raise ValueError("byte must be in 0..255")
    new_entries: list[FrontierEntry] = []
    for entry in state.entries:
        if entry.pending and entry.pending[0] == byte:
            new_entries.append(replace(entry, pending=entry.pending[1:]))
    aligned = _aligned_entry(state)
    if aligned is not None:
        for tok_id, tok_lp, data in _expansions(model, tokenizer, aligned):
            if data[0] != byte:
                continue
            enc = aligned.encoder.copy()
            enc.append(data)
            new_entries.append(
                FrontierEntry(aligned.tokens + (tok_id,), data[1:], aligned.logp + tok_lp, enc)
            )
    if not new_entries:
        raise ZeroProbabilityByteError(f"byte {byte} has zero probability here")
    new_entries.sort(key=lambda e: e.tokens)
    return ByteState(state.committed + bytes([byte]), tuple(new_entries))


def enumerate_byte_oracle(
    model: NgramModel,
    tokenizer: Tokenizer,
    byte_prefix: bytes,
    max_tokens: int,
) -> ByteDistribution:
    """Brute-force next-byte distribution for tiny instances.

    Enumerates every token path of at most max_tokens tokens, keeps the
    canonical-consistent ones (path == plain encode of its own bytes)
    that minimally cover one byte past the prefix, and tallies mass.
    Test apparatus only; refuses instances beyond its size guard.
    """
    if model.alphabet.size > 20 or max_tokens > 6:
        raise InstanceTooLargeError("oracle limited to <= 20 tokens and max_tokens <= 6")
    if max_tokens < len(byte_prefix) + 1:
        raise InstanceTooLargeError("max_tokens too small to cover the prefix")
    masses: list[list[float]] = [[] for _ in range(N_OUTCOMES)]
    eos_id = tokenizer.eos_id
    ids = [t for t in model.alphabet.symbols if t != eos_id]

    def rec(path: tuple[int, ...], data: bytes, logp: float) -> None:
        plen = min(len(data), len(byte_prefix))
        if data[:plen] != byte_prefix[:plen]:
            return
        if len(data) > len(byte_prefix):
            if tokenizer.encode(data) == list(path):
                last = len(data) - len(tokenizer.token_bytes[path[-1]])
                if last <= len(byte_prefix):
                    masses[data[len(byte_prefix)]].append(logp)
            return  # one byte past the prefix settles this path's outcome
        if data == byte_prefix and tokenizer.encode(data) == list(path):
            ctx = model.alphabet.encode(path)
            eos_lp = float(model.next_log_probs(ctx)[model.alphabet.eos_index])
            masses[EOS_OUTCOME].append(logp + eos_lp)
        if len(path) == max_tokens:
            return
        ctx = model.alphabet.encode(path)
        lp = model.next_log_probs(ctx)
        for tok in ids:
            pos = model.alphabet.index(tok)
            rec(path + (tok,), data + tokenizer.token_bytes[tok], logp + float(lp[pos]))

    rec((), b"", 0.0)
    out = np.full(N_OUTCOMES, -np.inf)
    for i, vals in enumerate(masses):
        if vals:
            out[i] = _logsumexp_list(vals)
    total = _logsumexp_list([v for v in out if np.isfinite(v)])
    if not np.isfinite(total):
        raise UnreachablePrefixError("prefix unreachable under canonical tokenization")
    return ByteDistribution(out - total)


def terminal_logprob(
    model: NgramModel, tokenizer: Tokenizer, state: ByteState
) -> float:
    """Raw log-mass of ending exactly at the committed bytes.

    Equals the token-model log-probability of the canonical encoding of
    the committed bytes followed by EOS; -inf if unreachable.
    """
    aligned = _aligned_entry(state)
    if aligned is None:
        return -math.inf
    ctx = model.alphabet.encode(aligned.encoder.tokens)
    return aligned.logp + float(model.next_log_probs(ctx)[model.alphabet.eos_index])


def apply_byte_processors(dist: ByteDistribution, history: bytes, params) -> ByteDistribution:
    """Repetition penalty and temperature over the supported outcomes."""
    if params.repetition_penalty == 1.0 and params.temperature == 1.0:
        return dist
    z = dist.log_probs.copy()
    sup = dist.support
    if params.repetition_penalty != 1.0:
        for b in set(history):
            if sup[b]:
                z[b] = z[b] / params.repetition_penalty if z[b] > 0 else z[b] * params.repetition_penalty
    if params.temperature != 1.0:
        z[sup] = z[sup] / params.temperature
    m = np.max(z[sup])
    z[sup] -= m + math.log(np.exp(z[sup] - m).sum())
    return ByteDistribution(z)


def project_restricted(
    d_r: ByteDistribution, d_s: ByteDistribution, k_t: float, divergence: str = KL
) -> tuple[ByteDistribution, float, float]:
    """Budgeted projection over the common support of two byte distributions.

    The optimization runs over outcomes where both processes have mass;
    outcomes where only the safe process has mass cost a fixed divergence
    floor of -log(safe mass on the common support). If the floor exceeds
    the allowance, the safe distribution itself is returned at zero spend.
    Returns (distribution, control scalar, spend measured against the
    unrestricted safe distribution).
    """
    common = d_r.support & d_s.support
    if not np.any(common):
        raise ValueError("distributions share no support")
    ls = d_s.log_probs[common]
    lr = d_r.log_probs[common]
    m = np.max(ls)
    log_safe_mass = m + math.log(np.exp(ls - m).sum())  # <= 0
    floor = -log_safe_mass
    if k_t - floor <= 0.0:
        return d_s, 0.0, 0.0
    mr = np.max(lr)
    p_r = Distribution(lr - (mr + math.log(np.exp(lr - mr).sum())))
    p_s = Distribution(ls - log_safe_mass)
    k_eff = k_t - floor
    if divergence == KL:
        res = fusion.project_kl(p_r, p_s, min(k_eff, 1e9))
        sub, control, spent_local = res.dist, res.beta, res.spent
    else:
        clip = fusion.clip_renyi(p_r, p_s, min(k_eff, 1e9))
        sub, control = clip.dist, clip.c
        spent_local = fusion.renyi_inf(sub, p_s)
    out = np.full(N_OUTCOMES, -np.inf)
    out[common] = sub.log_probs
    return ByteDistribution(out), float(control), float(spent_local + floor)


def byte_prompt_llrs(
    p_r_model: NgramModel,
    tokenizer_r: Tokenizer,
    p_s_model: NgramModel,
    tokenizer_s: Tokenizer,
    prompt: bytes,
) -> tuple[ByteState, ByteState, np.ndarray]:
    """Advance both byte processes through the prompt, collecting LLRs.

    Positions start at 1, mirroring token-level debt; byte streams have
    no special symbols to exclude.
    """
    s_r = byte_state_init(tokenizer_r)
    s_s = byte_state_init(tokenizer_s)
    llrs = np.full(max(len(prompt) - 1, 0), np.nan)
    for i, b in enumerate(prompt):
        if i >= 1:
            d_r = next_byte_dist(p_r_model, tokenizer_r, s_r)
            d_s = next_byte_dist(p_s_model, tokenizer_s, s_s)
            llrs[i - 1] = float(d_r.log_probs[b] - d_s.log_probs[b])
        s_r = advance(p_r_model, tokenizer_r, s_r, b)
        s_s = advance(p_s_model, tokenizer_s, s_s, b)
    return s_r, s_s, llrs


def byte_anchored_decode(
    p_r_model: NgramModel,
    tokenizer_r: Tokenizer,
    p_s_model: NgramModel,
    tokenizer_s: Tokenizer,
    prompt: bytes,
    config: AnchorConfig,
    rng: np.random.Generator,
) -> tuple[bytes, DecodeTrace]:
    """Budgeted decoding over induced byte distributions.

    The tokenizers may differ; that is the point. config.t_max is the
    byte horizon, and the prefix debt is scaled into token-equivalent
    units by config.byte_debt_scale before offsetting the budget.
    """
    if config.opt_mode == COLD_START:
        raise ValueError("cold_start is a token-level ablation")
    s_r, s_s, llrs = byte_prompt_llrs(p_r_model, tokenizer_r, p_s_model, tokenizer_s, prompt)

    if config.debt_mode == DEBT_NONE:
        delta_raw = 0.0
    elif config.debt_mode == DEBT_AVERAGE:
        delta_raw = average_debt(llrs)
    else:
        delta_raw, _ = debt_from_llrs(llrs, config.debt_window)
    delta = config.byte_debt_scale * delta_raw
    if config.schedule != budget_mod.ADAPTIVE:
        delta = 0.0

    state = BudgetState.fresh(config.k, config.t_max, delta, config.schedule)
    params = config.decode_params
    history = bytearray(prompt)
    steps: list[StepRecord] = []
    out = bytearray()
    terminated = "horizon"
    global_switched = False

    for t in range(config.t_max):
        d_r = apply_byte_processors(next_byte_dist(p_r_model, tokenizer_r, s_r), bytes(history), params)
        d_s = apply_byte_processors(next_byte_dist(p_s_model, tokenizer_s, s_s), bytes(history), params)
        common = d_r.support & d_s.support
        kl_rs = _restricted_kl(d_r, d_s, common)
        k_t = budget_mod.accrue(state)

        if state.schedule == budget_mod.GLOBAL:
            headroom = state.K + state.delta_init - state.A
            if global_switched or kl_rs > headroom:
                global_switched = True
                dist, control, spent = d_s, 0.0, 0.0
            else:
                dist, control, spent = d_r, 1.0, kl_rs
        elif config.opt_mode == PROJECT:
            dist, control, spent = project_restricted(d_r, d_s, k_t, config.divergence)
        else:  # no_opt
            if kl_rs <= k_t:
                dist, control, spent = d_r, 1.0, kl_rs
            else:
                dist, control, spent = d_s, 0.0, 0.0
        state = budget_mod.bank(state, spent)

        idx = _sample_byte(dist, rng)
        steps.append(StepRecord(t, k_t, float(control), float(spent), float(kl_rs), int(idx)))
        if idx == EOS_OUTCOME:
            terminated = "eos"
            break
        s_r = advance(p_r_model, tokenizer_r, s_r, idx)
        s_s = advance(p_s_model, tokenizer_s, s_s, idx)
        history.append(idx)
        out.append(idx)

    total = float(sum(s.spent for s in steps))
    trace = DecodeTrace(tuple(steps), delta, total, terminated, None)
    return bytes(out), trace


def _restricted_kl(d_r: ByteDistribution, d_s: ByteDistribution, common: np.ndarray) -> float:
    """KL of the risky byte distribution from the safe one, as the spend
    that selecting it outright would realize (support-aware diagnostic)."""
    lr = d_r.log_probs
    r_mass_common = float(np.exp(lr[common]).sum())
    if r_mass_common <= 0.0:
        return math.inf
    if np.any(d_r.support & ~common):
        # risky mass outside safe support makes the divergence infinite
        return math.inf
    val = float(np.sum(np.exp(lr[common]) * (lr[common] - d_s.log_probs[common])))
    return max(val, 0.0)


def _sample_byte(dist: ByteDistribution, rng: np.random.Generator) -> int:
    sup = np.flatnonzero(dist.support)
    p = np.exp(dist.log_probs[sup])
    p = p / p.sum()
    u = rng.random()
    return int(sup[min(np.searchsorted(np.cumsum(p), u, side="right"), sup.size - 1)])
