"""Prefix debt and per-step allowance accounting.

The debt is a one-time reduction of the global budget computed from the
largest positive prompt log-likelihood ratios between the risky and safe
models; it acts as a memorization prior, forcing early steps toward the
safe model on prompts the risky model appears to have memorized. Banking
then rolls unspent per-step allowance forward while keeping the running
total under the global bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import AbstractSet, Sequence

import numpy as np

from .lm import NgramModel, Symbol

ADAPTIVE = "adaptive"
FIXED = "fixed"
GLOBAL = "global"
SCHEDULES = (ADAPTIVE, FIXED, GLOBAL)


class BudgetViolationError(RuntimeError):
    """A step spent more than its allowance; signals a solver bug."""


@dataclass(frozen=True)
class PrefixDebtReport:
    """Per-position LLRs and the resulting debt for one prompt.

    llrs[i] is the LLR at prompt position i + 1 (position 0 has no
    context); NaN marks positions excluded as special symbols.
    top_indices are absolute prompt positions of the selected window,
    ties broken by ascending position for reproducibility.
    """

    llrs: np.ndarray
    top_indices: tuple[int, ...]
    delta_init: float
    window_n: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "llrs": [None if math.isnan(x) else x for x in self.llrs.tolist()],
                "top_indices": list(self.top_indices),
                "delta_init": self.delta_init,
                "window_n": self.window_n,
            }
        )


def debt_from_llrs(
    llrs: np.ndarray, n: int, positions: Sequence[int] | None = None
) -> tuple[float, tuple[int, ...]]:
    """Mean of the top-n clamped-positive LLRs; ties at earlier positions win.

    With fewer than n valid positions, all are used. n = 0 or no valid
    positions gives zero debt.
    """
    valid = np.flatnonzero(~np.isnan(llrs))
    if n <= 0 or valid.size == 0:
        return 0.0, ()
    clamped = np.maximum(llrs[valid], 0.0)
    m = min(n, valid.size)
    order = np.argsort(-clamped, kind="stable")[:m]
    chosen = valid[np.sort(order)]
    delta = float(np.maximum(llrs[chosen], 0.0).mean())
    if positions is None:
        positions = range(1, llrs.shape[0] + 1)
    pos = tuple(int(positions[i]) for i in chosen)
    return delta, pos


def average_debt(llrs: np.ndarray) -> float:
    """Mean of clamped-positive LLRs over all valid positions (AvgDebt)."""
    valid = llrs[~np.isnan(llrs)]
    if valid.size == 0:
        return 0.0
    return float(np.maximum(valid, 0.0).mean())


def prompt_llrs(
    p_r_model: NgramModel,
    p_s_model: NgramModel,
    prompt: Sequence[Symbol],
    specials: AbstractSet[Symbol] = frozenset(),
) -> np.ndarray:
    """Pointwise log p_r(x_i|x_<i) - log p_s(x_i|x_<i) for i = 1..L-1.

    Special symbols are masked with NaN rather than dropped so positions
    stay aligned with the prompt.
    """
    alphabet = p_r_model.alphabet
    ids = alphabet.encode(prompt)
    out = np.full(max(len(ids) - 1, 0), np.nan)
    for i in range(1, len(ids)):
        if prompt[i] in specials:
            continue
        ctx = ids[:i]
        lr = float(p_r_model.next_log_probs(ctx)[ids[i]])
        ls = float(p_s_model.next_log_probs(ctx)[ids[i]])
        out[i - 1] = lr - ls
    return out


def prefix_debt(
    p_r_model: NgramModel,
    p_s_model: NgramModel,
    prompt: Sequence[Symbol],
    n: int,
    specials: AbstractSet[Symbol] = frozenset(),
) -> PrefixDebtReport:
    """Debt for a prompt: mean of its top-n positive LLRs."""
    if len(prompt) < 1:
        raise ValueError("prompt must have length >= 1")
    llrs = prompt_llrs(p_r_model, p_s_model, prompt, specials)
    delta, top = debt_from_llrs(llrs, n)
    return PrefixDebtReport(llrs, top, delta, n)


@dataclass(frozen=True)
class BudgetState:
    """Cumulative spend accounting for one decode.

    A starts at delta_init, so the adaptive allowance
    max(0, (t+1)k - A) already nets out the debt.
    """

    k: float
    K: float
    delta_init: float
    A: float
    t: int
    schedule: str = ADAPTIVE

    @classmethod
    def fresh(
        cls, k: float, t_max: int, delta_init: float = 0.0, schedule: str = ADAPTIVE
    ) -> "BudgetState":
        if schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {schedule!r}")
        if k < 0 or t_max < 1 or delta_init < 0:
            raise ValueError("k >= 0, t_max >= 1, delta_init >= 0 required")
        return cls(float(k), float(k) * t_max, float(delta_init), float(delta_init), 0, schedule)


def accrue(state: BudgetState) -> float:
    """Allowance k_t for the current step.

    adaptive: max(0, (t+1)k - A), banking unspent allowance forward.
    fixed:    k, no rollover.
    global:   unbounded until cumulative spend reaches K, then 0.
    """
    if state.schedule == ADAPTIVE:
        return max(0.0, (state.t + 1) * state.k - state.A)
    if state.schedule == FIXED:
        return state.k
    if state.schedule == GLOBAL:
        return math.inf if state.A < state.K + state.delta_init else 0.0
    raise ValueError(f"unknown schedule {state.schedule!r}")


def bank(state: BudgetState, spent: float) -> BudgetState:
    """Record realized spend and advance the step counter.

    Spending beyond the current allowance (past float slack) is a
    contract violation by the caller's solver, not a recoverable state.
    """
    if spent < -1e-12:
        raise BudgetViolationError(f"negative spend {spent}")
    allowance = accrue(state)
    if spent > allowance + 1e-8:
        raise BudgetViolationError(
            f"spent {spent} exceeds allowance {allowance} at step {state.t}"
        )
    return replace(state, A=state.A + max(spent, 0.0), t=state.t + 1)
