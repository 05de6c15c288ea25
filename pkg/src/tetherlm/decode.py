"""Budgeted two-model decoding loops.

Each step computes both next-symbol distributions, warps them with the
logit processors, accrues an allowance, projects the risky distribution
toward the safe one under that allowance, samples, and banks the realized
spend. Spend is always measured between the warped distributions, because
those are what the sampler actually draws from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import budget as budget_mod
from . import fusion
from .budget import ADAPTIVE, BudgetState, PrefixDebtReport, average_debt, prefix_debt
from .lm import DecodeParams, Distribution, NgramModel, Symbol, apply_processors, sample

KL = "kl"
RENYI = "renyi_inf"

PROJECT = "project"
NO_OPT = "no_opt"
COLD_START = "cold_start"

DEBT_TOP_N = "top_n"
DEBT_AVERAGE = "average"
DEBT_NONE = "none"


@dataclass(frozen=True)
class AnchorConfig:
    """Everything a decode needs besides the models and the prompt.

    k is the nominal per-step allotment; the global budget is K = k * t_max.
    The ablation axes (schedule, debt_mode, opt_mode, divergence) default
    to the full method.
    """

    k: float
    t_max: int
    debt_window: int = 5
    divergence: str = KL
    schedule: str = ADAPTIVE
    debt_mode: str = DEBT_TOP_N
    opt_mode: str = PROJECT
    decode_params: DecodeParams = field(default_factory=DecodeParams)
    byte_debt_scale: float = 4.0  # byte-level debt to token-equivalent units

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.divergence not in (KL, RENYI):
            raise ValueError(f"unknown divergence {self.divergence!r}")
        if self.schedule not in budget_mod.SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.debt_mode not in (DEBT_TOP_N, DEBT_AVERAGE, DEBT_NONE):
            raise ValueError(f"unknown debt_mode {self.debt_mode!r}")
        if self.opt_mode not in (PROJECT, NO_OPT, COLD_START):
            raise ValueError(f"unknown opt_mode {self.opt_mode!r}")
        if self.divergence == RENYI and self.opt_mode != PROJECT:
            raise ValueError("renyi divergence only combines with opt_mode='project'")

    @property
    def K(self) -> float:
        return self.k * self.t_max


@dataclass(frozen=True)
class StepRecord:
    t: int
    k_t: float
    beta: float  # mixing weight for KL mode, clip scale c for renyi mode
    spent: float
    kl_rs: float
    symbol: Symbol

    def to_json(self) -> str:
        sym = self.symbol if isinstance(self.symbol, (str, int)) else str(self.symbol)
        return json.dumps(
            {
                "t": self.t,
                "k_t": self.k_t,
                "beta": self.beta,
                "spent": self.spent,
                "kl_rs": self.kl_rs,
                "symbol": sym,
            }
        )


@dataclass(frozen=True)
class DecodeTrace:
    """Full per-step record of one decode.

    delta_init is the debt actually charged against the budget (zero for
    schedules that do not net debt out of the allowance). The raw debt
    report is kept for diagnostics regardless.
    """

    steps: tuple[StepRecord, ...]
    delta_init: float
    total_spent: float
    terminated_by: str  # "eos" | "horizon"
    debt_report: PrefixDebtReport | None = None

    def to_jsonl(self) -> str:
        return "\n".join(s.to_json() for s in self.steps) + ("\n" if self.steps else "")


def ablation_step(
    mode: str,
    p_r: Distribution,
    p_s: Distribution,
    k_t: float,
    state: BudgetState,
) -> Distribution:
    """Optimizer ablations: hard switching instead of projection.

    no_opt samples p_r whenever KL(p_r || p_s) fits the allowance, else
    p_s. cold_start samples p_s for the first ceil(10k) steps and p_r
    afterwards, with no budget enforcement.
    """
    if mode == NO_OPT:
        return p_r if fusion.kl(p_r, p_s) <= k_t else p_s
    if mode == COLD_START:
        return p_s if state.t < math.ceil(state.k * 10) else p_r
    raise ValueError(f"ablation_step does not handle mode {mode!r}")


def _charged_debt(config: AnchorConfig, report: PrefixDebtReport | None) -> float:
    """Debt charged against the allowance; only adaptive banking nets it out."""
    if report is None or config.schedule != ADAPTIVE:
        return 0.0
    if config.debt_mode == DEBT_AVERAGE:
        return average_debt(report.llrs)
    return report.delta_init


def _decode_loop(
    p_r_model: NgramModel,
    p_s_model: NgramModel,
    prompt: Sequence[Symbol],
    config: AnchorConfig,
    rng: np.random.Generator,
) -> tuple[list[Symbol], DecodeTrace]:
    alphabet = p_r_model.alphabet
    if p_s_model.alphabet.symbols != alphabet.symbols:
        raise fusion.AlphabetMismatchError("models must share an alphabet")

    report = None
    if config.debt_mode != DEBT_NONE and len(prompt) >= 1:
        report = prefix_debt(
            p_r_model, p_s_model, prompt, config.debt_window, specials={alphabet.eos}
        )
    delta = _charged_debt(config, report)

    state = BudgetState.fresh(config.k, config.t_max, delta, config.schedule)
    params = config.decode_params
    ids = list(alphabet.encode(prompt))
    eos = alphabet.eos_index

    steps: list[StepRecord] = []
    generated: list[Symbol] = []
    terminated = "horizon"
    global_switched = False

    for t in range(config.t_max):
        pr = apply_processors(Distribution(p_r_model.next_log_probs(ids)), ids, params)
        ps = apply_processors(Distribution(p_s_model.next_log_probs(ids)), ids, params)
        kl_rs = fusion.kl(pr, ps)
        k_t = budget_mod.accrue(state)

        if state.schedule == budget_mod.GLOBAL:
            # Switch to the safe model before the step that would cross K,
            # and stay there; the cumulative bound is never exceeded.
            headroom = state.K + state.delta_init - state.A
            if global_switched or kl_rs > headroom:
                global_switched = True
                dist, control, spent = ps, 0.0, 0.0
            else:
                dist, control, spent = pr, 1.0, kl_rs
        elif config.opt_mode == PROJECT:
            if config.divergence == KL:
                res = fusion.project_kl(pr, ps, min(k_t, 1e9))
                dist, control, spent = res.dist, res.beta, res.spent
            else:
                clip = fusion.clip_renyi(pr, ps, min(k_t, 1e9))
                dist, control = clip.dist, clip.c
                spent = fusion.renyi_inf(dist, ps)
        else:
            dist = ablation_step(config.opt_mode, pr, ps, k_t, state)
            chosen_risky = dist is pr
            control = 1.0 if chosen_risky else 0.0
            spent = kl_rs if chosen_risky else 0.0

        if config.opt_mode == COLD_START:
            # No guarantee in this ablation: record spend without the
            # allowance check that bank() enforces.
            state = replace(state, A=state.A + spent, t=state.t + 1)
        else:
            state = budget_mod.bank(state, spent)

        idx = sample(dist, rng)
        symbol = alphabet.symbols[idx]
        steps.append(StepRecord(t, k_t, float(control), float(spent), float(kl_rs), symbol))
        ids.append(idx)
        generated.append(symbol)
        if idx == eos:
            terminated = "eos"
            generated.pop()
            break

    total = float(sum(s.spent for s in steps))
    trace = DecodeTrace(tuple(steps), delta, total, terminated, report)
    return generated, trace


def anchored_decode(
    p_r_model: NgramModel,
    p_s_model: NgramModel,
    prompt: Sequence[Symbol],
    config: AnchorConfig,
    rng: np.random.Generator,
) -> tuple[list[Symbol], DecodeTrace]:
    """Decode under a sequence-level KL budget of K = k * t_max.

    Returns the generated symbols (termination symbol excluded) and the
    full trace. Under adaptive banking the trace satisfies
    total_spent <= max(0, K - delta_init) up to float slack.
    """
    return _decode_loop(p_r_model, p_s_model, prompt, config, rng)


def renyi_decode(
    p_r_model: NgramModel,
    p_s_model: NgramModel,
    prompt: Sequence[Symbol],
    config: AnchorConfig,
    rng: np.random.Generator,
) -> tuple[list[Symbol], DecodeTrace]:
    """Worst-case variant: pointwise-ratio clipping instead of KL projection."""
    if config.divergence != RENYI:
        config = replace(config, divergence=RENYI)
    return _decode_loop(p_r_model, p_s_model, prompt, config, rng)
