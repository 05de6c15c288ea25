"""Independent brute-force oracles used to pin expected values.

Everything here recomputes results by the most literal method available
(grid search, exhaustive enumeration, quadratic scans) and must stay
independent of the implementation paths it checks.
"""

from __future__ import annotations

import math

import numpy as np

from tetherlm import budget as budget_mod
from tetherlm import fusion
from tetherlm.budget import BudgetState, average_debt, prefix_debt
from tetherlm.decode import (
    COLD_START,
    DEBT_AVERAGE,
    DEBT_NONE,
    KL,
    NO_OPT,
    PROJECT,
    RENYI,
    AnchorConfig,
)
from tetherlm.lm import EOS, Distribution, apply_processors


def grid_project(p_r, p_s, k_t, step=1e-4):
    """Best feasible point of the projection objective on a beta grid."""
    betas = np.arange(0.0, 1.0 + step / 2, step)
    best_beta, best_obj = 0.0, math.inf
    for beta in betas:
        q = fusion.geometric_mix(p_s, p_r, float(beta))
        if fusion.kl(q, p_s) <= k_t:
            obj = fusion.kl(q, p_r)
            if obj < best_obj:
                best_beta, best_obj = float(beta), obj
    return best_beta, best_obj


def grid_project_fast(p_r, p_s, k_t, step=1e-4):
    """Same result as grid_project using the monotonicity of the spend
    curve f(beta) = KL(q_beta || p_s): the best feasible grid point is the
    largest feasible beta. Monotonicity itself is property-tested
    separately; this keeps large sweeps inside their runtime budget.
    """
    n = int(round(1.0 / step))
    lo, hi = 0, n  # grid indices; f(0) = 0 is always feasible
    if fusion.kl(p_r, p_s) <= k_t:
        return 1.0, fusion.kl(p_r, p_r)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        q = fusion.geometric_mix(p_s, p_r, mid * step)
        if fusion.kl(q, p_s) <= k_t:
            lo = mid
        else:
            hi = mid
    beta = lo * step
    return beta, fusion.kl(fusion.geometric_mix(p_s, p_r, beta), p_r)


def bisect_clip_scale(p_r, p_s, k_t, iters=200):
    """Clipping scale by plain bisection on the mass function."""
    pr = np.exp(p_r.log_probs)
    ceil = math.exp(k_t) * np.exp(p_s.log_probs)
    lo, hi = 0.0, float(np.max(ceil / pr))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.minimum(mid * pr, ceil).sum() >= 1.0:
            hi = mid
        else:
            lo = mid
    return hi


class EnumeratedProcess:
    """Exact sequence-level quantities of a budgeted decode by full
    enumeration of every completion up to the horizon.

    Walks every prefix, reproducing the per-step projection and banking
    of the decode loop, and accumulates leaf probabilities under the
    fused and the safe processes. EOS is absorbing, so stopping at a leaf
    or padding with EOS gives the same divergences.
    """

    def __init__(self, p_r_model, p_s_model, prompt, config: AnchorConfig):
        self.pr_model = p_r_model
        self.ps_model = p_s_model
        self.config = config
        self.alphabet = p_r_model.alphabet
        self.prompt_ids = list(self.alphabet.encode(prompt))
        self.leaves: list[tuple[float, float, float]] = []  # (log p*, log ps, path spend sum)
        report = None
        if config.debt_mode != DEBT_NONE and prompt:
            report = prefix_debt(p_r_model, p_s_model, prompt, config.debt_window, specials={self.alphabet.eos})
        if report is None or config.schedule != budget_mod.ADAPTIVE:
            self.delta = 0.0
        elif config.debt_mode == DEBT_AVERAGE:
            self.delta = average_debt(report.llrs)
        else:
            self.delta = report.delta_init

    def _step_dist(self, ids, state, switched):
        params = self.config.decode_params
        pr = apply_processors(Distribution(self.pr_model.next_log_probs(ids)), ids, params)
        ps = apply_processors(Distribution(self.ps_model.next_log_probs(ids)), ids, params)
        kl_rs = fusion.kl(pr, ps)
        k_t = budget_mod.accrue(state)
        if state.schedule == budget_mod.GLOBAL:
            headroom = state.K + state.delta_init - state.A
            if switched or kl_rs > headroom:
                return ps, ps, 0.0, True
            return pr, ps, kl_rs, False
        if self.config.opt_mode == PROJECT:
            if self.config.divergence == KL:
                res = fusion.project_kl(pr, ps, min(k_t, 1e9))
                return res.dist, ps, res.spent, switched
            clip = fusion.clip_renyi(pr, ps, min(k_t, 1e9))
            return clip.dist, ps, fusion.renyi_inf(clip.dist, ps), switched
        if self.config.opt_mode == NO_OPT:
            if kl_rs <= k_t:
                return pr, ps, kl_rs, switched
            return ps, ps, 0.0, switched
        if self.config.opt_mode == COLD_START:
            dist = ps if state.t < math.ceil(state.k * 10) else pr
            spent = 0.0 if dist is ps else kl_rs
            return dist, ps, spent, switched
        raise AssertionError(self.config.opt_mode)

    def run(self):
        state = BudgetState.fresh(self.config.k, self.config.t_max, self.delta, self.config.schedule)
        self._walk(self.prompt_ids, state, 0.0, 0.0, 0.0, False)
        return self

    def _walk(self, ids, state, logp_star, logp_safe, spent_sum, switched):
        if state.t == self.config.t_max:
            self.leaves.append((logp_star, logp_safe, spent_sum))
            return
        dist, ps, spent, switched = self._step_dist(ids, state, switched)
        if self.config.opt_mode == COLD_START:
            import dataclasses
            new_state = dataclasses.replace(state, A=state.A + spent, t=state.t + 1)
        else:
            new_state = budget_mod.bank(state, spent)
        for sym in range(self.alphabet.size):
            lp = float(dist.log_probs[sym])
            lps = float(ps.log_probs[sym])
            if sym == self.alphabet.eos_index:
                self.leaves.append((logp_star + lp, logp_safe + lps, spent_sum + spent))
            else:
                self._walk(
                    ids + [sym], new_state,
                    logp_star + lp, logp_safe + lps, spent_sum + spent, switched,
                )

    def total_mass(self) -> float:
        return float(sum(math.exp(lp) for lp, _, _ in self.leaves))

    def kl_to_safe(self) -> float:
        return float(sum(math.exp(lp) * (lp - lps) for lp, lps, _ in self.leaves))

    def renyi_to_safe(self) -> float:
        return float(max(lp - lps for lp, lps, _ in self.leaves))

    def expected_step_spend(self) -> float:
        return float(sum(math.exp(lp) * s for lp, _, s in self.leaves))

    def path_probability(self, symbols) -> float:
        """Probability that the fused process emits exactly these symbols
        next (no EOS requirement), following the single given path."""
        state = BudgetState.fresh(self.config.k, self.config.t_max, self.delta, self.config.schedule)
        ids = list(self.prompt_ids)
        logp = 0.0
        switched = False
        for sym in symbols:
            dist, _, spent, switched = self._step_dist(ids, state, switched)
            idx = self.alphabet.index(sym)
            logp += float(dist.log_probs[idx])
            state = budget_mod.bank(state, spent)
            ids.append(idx)
        return math.exp(logp)


def lcs_oracle(a, b) -> int:
    """Plain-python O(n*m) dynamic program for the longest common run."""
    a, b = list(a), list(b)
    best = 0
    prev = [0] * (len(b) + 1)
    for i in range(len(a)):
        cur = [0] * (len(b) + 1)
        for j in range(len(b)):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
                if cur[j + 1] > best:
                    best = cur[j + 1]
        prev = cur
    return best


def acs_oracle(hyp, ref, min_len) -> int:
    """Greedy accumulated common substrings by exhaustive span scans.

    Longest span first, ties by earliest hypothesis position, no overlap
    on the hypothesis side; direct string comparisons only.
    """
    hyp, ref = list(hyp), list(ref)
    blocked = set()
    total = 0
    while True:
        best_len, best_start = 0, None
        for i in range(len(hyp)):
            for j in range(len(ref)):
                k = 0
                while (
                    i + k < len(hyp)
                    and j + k < len(ref)
                    and (i + k) not in blocked
                    and hyp[i + k] == ref[j + k]
                ):
                    k += 1
                if k > best_len:
                    best_len, best_start = k, i
        if best_len < min_len:
            return total
        total += best_len
        blocked.update(range(best_start, best_start + best_len))


def cpfuse_fine_grid(p_r, p_s, off_r, off_s, step=1e-3):
    """Re-optimize the worst-case score on a fine beta grid."""
    best_beta, best_val = 0.0, math.inf
    for beta in np.arange(0.0, 1.0 + step / 2, step):
        q = fusion.geometric_mix(p_s, p_r, float(beta))
        val = max(fusion.kl(q, p_r) + off_r, fusion.kl(q, p_s) + off_s)
        if val < best_val - 1e-15:
            best_beta, best_val = float(beta), val
    return best_beta, best_val
