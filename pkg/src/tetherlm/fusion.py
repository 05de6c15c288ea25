"""Per-step constrained projections between two next-symbol distributions.

Given a risky distribution p_r and a safe distribution p_s, `project_kl`
returns the distribution closest to p_r (in KL) among those within a KL
ball of radius k_t around p_s. The optimum lies on the geometric path

    q_beta  proportional to  p_s^(1-beta) * p_r^beta,   beta in [0, 1],

so the solve reduces to one-dimensional root finding on
f(beta) = KL(q_beta || p_s) - k_t. `clip_renyi` is the worst-case
counterpart: it caps every probability at e^k_t * p_s and rescales.

Feasibility outranks objective tightness everywhere: a returned
distribution never exceeds its budget beyond float slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lm import Distribution


class AlphabetMismatchError(ValueError):
    """Two distributions do not live on the same alphabet."""


@dataclass(frozen=True, eq=False)
class FusionResult:
    """Outcome of a KL-ball projection.

    beta is the weight on p_r; the constraint is inactive iff beta == 1.
    spent is KL(dist || p_s), guaranteed <= k_t + 1e-8.
    """

    dist: Distribution
    beta: float
    spent: float
    active: bool
    converged: bool = True


@dataclass(frozen=True, eq=False)
class ClipResult:
    """Outcome of a pointwise-ratio clip: dist <= e^k_t * p_s entrywise."""

    dist: Distribution
    c: float


def _check_pair(p: Distribution, q: Distribution) -> None:
    if p.size != q.size:
        raise AlphabetMismatchError(f"sizes differ: {p.size} vs {q.size}")


def kl(p: Distribution, q: Distribution) -> float:
    """Kullback-Leibler divergence sum(p * (log p - log q)), >= 0."""
    _check_pair(p, q)
    val = float(np.sum(np.exp(p.log_probs) * (p.log_probs - q.log_probs)))
    return max(val, 0.0)


def renyi_inf(p: Distribution, q: Distribution) -> float:
    """Order-infinity Renyi divergence: the maximum pointwise log-ratio."""
    _check_pair(p, q)
    return max(float(np.max(p.log_probs - q.log_probs)), 0.0)


def geometric_mix(p_s: Distribution, p_r: Distribution, beta: float) -> Distribution:
    """Normalized p_s^(1-beta) * p_r^beta via a log-sum-exp normalizer."""
    _check_pair(p_s, p_r)
    if beta == 0.0:
        return p_s
    if beta == 1.0:
        return p_r
    z = (1.0 - beta) * p_s.log_probs + beta * p_r.log_probs
    m = np.max(z)
    return Distribution(z - (m + math.log(np.exp(z - m).sum())))


def _mix_stats(lps: np.ndarray, a: np.ndarray, beta: float):
    """Return (log q_beta, KL(q_beta||p_s), Var_q[a]) for a = log p_r - log p_s."""
    z = lps + beta * a
    m = np.max(z)
    log_z = m + math.log(np.exp(z - m).sum())
    log_q = z - log_z
    q = np.exp(log_q)
    mean_a = float(q @ a)
    var_a = max(float(q @ (a * a)) - mean_a * mean_a, 0.0)
    # KL(q || p_s) = beta * E_q[a] - log Z, by the exponential-family identity
    spent = max(beta * mean_a - log_z, 0.0)
    return log_q, spent, var_a


def project_kl(
    p_r: Distribution,
    p_s: Distribution,
    k_t: float,
    tol: float = 1e-9,
    max_iter: int = 20,
) -> FusionResult:
    """KL-ball projection of p_r toward p_s with budget k_t.

    Boundary cases return immediately: k_t <= 0 gives p_s, and an already
    feasible p_r is returned unchanged. Otherwise beta solves
    KL(q_beta || p_s) = k_t by safeguarded Newton with bracketing; the
    derivative is f'(beta) = beta * Var_q[a], which is exact for this
    family. If the converged beta overspends by more than 1e-10 the
    feasible bracket end is returned instead.
    """
    _check_pair(p_r, p_s)
    if k_t <= 0.0:
        return FusionResult(p_s, 0.0, 0.0, active=True)
    d_rs = kl(p_r, p_s)
    if d_rs <= k_t:
        return FusionResult(p_r, 1.0, d_rs, active=False)

    lps = p_s.log_probs
    a = p_r.log_probs - lps

    lo, hi = 0.0, 1.0
    beta = k_t / (k_t + 1.0)
    converged = False
    tiny = 1e-12 * max(1.0, k_t)
    for _ in range(max_iter):
        _, spent, var_a = _mix_stats(lps, a, beta)
        f = spent - k_t
        if f <= 0.0:
            lo = beta
        else:
            hi = beta
        if abs(f) <= tiny:
            converged = True  # Newton found the root; the bracket no longer matters
            break
        fp = beta * var_a
        step_ok = fp > 0.0 and math.isfinite(f)
        cand = beta - f / fp if step_ok else math.nan
        if not (lo < cand < hi) or not math.isfinite(cand):
            cand = 0.5 * (lo + hi)
        beta = cand
        if hi - lo < tol:
            converged = True
            break

    # Short feasibility-projection bisection: tighten the bracket so the
    # lower end is a near-optimal fallback whenever Newton's point overspends.
    extra = 0
    while not converged and hi - lo >= tol and extra < 60:
        mid = 0.5 * (lo + hi)
        _, spent_mid, _ = _mix_stats(lps, a, mid)
        if spent_mid <= k_t:
            lo = mid
        else:
            hi = mid
        extra += 1
    converged = converged or hi - lo < tol

    log_q, spent, _ = _mix_stats(lps, a, beta)
    if spent > k_t + 1e-10:
        beta = lo
        log_q, spent, _ = _mix_stats(lps, a, beta)
    return FusionResult(Distribution(log_q), float(beta), float(spent), active=True, converged=converged)


def clip_renyi(
    p_r: Distribution,
    p_s: Distribution,
    k_t: float,
    tol: float = 1e-12,
) -> ClipResult:
    """Pointwise clipping: entries are min(c * p_r, e^k_t * p_s).

    The scale c is the root of f(c) = sum(min(c * p_r, ceil)) = 1, found by
    bisection from the feasible side (f(c) >= 1), so renormalization can
    only shrink entries and the ratio ceiling is never exceeded.
    """
    _check_pair(p_r, p_s)
    if k_t < 0.0:
        k_t = 0.0
    pr = np.exp(p_r.log_probs)
    ceil = np.exp(k_t + p_s.log_probs)
    if k_t == 0.0:
        c = float(np.max(ceil / pr))
        return ClipResult(p_s, c)
    if np.all(pr <= ceil):
        return ClipResult(p_r, 1.0)

    lo, hi = 1.0, float(np.max(ceil / pr))

    def mass(c: float) -> float:
        return float(np.minimum(c * pr, ceil).sum())

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) >= 1.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * hi:
            break
    c = hi
    q = np.minimum(c * pr, ceil)
    total = q.sum()  # in [1, 1 + tol]; dividing shrinks entries below the ceiling
    if abs(total - 1.0) > max(tol, 1e-9):
        raise RuntimeError(f"clip bisection failed to normalize: sum={total}")
    q = q / total
    return ClipResult(Distribution(np.log(q)), c / total)
