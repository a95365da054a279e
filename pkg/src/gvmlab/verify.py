"""Independent brute-force oracles and statistical test drivers.

Everything here recomputes quantities from raw parameter arrays with its own
code paths (direct normalization, materialized gradient vectors, dense grid
search, generic table-driven rejection sampling) so the closed-form
implementations elsewhere can be certified against it.  Oracles never call
the module they check; the suite drivers at the bottom call both sides and
emit OracleReport rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import Params, PromptInstance

MAX_ENUM_PARAMS = 300_000
MAX_ENUM_CELLS = 16_384


class EnumerationSizeError(ValueError):
    """Spaces too large for the brute-force table route."""


class DominationError(ValueError):
    """Proposal does not dominate the target distribution."""


@dataclass
class OracleReport:
    """One oracle check: pass iff the statistic is within its threshold."""

    name: str
    status: str  # pass | fail | skipped-precondition
    statistic: float
    threshold: float
    replications: int = 1
    seed: int | None = None
    detail: str = ""

    @classmethod
    def from_statistic(cls, name, statistic, threshold, replications=1, seed=None, detail=""):
        status = "pass" if statistic <= threshold else "fail"
        return cls(name, status, float(statistic), float(threshold), replications, seed, detail)


@dataclass(frozen=True)
class JointTable:
    """Full enumeration of one instance: joint, posterior, and gradient moments."""

    joint: np.ndarray  # (|Y|, |Z|) P(y, z | x)
    rationale_marginal: np.ndarray  # (|Y|,) P(y | x)
    posterior: np.ndarray  # (|Y|,) P(y | x, z_gold)
    normalizer: float  # Z(x, z_gold) == accept rate
    grad_norms: np.ndarray  # (|Y|,) ||grad ln P(y, z_gold | x)||
    g_mean: float  # E_posterior ||grad||
    g_sq: float  # E_posterior ||grad||^2

    @property
    def accept_rate(self) -> float:
        return self.normalizer


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def enumerate_joint(params: Params, inst: PromptInstance) -> JointTable:
    """Recompute the joint table and posterior for one instance from scratch.

    Gradient norms are taken by materializing the actual one-hot-minus-prob
    gradient vectors per rationale, not via any algebraic shortcut.
    """
    s = params.spaces
    Y, Z = s.num_rationales, s.num_answers
    if Y * Z > MAX_ENUM_CELLS or s.num_prompts * Y > MAX_ENUM_PARAMS:
        raise EnumerationSizeError(f"spaces {s} exceed enumeration limits")
    pi = _softmax_rows(params.rationale_logits)[inst.prompt]  # (|Y|,)
    if params.answer_is_frozen:
        az = np.zeros((Y, Z))
        az[np.arange(Y), params.answer_map] = 1.0
    else:
        az = _softmax_rows(params.answer_logits)  # (|Y|, |Z|)
    joint = pi[:, None] * az
    unnorm = joint[:, inst.gold_answer]
    normalizer = float(unnorm.sum())
    posterior = unnorm / normalizer if normalizer > 0 else np.zeros(Y)

    norms = np.zeros(Y)
    for y in range(Y):
        pieces = [np.eye(Y)[y] - pi]
        if not params.answer_is_frozen:
            pieces.append(np.eye(Z)[inst.gold_answer] - az[y])
        norms[y] = math.sqrt(sum(float(v @ v) for v in pieces))
    g_mean = float(posterior @ norms)
    g_sq = float(posterior @ norms**2)
    return JointTable(joint, pi, posterior, normalizer, norms, g_mean, g_sq)


# ---------------------------------------------------------------------------
# Allocation oracle: direct numerical minimization of the budget objective
# ---------------------------------------------------------------------------


def _alloc_objective(n: np.ndarray, p: np.ndarray, g: np.ndarray, alpha: float, beta: float):
    """sum_i [1/(1 + alpha/p_i^beta)] * G_i^2 / (p_i n_i), +inf on starved terms."""
    active = (p > 0) & (g > 0)
    if np.any(active & (n <= 0)):
        return float("inf")
    w = 1.0 / (1.0 + alpha / p[active] ** beta)
    return float(np.sum(w * g[active] ** 2 / (p[active] * n[active])))


def _coerce_stats(stats) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(stats, tuple) and len(stats) == 2:
        p, g = stats
        return np.asarray(p, dtype=float), np.asarray(g, dtype=float)
    p = np.array([s.accept_rate for s in stats], dtype=float)
    g = np.array([s.grad_norm for s in stats], dtype=float)
    return p, g


def _project_scaled_simplex(v: np.ndarray, total: float, lo: float) -> np.ndarray:
    """Euclidean projection onto {n : sum n = total, n >= lo}."""
    shifted = v - lo
    budget = total - lo * v.size
    u = np.sort(shifted)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.max(np.nonzero(cond)[0])) + 1
    tau = css[rho - 1] / rho
    return np.maximum(shifted - tau, 0.0) + lo


def grid_search_allocation(stats, cfg, resolution: int = 400):
    """Minimize the budget objective over {sum n = N, n >= 0} numerically.

    Dense grid for m <= 3, projected gradient descent beyond.  Returns
    (best_allocation, best_objective).
    """
    p, g = _coerce_stats(stats)
    N, alpha, beta = float(cfg.total_budget), float(cfg.alpha), float(cfg.beta)
    m = p.size
    active = (p > 0) & (g > 0)
    k = int(active.sum())
    if k == 0:
        raise ValueError("no feasible prompt for allocation search")
    best_n = np.zeros(m)
    if k == 1:
        best_n[active] = N
        return best_n, _alloc_objective(best_n, p, g, alpha, beta)

    pa, ga = p[active], g[active]
    if k == 2:
        lo = N * 1e-6
        n1 = np.linspace(lo, N - lo, resolution + 1)
        vals = np.array(
            [_alloc_objective(np.array([a, N - a]), pa, ga, alpha, beta) for a in n1]
        )
        sub = np.array([n1[vals.argmin()], N - n1[vals.argmin()]])
        best_val = float(vals.min())
    elif k == 3:
        lo = N * 1e-6
        axis = np.linspace(lo, N - 2 * lo, resolution + 1)
        best_val, sub = float("inf"), None
        for a in axis:
            rest = N - a
            b = np.linspace(lo, rest - lo, resolution + 1)
            cand = np.stack([np.full_like(b, a), b, rest - b], axis=1)
            vals = [_alloc_objective(c, pa, ga, alpha, beta) for c in cand]
            i = int(np.argmin(vals))
            if vals[i] < best_val:
                best_val, sub = float(vals[i]), cand[i]
    else:
        lo = min(1e-3, N / (10.0 * k))
        n = np.full(k, N / k)
        val = _alloc_objective(n, pa, ga, alpha, beta)
        step = N / 10.0
        for _ in range(5000):
            grad = -(1.0 / (1.0 + alpha / pa**beta)) * ga**2 / (pa * n**2)
            t = step
            improved = False
            while t > 1e-12 * N:
                cand = _project_scaled_simplex(n - t * grad, N, lo)
                cand_val = _alloc_objective(cand, pa, ga, alpha, beta)
                if cand_val < val - 1e-15:
                    n, val, improved = cand, cand_val, True
                    break
                t /= 2.0
            if not improved:
                break
        sub, best_val = n, val

    best_n[active] = sub
    return best_n, best_val


# ---------------------------------------------------------------------------
# Table-driven rejection sampling with an arbitrary proposal
# ---------------------------------------------------------------------------


def generic_rejection_sampler(
    params: Params,
    inst: PromptInstance,
    proposal: np.ndarray,
    n_draws: int,
    rng_seed,
) -> np.ndarray:
    """Sample the exact posterior through an arbitrary dominating proposal.

    Uses the tightest valid envelope M = max_y Q(y)/q(y); with the policy
    itself as the proposal this reduces to accepting with probability
    P(z_gold | y).  Raises DominationError when q gives zero mass to a
    supported rationale.
    """
    q = np.asarray(proposal, dtype=float)
    table = enumerate_joint(params, inst)
    Q = table.posterior
    if q.shape != Q.shape:
        raise ValueError(f"proposal must have shape {Q.shape}, got {q.shape}")
    if np.any(q < 0) or not math.isclose(float(q.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("proposal must be a probability vector")
    support = Q > 0
    if np.any(support & (q <= 0)):
        raise DominationError("proposal assigns zero mass inside the target support")
    ratio = np.zeros_like(Q)
    ratio[support] = Q[support] / q[support]
    M = float(ratio.max())
    accept_prob = ratio / M
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(q)
    cdf[-1] = 1.0
    draws = np.searchsorted(cdf, rng.random(n_draws), side="right")
    u = rng.random(n_draws)
    return draws[u < accept_prob[draws]]


# ---------------------------------------------------------------------------
# Numerical differentiation and curvature estimation
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def estimate_max_curvature(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    n_iters: int = 40,
    n_restarts: int = 4,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest Hessian eigenvalue at x0 by power iteration on FD Hessian-vector products."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    best = 0.0
    for _ in range(n_restarts):
        v = rng.normal(size=x0.size)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iters):
            hv = (grad_fn(x0 + h * v) - grad_fn(x0 - h * v)) / (2.0 * h)
            norm = np.linalg.norm(hv)
            if norm < 1e-14:
                break
            lam = float(v @ hv)
            v = hv / norm
        best = max(best, abs(lam))
    return best


def estimate_min_curvature(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_curvature: float | None = None,
    n_iters: int = 40,
    n_restarts: int = 4,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Smallest Hessian eigenvalue via power iteration on (c I - H)."""
    c = max_curvature if max_curvature is not None else estimate_max_curvature(
        grad_fn, x0, n_iters, n_restarts, h, seed
    )
    c = max(c, 1e-12)
    rng = np.random.default_rng(seed + 1)
    x0 = np.asarray(x0, dtype=float)
    largest_shifted = 0.0
    for _ in range(n_restarts):
        v = rng.normal(size=x0.size)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iters):
            hv = (grad_fn(x0 + h * v) - grad_fn(x0 - h * v)) / (2.0 * h)
            sv = c * v - hv
            norm = np.linalg.norm(sv)
            if norm < 1e-14:
                break
            lam = float(v @ sv)
            v = sv / norm
        largest_shifted = max(largest_shifted, lam)
    return c - largest_shifted


# ---------------------------------------------------------------------------
# Distribution-level test statistics
# ---------------------------------------------------------------------------


def tv_distance(samples: np.ndarray, probs: np.ndarray) -> float:
    """Total-variation distance between an empirical histogram and a pmf."""
    counts = np.bincount(np.asarray(samples, dtype=np.int64), minlength=probs.size)
    if counts.sum() == 0:
        return 1.0
    emp = counts / counts.sum()
    return 0.5 * float(np.abs(emp - probs).sum())


def _std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(x, dtype=float) / math.sqrt(2.0)))


def ks_test_standard_normal(z: np.ndarray) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and asymptotic p against N(0, 1)."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    if n == 0:
        return 0.0, 1.0
    cdf = _std_normal_cdf(z)
    d_plus = np.max(np.arange(1, n + 1) / n - cdf)
    d_minus = np.max(cdf - np.arange(0, n) / n)
    d = max(float(d_plus), float(d_minus))
    lam = (math.sqrt(n) + 0.12 + 0.11 / math.sqrt(n)) * d
    p = 2.0 * sum((-1.0) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam) for j in range(1, 101))
    return d, min(max(p, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Oracle suites (drivers that call both oracle and implementation)
# ---------------------------------------------------------------------------

SUITES = ("sampler", "allocation", "unbiasedness", "variance", "theorems")


def run_suite(name: str, config: dict | None = None) -> list[OracleReport]:
    """Run a named oracle suite against shipped fixtures."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; available: {', '.join(SUITES)}")
    from . import suites as _suites

    return getattr(_suites, f"suite_{name}")(config or {})


def reports_to_json(suite: str, reports: Sequence[OracleReport], path: str | Path | None = None):
    doc = {"schema_version": 1, "suite": suite, "reports": [asdict(r) for r in reports]}
    if path is not None:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc
