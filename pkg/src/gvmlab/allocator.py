"""Closed-form budget allocation that minimizes the gradient-variance bound.

Given per-prompt accept rates p_i and gradient norms G_i, the regularized
variance objective

    sum_i [1/(1 + alpha/p_i^beta)] * G_i^2 / (p_i n_i)   s.t.  sum_i n_i = N

is minimized at n_i proportional to G_i / sqrt(p_i + alpha * p_i^(1-beta)).
The regularizer kills budgets on near-infeasible prompts (the weight curve
rises then falls with an interior maximum at p = (alpha(beta-1))^(1/beta)),
and a closed-form floor on the expected accepted count comes with it.
Continuous shares are rounded to integers by largest remainder so the total
is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class InfeasibleAllocationError(ValueError):
    """Every prompt has zero weight; there is nothing to budget."""


@dataclass(frozen=True)
class AllocatorConfig:
    total_budget: int
    alpha: float = 0.001
    beta: float = 2.0
    rounding: str = "largest-remainder"

    def __post_init__(self):
        if self.total_budget < 1:
            raise ValueError(f"total_budget must be >= 1, got {self.total_budget}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 2:
            raise ValueError(f"beta must be >= 2, got {self.beta}")
        if self.rounding != "largest-remainder":
            raise ValueError(f"unsupported rounding {self.rounding!r}")


@dataclass(frozen=True)
class AllocationPlan:
    weights: np.ndarray  # continuous pre-rounding weights, >= 0
    budgets: np.ndarray  # integers summing to the total budget
    lower_bound_accepted: float
    kind: str = "gvm"  # gvm | uniform


def _coerce_stats(stats) -> tuple[np.ndarray, np.ndarray]:
    """Accept a ProbeStats sequence or a plain (accept_rates, grad_norms) pair."""
    if isinstance(stats, tuple) and len(stats) == 2:
        p, g = stats
        p = np.asarray(p, dtype=float)
        g = np.asarray(g, dtype=float)
    else:
        p = np.array([s.accept_rate for s in stats], dtype=float)
        g = np.array([s.grad_norm for s in stats], dtype=float)
    if p.size == 0:
        raise ValueError("stats must be non-empty")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("accept rates must lie in [0, 1]")
    if np.any(g < 0):
        raise ValueError("grad norms must be >= 0")
    return p, g


def sampling_weight_curve(p, alpha: float, beta: float):
    """The per-prompt weight factor 1/sqrt(p + alpha * p^(1-beta)) for p > 0."""
    p = np.asarray(p, dtype=float)
    return 1.0 / np.sqrt(p + alpha * p ** (1.0 - beta))


def compute_weights(stats, cfg: AllocatorConfig) -> np.ndarray:
    """Continuous allocation weights; zero for infeasible (p=0) or flat (G=0) prompts."""
    p, g = _coerce_stats(stats)
    w = np.zeros_like(p)
    active = (p > 0) & (g > 0)
    w[active] = g[active] * sampling_weight_curve(p[active], cfg.alpha, cfg.beta)
    return w


def largest_remainder_round(shares: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative shares summing to `total` onto integers with the same sum.

    Leftover units go to the largest fractional parts; ties break by
    ascending index.
    """
    floors = np.floor(shares).astype(np.int64)
    remainder = int(round(total - floors.sum()))
    if remainder:
        frac = shares - floors
        order = np.lexsort((np.arange(shares.size), -frac))
        floors[order[:remainder]] += 1
    return floors


def allocate(stats, cfg: AllocatorConfig) -> AllocationPlan:
    """Integer budgets from the closed-form weights via largest-remainder rounding."""
    w = compute_weights(stats, cfg)
    total_w = w.sum()
    if total_w <= 0:
        raise InfeasibleAllocationError("all allocation weights are zero")
    shares = cfg.total_budget * w / total_w
    budgets = largest_remainder_round(shares, cfg.total_budget)
    return AllocationPlan(
        weights=w,
        budgets=budgets,
        lower_bound_accepted=accepted_lower_bound(stats, cfg),
        kind="gvm",
    )


def accepted_lower_bound(stats, cfg: AllocatorConfig) -> float:
    """Closed-form floor on the expected accepted count at the continuous optimum.

    N * sqrt(2) * (alpha(beta-1))^(1/(2 beta))
      * sum_i (G_i / sum G) * p_i / sqrt(p_i + alpha p_i^(1-beta)).

    The sqrt(2) constant is exact for beta = 2 (the term in the sum is then
    bounded by AM-GM); see the allocation notes for beta > 2.
    """
    p, g = _coerce_stats(stats)
    total_g = g.sum()
    if total_g <= 0:
        raise InfeasibleAllocationError("all grad norms are zero")
    active = p > 0
    terms = np.zeros_like(p)
    terms[active] = p[active] * sampling_weight_curve(p[active], cfg.alpha, cfg.beta)
    const = np.sqrt(2.0) * (cfg.alpha * (cfg.beta - 1.0)) ** (1.0 / (2.0 * cfg.beta))
    return float(cfg.total_budget * const * (g / total_g) @ terms)


def uniform_allocate(m: int, total_budget: int) -> AllocationPlan:
    """Budgets as equal as possible; the first N mod m prompts get the extra unit."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if total_budget < 0:
        raise ValueError("total_budget must be >= 0")
    base, extra = divmod(total_budget, m)
    budgets = np.full(m, base, dtype=np.int64)
    budgets[:extra] += 1
    return AllocationPlan(
        weights=np.full(m, 1.0 / m),
        budgets=budgets,
        lower_bound_accepted=float("nan"),
        kind="uniform",
    )


def allocation_objective(stats, cfg: AllocatorConfig, budgets) -> float:
    """Evaluate the regularized variance objective at an allocation.

    Prompts with p = 0 or G = 0 contribute nothing; a starved prompt
    (n_i = 0 with positive weight) makes the objective infinite.
    """
    p, g = _coerce_stats(stats)
    n = np.asarray(budgets, dtype=float)
    active = (p > 0) & (g > 0)
    if np.any(active & (n <= 0)):
        return float("inf")
    w = 1.0 / (1.0 + cfg.alpha / p[active] ** cfg.beta)
    return float(np.sum(w * g[active] ** 2 / (p[active] * n[active])))


def continuous_optimum(stats, cfg: AllocatorConfig) -> np.ndarray:
    """The continuous minimizer N * w / sum(w) (no rounding)."""
    w = compute_weights(stats, cfg)
    total_w = w.sum()
    if total_w <= 0:
        raise InfeasibleAllocationError("all allocation weights are zero")
    return cfg.total_budget * w / total_w


# ---------------------------------------------------------------------------
# JSON interface
# ---------------------------------------------------------------------------


def plan_to_json(plan: AllocationPlan, cfg: AllocatorConfig, path: str | Path | None = None) -> dict:
    doc = {
        "schema_version": 1,
        "total_budget": int(cfg.total_budget),
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "kind": plan.kind,
        "entries": [
            {"prompt_id": int(i), "weight": float(w), "budget": int(b)}
            for i, (w, b) in enumerate(zip(plan.weights, plan.budgets))
        ],
    }
    if path is not None:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def plan_from_json(path: str | Path) -> tuple[AllocationPlan, AllocatorConfig]:
    with open(path) as f:
        doc = json.load(f)
    cfg = AllocatorConfig(
        total_budget=int(doc["total_budget"]), alpha=float(doc["alpha"]), beta=float(doc["beta"])
    )
    entries = sorted(doc["entries"], key=lambda e: e["prompt_id"])
    weights = np.array([e["weight"] for e in entries], dtype=float)
    budgets = np.array([e["budget"] for e in entries], dtype=np.int64)
    plan = AllocationPlan(
        weights=weights,
        budgets=budgets,
        lower_bound_accepted=float("nan"),
        kind=doc.get("kind", "gvm"),
    )
    return plan, cfg
