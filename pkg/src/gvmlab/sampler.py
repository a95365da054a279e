"""Rejection sampling from the rationale posterior and the two-stage probe.

Sampling a rationale from the policy and accepting it with probability
P(z_gold | y) yields exact posterior samples (the envelope constant 1/Z makes
the acceptance test collapse to the answer likelihood; under a frozen answer
map it is literally the correctness indicator).  The probe stage spends N'
draws per prompt to estimate the accept rate and the posterior-expected
gradient norm that the allocator consumes.

Each prompt gets its own RNG stream split from the run seed by prompt index,
so results are reproducible and independent of scheduling order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as _model
from .model import Params, PromptInstance

# Stream tags keep the per-prompt substreams of different stages disjoint.
STREAM_PROBE = 1
STREAM_FILL = 2
STREAM_REPLICATE = 3
STREAM_BATCH = 4
STREAM_ROLLOUT = 5

P_SOURCES = ("probe", "oracle")


def substream(seed, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...); order- and schedule-invariant."""
    if isinstance(seed, (int, np.integer)):
        entropy = [int(seed)]
    else:
        entropy = [int(s) for s in seed]
    return np.random.default_rng(entropy + [int(k) for k in key])


@dataclass(frozen=True)
class ProbeStats:
    """Per-prompt probe result from N' policy draws."""

    prompt_id: int
    accept_rate: float  # accepted_count / probe_size exactly
    grad_norm: float  # importance-weighted mean norm over accepted draws; 0 if none
    probe_size: int
    accepted_count: int


@dataclass(frozen=True)
class BufferEntry:
    """Accepted rationales for one prompt plus the importance weight 1/(n_i p_i)."""

    prompt_id: int
    accepted: np.ndarray  # rationale indices, length <= budget_used
    budget_used: int
    weight: float  # 1/(n_i p_i); 0.0 for unbudgeted prompts
    p_value: float
    p_source: str  # probe | oracle


@dataclass(frozen=True)
class ReplayBuffer:
    entries: tuple[BufferEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total_accepted(self) -> int:
        return int(sum(e.accepted.size for e in self.entries))

    @property
    def total_budget(self) -> int:
        return int(sum(e.budget_used for e in self.entries))


def _sampling_tables(params: Params, inst: PromptInstance) -> tuple[np.ndarray, np.ndarray]:
    """(cdf over rationales, per-rationale accept probabilities)."""
    pi = params.rationale_probs()[inst.prompt]
    accept = params.answer_probs()[:, inst.gold_answer]
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    return cdf, accept


def rejection_sample(
    params: Params,
    inst: PromptInstance,
    n_draws: int,
    rng,
) -> np.ndarray:
    """Draw n rationales from the policy, keep each with probability P(z_gold|y).

    `rng` is a numpy Generator or a seed.  Zero accepts is a valid outcome.
    """
    if n_draws < 0:
        raise ValueError("n_draws must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if n_draws == 0:
        return np.empty(0, dtype=np.int64)
    cdf, accept = _sampling_tables(params, inst)
    draws = np.searchsorted(cdf, rng.random(n_draws), side="right").astype(np.int64)
    u = rng.random(n_draws)
    return draws[u < accept[draws]]


def probe(
    params: Params,
    instances: Sequence[PromptInstance],
    probe_size: int,
    rng_seed,
    reduction: str = "sum",
    grad_block: str = "all",
) -> list[ProbeStats]:
    """First-stage pass: N' draws per prompt -> accept-rate and grad-norm estimates.

    The grad-norm estimate is the importance-weighted sum
    sum_accepted ||grad ln P(y, z_i|x_i)|| / (N' * p_hat), which reduces to the
    plain mean over accepted draws; it is 0 when nothing is accepted.
    """
    if probe_size < 1:
        raise ValueError("probe_size must be >= 1")
    stats = []
    for i, inst in enumerate(instances):
        rng = substream(rng_seed, STREAM_PROBE, i)
        accepted = rejection_sample(params, inst, probe_size, rng)
        count = int(accepted.size)
        rate = count / probe_size
        if count:
            norms = _model.grad_norm_table(params, inst, reduction, grad_block)
            grad_norm = float(norms[accepted].sum() / count)
        else:
            grad_norm = 0.0
        stats.append(ProbeStats(i, rate, grad_norm, probe_size, count))
    return stats


def oracle_rates_and_norms(
    params: Params,
    instances: Sequence[PromptInstance],
    reduction: str = "sum",
    grad_block: str = "all",
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (accept_rates, posterior-mean grad norms) by enumeration."""
    p = np.empty(len(instances))
    g = np.empty(len(instances))
    for i, inst in enumerate(instances):
        post = _model.exact_posterior(params, inst)
        norms = _model.grad_norm_table(params, inst, reduction, grad_block)
        p[i] = post.normalizer
        g[i] = float(post.probs @ norms)
    return p, g


def fill_buffer(
    params: Params,
    instances: Sequence[PromptInstance],
    plan,
    p_source: str = "probe",
    rng_seed=0,
    accept_rates: Sequence[float] | None = None,
) -> ReplayBuffer:
    """Run the budgeted rejection-sampling stage and attach importance weights.

    `plan` provides per-prompt integer budgets; `accept_rates` supplies the
    probe estimates when p_source="probe" (the exact rates are enumerated for
    p_source="oracle").  Prompts with zero budget get empty entries.  A
    positive budget on a prompt with exact accept rate 0 is rejected (the
    allocator must not budget infeasible prompts); a zero *probe estimate*
    merely zeroes the importance weight, since uniform baselines legitimately
    budget such prompts and the mean-over-accepted weighting never reads it.
    """
    if p_source not in P_SOURCES:
        raise ValueError(f"p_source must be one of {P_SOURCES}, got {p_source!r}")
    budgets = np.asarray(plan.budgets, dtype=np.int64)
    if budgets.shape != (len(instances),):
        raise ValueError("plan budgets must align with instances")
    if np.any(budgets < 0):
        raise ValueError("budgets must be >= 0")
    if p_source == "probe":
        if accept_rates is None:
            raise ValueError('p_source="probe" requires accept_rates')
        rates = np.asarray(accept_rates, dtype=float)
    else:
        rates = np.array([_model.exact_accept_rate(params, inst) for inst in instances])

    entries = []
    for i, inst in enumerate(instances):
        n_i = int(budgets[i])
        if n_i == 0:
            entries.append(BufferEntry(i, np.empty(0, dtype=np.int64), 0, 0.0, float(rates[i]), p_source))
            continue
        if rates[i] <= 0.0 and p_source == "oracle":
            raise ValueError(
                f"prompt {i} has exact accept rate 0 but budget {n_i}; "
                "infeasible prompts must not be budgeted"
            )
        rng = substream(rng_seed, STREAM_FILL, i)
        accepted = rejection_sample(params, inst, n_i, rng)
        weight = 1.0 / (n_i * float(rates[i])) if rates[i] > 0.0 else 0.0
        entries.append(BufferEntry(i, accepted, n_i, weight, float(rates[i]), p_source))
    return ReplayBuffer(tuple(entries))


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

PROBE_CSV_HEADER = ["prompt_id", "accept_rate", "grad_norm", "probe_size", "accepted_count"]


def probe_stats_to_csv(stats: Sequence[ProbeStats], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROBE_CSV_HEADER)
        for s in stats:
            writer.writerow(
                [s.prompt_id, repr(s.accept_rate), repr(s.grad_norm), s.probe_size, s.accepted_count]
            )


def probe_stats_from_csv(path: str | Path) -> list[ProbeStats]:
    stats = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PROBE_CSV_HEADER:
            raise ValueError(
                f"probe CSV header mismatch: expected {PROBE_CSV_HEADER}, got {reader.fieldnames}"
            )
        for row in reader:
            stats.append(
                ProbeStats(
                    prompt_id=int(row["prompt_id"]),
                    accept_rate=float(row["accept_rate"]),
                    grad_norm=float(row["grad_norm"]),
                    probe_size=int(row["probe_size"]),
                    accepted_count=int(row["accepted_count"]),
                )
            )
    return stats
