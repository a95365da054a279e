"""Training loops on the tabular model: EM with SGD M-steps, clipped-ratio
reward fine-tuning, and group-relative policy optimization.

One iteration is an E-step (refresh the posterior, probe, allocate the draw
budget, fill the buffer) followed by k gradient M-steps.  The practical
M-step weighting divides by the realized accepted count; the importance
weighting (divide by n_i p_i) is the one with clean unbiasedness/variance
semantics and is what the convergence-theorem harness runs on, together with
fresh buffers per M-step so every stochastic gradient is conditionally
unbiased for the frozen-posterior objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import allocator as _allocator
from . import estimator as _estimator
from . import model as _model
from . import sampler as _sampler
from .allocator import AllocationPlan, AllocatorConfig
from .model import Params, PosteriorTable, PromptInstance
from .sampler import substream, STREAM_ROLLOUT

ALGORITHMS = ("em-sgd", "raft++", "grpo")
ALLOCATIONS = ("gvm", "uniform")
STAT_SOURCES = ("probe", "oracle")

METRICS_CSV_HEADER = [
    "step",
    "epoch",
    "loss_exact",
    "elbo",
    "accept_total",
    "budget_total",
    "var_trace",
    "var_bound",
    "alloc_kind",
    "algorithm",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, last_good_step: int, message: str, run: "TrainingRun | None" = None):
        super().__init__(message)
        self.last_good_step = last_good_step
        self.run = run


class NoFeasiblePromptError(ValueError):
    """No instance has posterior mass under the current model."""


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "em-sgd"
    steps_per_estep: int = 10  # M-steps per E-step
    learning_rate: float = 1e-2
    epochs: int = 10  # number of E-steps
    probe_size: int = 16  # N' draws per prompt in the probe stage
    total_budget: int = 64  # N draws split across prompts per E-step
    allocation: str = "gvm"
    alpha: float = 0.001
    beta: float = 2.0
    clip_low: float = 0.2
    clip_high: float = 0.28
    kl_coef: float = 0.001
    group_size: int = 4  # rollouts per group (grpo)
    batch_fraction: float = 1.0
    seed: int = 0
    # estimator and E-step plumbing
    weighting: str = "mean-accepted"  # importance | mean-accepted
    p_source: str = "probe"  # weight denominators: probe estimate or exact rate
    stats_source: str = "probe"  # allocator inputs: probe estimates or exact stats
    fresh_buffer_per_step: bool = False  # resample the buffer before every M-step
    exact_gradients: bool = False  # budget->infinity surrogate: enumerate the M-step gradient
    ridge: float = 0.0  # L2 coefficient added to the objective (strong convexity)
    grad_reduction: str = "sum"
    grad_block: str = "all"
    var_replications: int = 0  # per-E-step empirical variance report (0 = skip)
    log_theorem_quantities: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"allocation must be one of {ALLOCATIONS}, got {self.allocation!r}")
        if self.steps_per_estep < 1:
            raise ValueError("steps_per_estep must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.probe_size < 1:
            raise ValueError("probe_size must be >= 1")
        if self.total_budget < 1:
            raise ValueError("total_budget must be >= 1")
        if not (0.0 < self.clip_low < 1.0):
            raise ValueError("clip_low must be in (0, 1)")
        if not self.clip_high > 0:
            raise ValueError("clip_high must be > 0")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.algorithm == "grpo" and self.group_size < 2:
            raise ValueError("group_size must be >= 2 for grpo")
        if not (0.0 < self.batch_fraction <= 1.0):
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.weighting not in _estimator.WEIGHTINGS:
            raise ValueError(f"weighting must be one of {_estimator.WEIGHTINGS}")
        if self.p_source not in STAT_SOURCES or self.stats_source not in STAT_SOURCES:
            raise ValueError(f"p_source/stats_source must be one of {STAT_SOURCES}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class RunMetrics:
    step: int
    epoch: int
    loss_exact: float
    elbo: float
    accept_total: int
    budget_total: int
    var_trace: float
    var_bound: float
    alloc_kind: str
    algorithm: str
    # extra diagnostics, not part of the CSV contract
    surrogate_grad_sq: float = float("nan")
    estimator_var: float = float("nan")
    accuracy: float = float("nan")
    dropped_groups: int = 0


@dataclass(frozen=True)
class TrajectoryPoint:
    params: Params
    metrics: RunMetrics


@dataclass(frozen=True)
class TrainingRun:
    config: TrainerConfig
    points: tuple[TrajectoryPoint, ...]

    @property
    def final_params(self) -> Params:
        return self.points[-1].params

    @property
    def metrics(self) -> list[RunMetrics]:
        return [p.metrics for p in self.points]


@dataclass(frozen=True)
class ResponseGroup:
    """One prompt's sampled rollouts with binary rewards."""

    prompt_id: int
    rationales: np.ndarray
    answers: np.ndarray
    rewards: np.ndarray


@dataclass(frozen=True)
class GrpoGroup:
    """A rollout group with group-standardized advantages."""

    prompt_id: int
    rationales: np.ndarray
    answers: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray


def group_advantages(rewards: np.ndarray) -> np.ndarray:
    """(r - mean)/std per group; all zeros when the rewards are constant."""
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _ridge_loss(params: Params, instances, ridge: float) -> float:
    loss = _model.exact_marginal_nll(params, instances)
    if ridge:
        vec = params.to_vector()
        loss += 0.5 * ridge * float(vec @ vec)
    return loss


def _safe_loss(params: Params, instances) -> float:
    """Exact NLL, with runaway parameters mapped to +inf instead of an error."""
    try:
        return _model.exact_marginal_nll(params, instances)
    except _model.InfeasibleInstanceError:
        return float("inf")


def _step_params(theta: Params, new_vec: np.ndarray, step: int, cfg, points) -> Params:
    if not np.all(np.isfinite(new_vec)):
        raise DivergenceError(
            step, f"non-finite parameters after step {step + 1}", TrainingRun(cfg, tuple(points))
        )
    return theta.with_vector(new_vec)


def _mean_gold_prob(params: Params, instances) -> float:
    return float(np.mean([_model.exact_accept_rate(params, i) for i in instances]))


def _epoch_plan(params: Params, instances, cfg: TrainerConfig, epoch: int):
    """(plan, probe accept-rate array or None) for one E-step."""
    m = len(instances)
    if cfg.allocation == "uniform":
        plan = _allocator.uniform_allocate(m, cfg.total_budget)
        rates = None
        if cfg.p_source == "probe" or cfg.stats_source == "probe":
            stats = _sampler.probe(
                params, instances, cfg.probe_size, [cfg.seed, epoch],
                cfg.grad_reduction, cfg.grad_block,
            )
            rates = np.array([s.accept_rate for s in stats])
        return plan, rates
    alloc_cfg = AllocatorConfig(cfg.total_budget, cfg.alpha, cfg.beta)
    if cfg.stats_source == "oracle":
        p, g = _sampler.oracle_rates_and_norms(params, instances, cfg.grad_reduction, cfg.grad_block)
        plan = _allocator.allocate((p, g), alloc_cfg)
        rates = p if cfg.p_source == "oracle" else None
        if rates is None:
            stats = _sampler.probe(
                params, instances, cfg.probe_size, [cfg.seed, epoch],
                cfg.grad_reduction, cfg.grad_block,
            )
            rates = np.array([s.accept_rate for s in stats])
        return plan, rates
    stats = _sampler.probe(
        params, instances, cfg.probe_size, [cfg.seed, epoch], cfg.grad_reduction, cfg.grad_block
    )
    plan = _allocator.allocate(stats, alloc_cfg)
    rates = np.array([s.accept_rate for s in stats])
    return plan, rates


def _sample_response_group(params: Params, inst: PromptInstance, count: int, rng) -> ResponseGroup:
    """Plain on-policy rollouts: y ~ P(.|x), z ~ P(.|y) (or the frozen map)."""
    pi = params.rationale_probs()[inst.prompt]
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    ys = np.searchsorted(cdf, rng.random(count), side="right").astype(np.int64)
    if params.answer_is_frozen:
        zs = params.answer_map[ys]
    else:
        cdfz = np.cumsum(params.answer_probs(), axis=1)
        cdfz[:, -1] = 1.0
        zs = (cdfz[ys] <= rng.random(count)[:, None]).sum(axis=1).astype(np.int64)
    rewards = (zs == inst.gold_answer).astype(np.int64)
    return ResponseGroup(inst.prompt, ys, zs, rewards)


# ---------------------------------------------------------------------------
# EM with stochastic-gradient M-steps
# ---------------------------------------------------------------------------


def em_train(params: Params, instances: Sequence[PromptInstance], cfg: TrainerConfig) -> TrainingRun:
    """Run the configured algorithm; returns the (Params, RunMetrics) trajectory."""
    if not instances:
        raise NoFeasiblePromptError("no training instances given")
    feasible = [
        i for i in instances
        if _model.exact_accept_rate(params, i) > 0.0
    ]
    if not feasible:
        raise NoFeasiblePromptError("every instance has zero posterior mass at the start")
    if cfg.algorithm == "em-sgd":
        return _em_sgd_loop(params, instances, cfg)
    if cfg.algorithm == "raft++":
        return _raftpp_loop(params, instances, cfg)
    return _grpo_loop(params, instances, cfg)


def _initial_point(params: Params, instances, cfg: TrainerConfig) -> TrajectoryPoint:
    loss = _model.exact_marginal_nll(params, instances)
    return TrajectoryPoint(
        params,
        RunMetrics(
            step=0,
            epoch=0,
            loss_exact=loss,
            elbo=_model.negative_elbo(params, instances),
            accept_total=0,
            budget_total=0,
            var_trace=float("nan"),
            var_bound=float("nan"),
            alloc_kind=cfg.allocation,
            algorithm=cfg.algorithm,
            accuracy=_mean_gold_prob(params, instances),
        ),
    )


def _em_sgd_loop(params: Params, instances, cfg: TrainerConfig) -> TrainingRun:
    theta = params
    points = [_initial_point(theta, instances, cfg)]
    step = 0
    for t in range(cfg.epochs):
        theta_old = theta
        posteriors = [_model.exact_posterior(theta_old, inst) for inst in instances]
        plan, rates = _epoch_plan(theta_old, instances, cfg, t)
        var_bound = _estimator.exact_variance_bound(theta_old, instances, plan.budgets)
        var_trace = float("nan")
        if cfg.var_replications >= 2:
            var_trace = _estimator.variance_report(
                theta_old, instances, plan, cfg.var_replications, [cfg.seed, t, 7],
                weighting="importance", p_source="oracle",
            ).empirical_trace_var

        buffer = None
        for r in range(cfg.steps_per_estep):
            if not cfg.exact_gradients and (buffer is None or cfg.fresh_buffer_per_step):
                buffer = _sampler.fill_buffer(
                    theta_old, instances, plan, cfg.p_source, [cfg.seed, t, r],
                    accept_rates=rates,
                )
            vec = theta.to_vector()
            if cfg.exact_gradients:
                g = _model.surrogate_gradient(theta, instances, posteriors)
            else:
                g = _estimator.minibatch_gradient(
                    theta, buffer, instances, cfg.batch_fraction, [cfg.seed, t, r],
                    weighting=cfg.weighting,
                ).grad
            if cfg.ridge:
                g = g + cfg.ridge * vec

            sg_sq = float("nan")
            est_var = float("nan")
            if cfg.log_theorem_quantities:
                sg = _model.surrogate_gradient(theta, instances, posteriors)
                if cfg.ridge:
                    sg = sg + cfg.ridge * vec
                sg_sq = float(sg @ sg)
                if cfg.exact_gradients:
                    est_var = 0.0
                elif cfg.weighting == "importance" and cfg.batch_fraction == 1.0:
                    est_var = _estimator.exact_step_variance(
                        theta, instances, plan.budgets, posteriors=posteriors
                    )

            theta = _step_params(theta, vec - cfg.learning_rate * g, step, cfg, points)
            step += 1
            loss = _safe_loss(theta, instances)
            if not math.isfinite(loss):
                raise DivergenceError(
                    step - 1,
                    f"non-finite loss at step {step}",
                    TrainingRun(cfg, tuple(points)),
                )
            metrics = RunMetrics(
                step=step,
                epoch=t,
                loss_exact=loss,
                elbo=_model.negative_elbo(theta, instances, posteriors),
                accept_total=0 if cfg.exact_gradients else buffer.total_accepted,
                budget_total=0 if cfg.exact_gradients else buffer.total_budget,
                var_trace=var_trace,
                var_bound=var_bound,
                alloc_kind=plan.kind,
                algorithm=cfg.algorithm,
                surrogate_grad_sq=sg_sq,
                estimator_var=est_var,
                accuracy=_mean_gold_prob(theta, instances),
            )
            points.append(TrajectoryPoint(theta, metrics))
    return TrainingRun(cfg, tuple(points))


# ---------------------------------------------------------------------------
# Clipped-ratio reward fine-tuning (token-level ratios on the factor pair)
# ---------------------------------------------------------------------------


def _log_ratio_tables(params: Params, params_old: Params):
    """Per-factor log-ratio lookup tables between current and sampling params."""
    lr = params.rationale_log_probs() - params_old.rationale_log_probs()
    la = None
    if not params.answer_is_frozen:
        la = params.answer_log_probs() - params_old.answer_log_probs()
    return lr, la


def raftpp_loss(params: Params, params_old: Params, group: ResponseGroup, cfg: TrainerConfig) -> float:
    """Clipped-ratio objective for one prompt's rollout group.

    Per response: mean over its factor ratios of min(s, clip(s, 1-clip_low,
    1+clip_high)), gated by the response having the group's best reward.
    All-zero-reward groups are dropped (contribute 0).
    """
    value, _, _ = _raftpp_group_value_grad(params, params_old, group, cfg, want_grad=False)
    return value


def raftpp_loss_grad(
    params: Params, params_old: Params, group: ResponseGroup, cfg: TrainerConfig
) -> tuple[float, np.ndarray]:
    value, grad, _ = _raftpp_group_value_grad(params, params_old, group, cfg, want_grad=True)
    return value, grad


def _raftpp_group_value_grad(params, params_old, group, cfg, want_grad: bool):
    """(mean clipped term over the group, its gradient, dropped flag)."""
    n = group.rewards.size
    grad = np.zeros(params.n_params) if want_grad else None
    if n == 0 or group.rewards.max() == 0:
        return 0.0, grad, True
    winners = group.rewards == group.rewards.max()
    lo, hi = 1.0 - cfg.clip_low, 1.0 + cfg.clip_high
    lr, la = _log_ratio_tables(params, params_old)
    n_factors = 1 if params.answer_is_frozen else 2
    x = group.prompt_id

    s1 = np.exp(lr[x, group.rationales])
    terms = np.minimum(s1, np.clip(s1, lo, hi))
    if la is not None:
        s2 = np.exp(la[group.rationales, group.answers])
        terms = terms + np.minimum(s2, np.clip(s2, lo, hi))
    value = float((terms[winners]).sum() / (n * n_factors))

    if want_grad:
        Y = params.spaces.num_rationales
        pi = params.rationale_probs()[x]
        coeff1 = np.where(winners & (s1 < hi), s1, 0.0) / (n * n_factors)
        wsum = np.bincount(group.rationales, weights=coeff1, minlength=Y)
        grad[params.rationale_rows_slice(x)] = wsum - coeff1.sum() * pi
        if la is not None:
            pz = params.answer_probs()
            coeff2 = np.where(winners & (s2 < hi), s2, 0.0) / (n * n_factors)
            base = params.spaces.num_prompts * Y
            Z = params.spaces.num_answers
            for j in np.nonzero(coeff2)[0]:
                y = group.rationales[j]
                row = -coeff2[j] * pz[y]
                row[group.answers[j]] += coeff2[j]
                grad[base + y * Z : base + (y + 1) * Z] += row
    return value, grad, False


def raftpp_pooled_objective(
    params: Params,
    params_old: Params,
    groups: Sequence[ResponseGroup],
    cfg: TrainerConfig,
) -> tuple[float, np.ndarray, int]:
    """Flat mean of the clipped term over all responses of non-dropped groups.

    Returns (value, gradient, dropped_group_count).  Per-prompt group sizes
    carry through, so budget reweighting shifts the gradient mass.
    """
    total = 0.0
    grad = np.zeros(params.n_params)
    dropped = 0
    n_resp = 0
    for group in groups:
        value, g, was_dropped = _raftpp_group_value_grad(params, params_old, group, cfg, True)
        if was_dropped:
            dropped += 1
            continue
        n = group.rewards.size
        total += value * n
        grad += g * n
        n_resp += n
    if n_resp == 0:
        return 0.0, grad, dropped
    return total / n_resp, grad / n_resp, dropped


def _raftpp_loop(params: Params, instances, cfg: TrainerConfig) -> TrainingRun:
    theta = params
    points = [_initial_point(theta, instances, cfg)]
    step = 0
    for t in range(cfg.epochs):
        theta_old = theta
        plan, _ = _epoch_plan(theta_old, instances, cfg, t)
        groups = []
        for i, inst in enumerate(instances):
            n_i = int(plan.budgets[i])
            if n_i == 0:
                continue
            rng = substream([cfg.seed, t], STREAM_ROLLOUT, i)
            groups.append(_sample_response_group(theta_old, inst, n_i, rng))
        accept_total = int(sum(g.rewards.sum() for g in groups))
        for r in range(cfg.steps_per_estep):
            _, grad, dropped = raftpp_pooled_objective(theta, theta_old, groups, cfg)
            theta = _step_params(theta, theta.to_vector() + cfg.learning_rate * grad, step, cfg, points)
            step += 1
            loss = _safe_loss(theta, instances)
            if not math.isfinite(loss):
                raise DivergenceError(step - 1, f"non-finite loss at step {step}",
                                      TrainingRun(cfg, tuple(points)))
            points.append(TrajectoryPoint(theta, RunMetrics(
                step=step, epoch=t, loss_exact=loss,
                elbo=_model.negative_elbo(theta, instances),
                accept_total=accept_total, budget_total=int(plan.budgets.sum()),
                var_trace=float("nan"), var_bound=float("nan"),
                alloc_kind=plan.kind, algorithm=cfg.algorithm,
                accuracy=_mean_gold_prob(theta, instances), dropped_groups=dropped,
            )))
    return TrainingRun(cfg, tuple(points))


# ---------------------------------------------------------------------------
# Group-relative policy optimization
# ---------------------------------------------------------------------------


def grpo_objective(
    params: Params,
    params_old: Params,
    ref_params: Params,
    groups: Sequence[GrpoGroup],
    cfg: TrainerConfig,
) -> tuple[float, np.ndarray]:
    """Mean clipped advantage surrogate minus the exact reference divergence.

    Per group: (1/group_size) sum over members of the per-factor mean of
    min(s A, clip(s, 1-clip_low, 1+clip_high) A), minus kl_coef times the
    exact KL of the current joint from the reference joint at that prompt.
    Returns (value, gradient); the value is to be ascended.
    """
    lo, hi = 1.0 - cfg.clip_low, 1.0 + cfg.clip_high
    lr, la = _log_ratio_tables(params, params_old)
    n_factors = 1 if params.answer_is_frozen else 2
    dim = params.n_params
    Y = params.spaces.num_rationales
    value = 0.0
    grad = np.zeros(dim)
    if not groups:
        return 0.0, grad
    for group in groups:
        x = group.prompt_id
        n = group.rewards.size
        adv = group.advantages
        pi = params.rationale_probs()[x]
        s1 = np.exp(lr[x, group.rationales])
        value += float(np.minimum(s1 * adv, np.clip(s1, lo, hi) * adv).sum()) / (n * n_factors)
        active1 = ((adv > 0) & (s1 < hi)) | ((adv < 0) & (s1 > lo))
        coeff1 = np.where(active1, adv * s1, 0.0) / (n * n_factors)
        wsum = np.bincount(group.rationales, weights=coeff1, minlength=Y)
        grad[params.rationale_rows_slice(x)] += wsum - coeff1.sum() * pi
        if la is not None:
            s2 = np.exp(la[group.rationales, group.answers])
            value += float(np.minimum(s2 * adv, np.clip(s2, lo, hi) * adv).sum()) / (n * n_factors)
            active2 = ((adv > 0) & (s2 < hi)) | ((adv < 0) & (s2 > lo))
            coeff2 = np.where(active2, adv * s2, 0.0) / (n * n_factors)
            pz = params.answer_probs()
            base = params.spaces.num_prompts * Y
            Z = params.spaces.num_answers
            for j in np.nonzero(coeff2)[0]:
                y = group.rationales[j]
                row = -coeff2[j] * pz[y]
                row[group.answers[j]] += coeff2[j]
                grad[base + y * Z : base + (y + 1) * Z] += row
        if cfg.kl_coef:
            value -= cfg.kl_coef * _model.joint_kl(params, ref_params, x)
            grad -= cfg.kl_coef * _model.joint_kl_grad(params, ref_params, x)
    return value / len(groups), grad / len(groups)


def sample_grpo_groups(
    params_old: Params,
    instances: Sequence[PromptInstance],
    cfg: TrainerConfig,
    rng_seed,
    plan: AllocationPlan | None = None,
) -> list[GrpoGroup]:
    """Fixed-size rollout groups; a budget plan replicates groups per prompt.

    With a plan, prompt i contributes ceil(n_i / group_size) groups; without,
    one group per prompt.
    """
    groups = []
    for i, inst in enumerate(instances):
        if plan is None:
            reps = 1
        else:
            n_i = int(plan.budgets[i])
            reps = int(np.ceil(n_i / cfg.group_size)) if n_i > 0 else 0
        for j in range(reps):
            rng = substream(rng_seed, STREAM_ROLLOUT, i, j)
            resp = _sample_response_group(params_old, inst, cfg.group_size, rng)
            groups.append(GrpoGroup(
                prompt_id=resp.prompt_id,
                rationales=resp.rationales,
                answers=resp.answers,
                rewards=resp.rewards,
                advantages=group_advantages(resp.rewards),
            ))
    return groups


def grpo_step(
    params: Params,
    params_old: Params,
    instances: Sequence[PromptInstance],
    cfg: TrainerConfig,
    rng_seed,
    plan: AllocationPlan | None = None,
    ref_params: Params | None = None,
) -> tuple[Params, RunMetrics]:
    """Sample groups under params_old and take one ascent step on the surrogate."""
    if cfg.group_size < 2:
        raise ValueError("group_size must be >= 2")
    ref = ref_params if ref_params is not None else params_old
    groups = sample_grpo_groups(params_old, instances, cfg, rng_seed, plan)
    _, grad = grpo_objective(params, params_old, ref, groups, cfg)
    new_vec = params.to_vector() + cfg.learning_rate * grad
    if not np.all(np.isfinite(new_vec)):
        raise DivergenceError(-1, "non-finite parameters in policy step")
    new_params = params.with_vector(new_vec)
    loss = _safe_loss(new_params, instances)
    degenerate = sum(1 for g in groups if g.rewards.size and g.rewards.std() == 0.0)
    metrics = RunMetrics(
        step=-1,
        epoch=-1,
        loss_exact=loss,
        elbo=_model.negative_elbo(new_params, instances) if math.isfinite(loss) else float("inf"),
        accept_total=int(sum(g.rewards.sum() for g in groups)),
        budget_total=int(sum(g.rewards.size for g in groups)),
        var_trace=float("nan"),
        var_bound=float("nan"),
        alloc_kind=plan.kind if plan is not None else "uniform",
        algorithm="grpo",
        accuracy=_mean_gold_prob(new_params, instances),
        dropped_groups=degenerate,
    )
    return new_params, metrics


def _grpo_loop(params: Params, instances, cfg: TrainerConfig) -> TrainingRun:
    theta = params
    ref = params  # reference policy frozen at the start
    points = [_initial_point(theta, instances, cfg)]
    step = 0
    for t in range(cfg.epochs):
        theta_old = theta
        plan, _ = _epoch_plan(theta_old, instances, cfg, t)
        for r in range(cfg.steps_per_estep):
            theta, metrics = grpo_step(
                theta, theta_old, instances, cfg, [cfg.seed, t, r], plan, ref
            )
            step += 1
            if not math.isfinite(metrics.loss_exact):
                raise DivergenceError(step - 1, f"non-finite loss at step {step}",
                                      TrainingRun(cfg, tuple(points)))
            points.append(TrajectoryPoint(theta, replace(metrics, step=step, epoch=t)))
    return TrainingRun(cfg, tuple(points))


# ---------------------------------------------------------------------------
# Convergence-theorem harness
# ---------------------------------------------------------------------------

THEOREM_MODES = ("smooth", "convex", "strongly-convex")


@dataclass(frozen=True)
class TheoremReport:
    mode: str
    status: str  # pass | fail | skipped-precondition
    lhs_mean: float
    lhs_se: float
    rhs: float
    delta1: float
    delta2: float
    delta3: float
    omega: float
    gamma: float
    strong_convexity: float
    eta: float
    k: int
    epochs: int
    n_runs: int
    detail: str = ""


def estimate_gamma(
    params: Params,
    instances: Sequence[PromptInstance],
    ridge: float = 0.0,
    n_points: int = 3,
    perturb_scale: float = 1.0,
    safety: float = 1.05,
    seed: int = 0,
) -> float:
    """Inverse smoothness 1/L of the per-sample losses, by numerical curvature.

    L is the largest Hessian eigenvalue of -ln P(y, z_i|x_i, theta) + ridge
    found over a panel of parameter points and (instance, rationale) pairs,
    inflated by `safety`.
    """
    from . import verify as _verify

    rng = np.random.default_rng(seed)
    vec0 = params.to_vector()
    points = [vec0] + [vec0 + rng.normal(scale=perturb_scale, size=vec0.size)
                       for _ in range(max(0, n_points - 1))]
    worst = 0.0
    for inst in instances:
        pi = params.rationale_probs()[inst.prompt]
        ys = {0, int(np.argmax(pi))}
        for y in ys:
            def grad_fn(v, inst=inst, y=y):
                p = params.with_vector(v)
                g = -_model.joint_log_prob_grad(p, inst.prompt, y, inst.gold_answer)
                return g + ridge * v

            for pt in points:
                worst = max(worst, _verify.estimate_max_curvature(grad_fn, pt, seed=seed))
    if worst <= 0:
        raise ValueError("curvature estimate is zero; cannot form a step-size bound")
    return 1.0 / (safety * worst)


def estimate_strong_convexity(
    params: Params,
    instances: Sequence[PromptInstance],
    ridge: float,
    seed: int = 0,
) -> float:
    """Smallest per-sample curvature over a probe panel (about the ridge value)."""
    from . import verify as _verify

    vec0 = params.to_vector()
    worst = float("inf")
    for inst in instances[: min(3, len(instances))]:
        def grad_fn(v, inst=inst):
            p = params.with_vector(v)
            g = -_model.joint_log_prob_grad(p, inst.prompt, 0, inst.gold_answer)
            return g + ridge * v

        est = _verify.estimate_min_curvature(grad_fn, vec0, seed=seed)
        worst = min(worst, est)
    return max(worst, 0.0)


def _harness_gradients(run: TrainingRun, instances):
    """Per-run exact frozen-posterior gradients and step variances, recomputed."""
    cfg = run.config
    k, T = cfg.steps_per_estep, cfg.epochs
    d1 = d2 = d3 = om = 0.0
    for t in range(T):
        start = run.points[t * k].params
        posteriors = [_model.exact_posterior(start, inst) for inst in instances]
        if cfg.allocation == "uniform":
            plan = _allocator.uniform_allocate(len(instances), cfg.total_budget)
        else:
            p, g = _sampler.oracle_rates_and_norms(start, instances, cfg.grad_reduction, cfg.grad_block)
            plan = _allocator.allocate((p, g), AllocatorConfig(cfg.total_budget, cfg.alpha, cfg.beta))
        running = np.zeros(run.points[0].params.n_params)
        for r in range(k):
            theta_r = run.points[t * k + r].params
            vec = theta_r.to_vector()
            grad = _model.surrogate_gradient(theta_r, instances, posteriors)
            if cfg.ridge:
                grad = grad + cfg.ridge * vec
            d1 += float(grad @ grad)
            running = running + grad
            d3 += float(running @ running)
            if not cfg.exact_gradients:
                om += _estimator.exact_step_variance(
                    theta_r, instances, plan.budgets, posteriors=posteriors
                )
        d2 += float(running @ running)
    return d1, d2, d3, om


def theorem_harness(
    runs: Sequence[TrainingRun],
    instances: Sequence[PromptInstance],
    mode: str,
    gamma: float | None = None,
    strong_convexity: float | None = None,
    se_slack: float = 2.0,
) -> TheoremReport:
    """Check the per-mode decrease bound against replicated trajectories.

    Expectations are approximated by run means; the check passes when the
    mean loss decrease is below the bound plus `se_slack` standard errors.
    Runs must use conditionally unbiased stochastic gradients: importance
    weighting, exact weight denominators, full batches, and a fresh buffer
    every M-step (or exact gradients, in which case the variance term is 0).
    """
    if mode not in THEOREM_MODES:
        raise ValueError(f"mode must be one of {THEOREM_MODES}, got {mode!r}")
    if not runs:
        raise ValueError("at least one run is required")
    cfg = runs[0].config
    for run in runs:
        if replace(run.config, seed=0) != replace(cfg, seed=0):
            raise ValueError("all runs must share a TrainerConfig (up to seed)")
    if not cfg.exact_gradients:
        ok = (
            cfg.weighting == "importance"
            and cfg.p_source == "oracle"
            and cfg.batch_fraction == 1.0
            and cfg.fresh_buffer_per_step
            and cfg.stats_source == "oracle"
            and cfg.algorithm == "em-sgd"
        )
        if not ok:
            raise ValueError(
                "theorem harness requires em-sgd runs with importance weighting, oracle "
                "p/stats, full batches and fresh buffers per step (or exact gradients)"
            )
    eta, k, T = cfg.learning_rate, cfg.steps_per_estep, cfg.epochs

    theta0 = runs[0].points[0].params
    if gamma is None:
        gamma = estimate_gamma(theta0, instances, ridge=cfg.ridge, seed=cfg.seed)
    H = strong_convexity
    if mode == "strongly-convex":
        if cfg.ridge <= 0:
            return TheoremReport(mode, "skipped-precondition", *(float("nan"),) * 7,
                                 gamma, 0.0, eta, k, T, len(runs),
                                 detail="strong convexity requires a ridge term")
        if H is None:
            H = estimate_strong_convexity(theta0, instances, cfg.ridge, seed=cfg.seed)
        if H <= 0:
            return TheoremReport(mode, "skipped-precondition", *(float("nan"),) * 7,
                                 gamma, 0.0, eta, k, T, len(runs),
                                 detail="estimated strong convexity is zero")
    else:
        H = 0.0

    tol = 1.0 + 1e-9
    if mode == "smooth":
        ok_eta = eta <= gamma * tol
    elif mode == "convex":
        ok_eta = eta <= gamma / 2.0 * tol
    else:
        ok_eta = eta <= min(gamma / 2.0, 1.0 / (4.0 * k * H)) * tol
    if not ok_eta:
        return TheoremReport(mode, "skipped-precondition", *(float("nan"),) * 7,
                             gamma, H, eta, k, T, len(runs),
                             detail=f"step size {eta} violates the mode precondition")

    lhs = []
    d1s, d2s, d3s, oms = [], [], [], []
    for run in runs:
        start = _ridge_loss(run.points[0].params, instances, cfg.ridge)
        end = _ridge_loss(run.points[-1].params, instances, cfg.ridge)
        lhs.append(end - start)
        d1, d2, d3, om = _harness_gradients(run, instances)
        d1s.append(d1)
        d2s.append(d2)
        d3s.append(d3)
        oms.append(om)
    lhs = np.asarray(lhs)
    lhs_mean = float(lhs.mean())
    lhs_se = float(lhs.std(ddof=1) / math.sqrt(lhs.size)) if lhs.size > 1 else 0.0
    delta1, delta2 = float(np.mean(d1s)), float(np.mean(d2s))
    delta3, omega = float(np.mean(d3s)), float(np.mean(oms))

    if mode == "smooth":
        rhs = -eta / 2.0 * delta1 + eta**2 / (2.0 * gamma) * omega
    elif mode == "convex":
        rhs = -eta / (2.0 * k) * delta2 - eta / (4.0 * k) * delta1 + eta / (4.0 * k) * omega
    else:
        rhs = (
            -H * eta**2 / (2.0 * k) * delta3
            - eta / (4.0 * k) * delta1
            + eta / (8.0 * k) * omega
        )
    status = "pass" if lhs_mean <= rhs + se_slack * lhs_se else "fail"
    return TheoremReport(
        mode, status, lhs_mean, lhs_se, rhs, delta1, delta2, delta3, omega,
        gamma, H, eta, k, T, len(runs),
    )


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------


def metrics_to_csv(run: TrainingRun, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_CSV_HEADER)
        for point in run.points:
            m = point.metrics
            writer.writerow([
                m.step, m.epoch, repr(m.loss_exact), repr(m.elbo), m.accept_total,
                m.budget_total, repr(m.var_trace), repr(m.var_bound), m.alloc_kind,
                m.algorithm,
            ])


def steps_to_target(run: TrainingRun, target_loss: float) -> int | None:
    """First update step whose exact loss is at or below the target, else None."""
    for point in run.points:
        if point.metrics.step > 0 and point.metrics.loss_exact <= target_loss:
            return point.metrics.step
    return None
