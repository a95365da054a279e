"""Tabular factorized model over finite prompt/rationale/answer spaces.

A model is a pair of conditionals P(y|x, theta) and P(z|y, theta): the
rationale channel is always a row-softmax over logits, the answer channel is
either a second row-softmax or a frozen deterministic map z = f(y).  Because
the spaces are small everything downstream (posteriors, marginal likelihood,
gradients) is computed by exact enumeration here; sampled estimators live in
other modules and are checked against these closed forms.

All arithmetic is done in the log domain; probabilities are materialized only
at interfaces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_PROMPTS = 1024
MAX_RATIONALES = 256
MAX_ANSWERS = 64

# Norms/gradients can be restricted to one factor's block, or use both.
GRAD_BLOCKS = ("all", "rationale", "answer")
REDUCTIONS = ("sum", "mean")


class InfeasibleInstanceError(ValueError):
    """No rationale gives the gold answer positive probability."""


@dataclass(frozen=True)
class Spaces:
    """Sizes of the finite prompt/rationale/answer sets; indices are dense."""

    num_prompts: int
    num_rationales: int
    num_answers: int

    def __post_init__(self):
        if not (1 <= self.num_prompts <= MAX_PROMPTS):
            raise ValueError(f"num_prompts must be in [1, {MAX_PROMPTS}], got {self.num_prompts}")
        if not (1 <= self.num_rationales <= MAX_RATIONALES):
            raise ValueError(
                f"num_rationales must be in [1, {MAX_RATIONALES}], got {self.num_rationales}"
            )
        if not (1 <= self.num_answers <= MAX_ANSWERS):
            raise ValueError(f"num_answers must be in [1, {MAX_ANSWERS}], got {self.num_answers}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Params:
    """Model parameters. Immutable; updates produce new values.

    Exactly one of `answer_logits` / `answer_map` is set.  With `answer_map`
    the answer channel is the frozen point mass z = map[y] and contributes no
    trainable parameters; with `answer_logits` it is a trainable row-softmax.
    """

    spaces: Spaces
    rationale_logits: np.ndarray  # (|X|, |Y|)
    answer_logits: np.ndarray | None = None  # (|Y|, |Z|)
    answer_map: np.ndarray | None = None  # (|Y|,) ints

    def __post_init__(self):
        X, Y, Z = self.spaces.num_prompts, self.spaces.num_rationales, self.spaces.num_answers
        rl = _readonly(self.rationale_logits)
        if rl.shape != (X, Y):
            raise ValueError(f"rationale_logits must have shape {(X, Y)}, got {rl.shape}")
        if not np.all(np.isfinite(rl)):
            raise ValueError("rationale_logits must be finite")
        object.__setattr__(self, "rationale_logits", rl)
        if (self.answer_logits is None) == (self.answer_map is None):
            raise ValueError("exactly one of answer_logits / answer_map must be given")
        if self.answer_logits is not None:
            al = _readonly(self.answer_logits)
            if al.shape != (Y, Z):
                raise ValueError(f"answer_logits must have shape {(Y, Z)}, got {al.shape}")
            if not np.all(np.isfinite(al)):
                raise ValueError("answer_logits must be finite")
            object.__setattr__(self, "answer_logits", al)
        else:
            am = np.asarray(self.answer_map, dtype=np.int64)
            if am.shape != (Y,):
                raise ValueError(f"answer_map must have shape {(Y,)}, got {am.shape}")
            if am.min() < 0 or am.max() >= Z:
                raise ValueError("answer_map entries must index the answer space")
            am.setflags(write=False)
            object.__setattr__(self, "answer_map", am)

    # -- distributions ----------------------------------------------------

    @property
    def answer_is_frozen(self) -> bool:
        return self.answer_map is not None

    def rationale_log_probs(self) -> np.ndarray:
        """(|X|, |Y|) matrix of ln P(y|x)."""
        return _log_softmax(self.rationale_logits)

    def rationale_probs(self) -> np.ndarray:
        return np.exp(self.rationale_log_probs())

    def answer_probs(self) -> np.ndarray:
        """(|Y|, |Z|) matrix of P(z|y); indicator rows under a frozen map."""
        Y, Z = self.spaces.num_rationales, self.spaces.num_answers
        if self.answer_is_frozen:
            probs = np.zeros((Y, Z))
            probs[np.arange(Y), self.answer_map] = 1.0
            return probs
        return np.exp(_log_softmax(self.answer_logits))

    def answer_log_probs(self) -> np.ndarray:
        """(|Y|, |Z|) matrix of ln P(z|y); -inf entries under a frozen map."""
        if self.answer_is_frozen:
            with np.errstate(divide="ignore"):
                return np.log(self.answer_probs())
        return _log_softmax(self.answer_logits)

    # -- flat parameter vector --------------------------------------------

    @property
    def n_params(self) -> int:
        n = self.rationale_logits.size
        if not self.answer_is_frozen:
            n += self.answer_logits.size
        return n

    def to_vector(self) -> np.ndarray:
        if self.answer_is_frozen:
            return self.rationale_logits.ravel().copy()
        return np.concatenate([self.rationale_logits.ravel(), self.answer_logits.ravel()])

    def with_vector(self, vec: np.ndarray) -> "Params":
        """New Params with logits taken from a flat vector (same layout as to_vector)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected vector of length {self.n_params}, got {vec.shape}")
        X, Y = self.spaces.num_prompts, self.spaces.num_rationales
        rl = vec[: X * Y].reshape(X, Y)
        if self.answer_is_frozen:
            return Params(self.spaces, rl, answer_map=self.answer_map)
        al = vec[X * Y :].reshape(Y, self.spaces.num_answers)
        return Params(self.spaces, rl, answer_logits=al)

    def rationale_rows_slice(self, x: int) -> slice:
        """Slice of the flat vector holding rationale-logits row x."""
        Y = self.spaces.num_rationales
        return slice(x * Y, (x + 1) * Y)

    def answer_rows_slice(self, y: int) -> slice:
        """Slice of the flat vector holding answer-logits row y (stochastic channel only)."""
        if self.answer_is_frozen:
            raise ValueError("frozen answer channel has no answer-logits block")
        X, Y, Z = self.spaces.num_prompts, self.spaces.num_rationales, self.spaces.num_answers
        base = X * Y
        return slice(base + y * Z, base + (y + 1) * Z)


@dataclass(frozen=True)
class PromptInstance:
    """A (prompt, gold answer) training pair."""

    prompt: int
    gold_answer: int


@dataclass(frozen=True)
class PosteriorTable:
    """Posterior over rationales given (prompt, gold answer) plus its normalizer."""

    probs: np.ndarray  # (|Y|,)
    normalizer: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_instance(params: Params, inst: PromptInstance) -> None:
    s = params.spaces
    if not (0 <= inst.prompt < s.num_prompts):
        raise ValueError(f"prompt index {inst.prompt} out of range [0, {s.num_prompts})")
    if not (0 <= inst.gold_answer < s.num_answers):
        raise ValueError(f"answer index {inst.gold_answer} out of range [0, {s.num_answers})")


def _check_indices(params: Params, x: int, y: int, z: int) -> None:
    s = params.spaces
    if not (0 <= x < s.num_prompts and 0 <= y < s.num_rationales and 0 <= z < s.num_answers):
        raise ValueError(f"indices ({x}, {y}, {z}) out of range for spaces {s}")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def joint_log_prob(params: Params, x: int, y: int, z: int) -> float:
    """ln P(y, z | x) = ln P(y|x) + ln P(z|y). -inf when a frozen map excludes z."""
    _check_indices(params, x, y, z)
    return float(params.rationale_log_probs()[x, y] + params.answer_log_probs()[y, z])


def exact_accept_rate(params: Params, inst: PromptInstance) -> float:
    """Probability that a policy-sampled rationale yields the gold answer.

    Equals the posterior normalizer: sum_y P(y|x) P(z|y).
    """
    _check_instance(params, inst)
    pi = params.rationale_probs()[inst.prompt]
    a = params.answer_probs()[:, inst.gold_answer]
    return float(pi @ a)


def exact_posterior(params: Params, inst: PromptInstance) -> PosteriorTable:
    """Posterior over rationales given the gold answer, by direct normalization."""
    _check_instance(params, inst)
    log_pi = params.rationale_log_probs()[inst.prompt]
    log_a = params.answer_log_probs()[:, inst.gold_answer]
    log_unnorm = log_pi + log_a
    finite = np.isfinite(log_unnorm)
    if not finite.any():
        raise InfeasibleInstanceError(
            f"instance (prompt={inst.prompt}, gold_answer={inst.gold_answer}) has zero "
            "posterior mass"
        )
    hi = log_unnorm[finite].max()
    unnorm = np.where(finite, np.exp(log_unnorm - hi), 0.0)
    total = unnorm.sum()
    probs = unnorm / total
    return PosteriorTable(probs=_readonly(probs), normalizer=float(np.exp(hi) * total))


def exact_marginal_nll(params: Params, instances: Sequence[PromptInstance]) -> float:
    """Mean negative log-probability of the gold answers: -(1/m) sum_i ln P(z_i|x_i)."""
    if not instances:
        raise ValueError("instances must be non-empty")
    total = 0.0
    for inst in instances:
        z = exact_accept_rate(params, inst)
        if z <= 0.0:
            raise InfeasibleInstanceError(
                f"instance (prompt={inst.prompt}, gold_answer={inst.gold_answer}) has zero "
                "marginal probability"
            )
        total += np.log(z)
    return -total / len(instances)


def joint_log_prob_grad(params: Params, x: int, y: int, z: int) -> np.ndarray:
    """Gradient of ln P(y, z|x) w.r.t. the flat parameter vector.

    Softmax rows give one-hot-minus-probability gradients; the two factor
    blocks are disjoint.  A frozen answer channel contributes nothing.
    """
    _check_indices(params, x, y, z)
    g = np.zeros(params.n_params)
    pi = params.rationale_probs()[x]
    gy = -pi
    gy[y] += 1.0
    g[params.rationale_rows_slice(x)] = gy
    if not params.answer_is_frozen:
        pz = params.answer_probs()[y]
        gz = -pz
        gz[z] += 1.0
        g[params.answer_rows_slice(y)] = gz
    return g


def per_sample_grad_norm(
    params: Params,
    x: int,
    y: int,
    z: int,
    reduction: str = "sum",
    block: str = "all",
) -> float:
    """L2 norm of the per-sample log-likelihood gradient.

    `reduction` controls how the two factor gradients are combined before
    taking the norm: "sum" uses grad(ln P(y|x)) + grad(ln P(z|y)) (the true
    joint gradient), "mean" divides the combined vector by the number of
    trainable factors.  `block` optionally restricts to one factor's block.
    """
    return float(grad_norm_table(params, PromptInstance(x, z), reduction, block)[y])


def grad_norm_table(
    params: Params,
    inst: PromptInstance,
    reduction: str = "sum",
    block: str = "all",
) -> np.ndarray:
    """Per-rationale gradient norms ||grad ln P(y, z_i|x_i)|| for every y.

    Uses ||e_y - pi||^2 = 1 - 2 pi_y + ||pi||^2 per softmax row, so the table
    costs O(|Y| + |Z|) instead of materializing full gradient vectors.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if block not in GRAD_BLOCKS:
        raise ValueError(f"block must be one of {GRAD_BLOCKS}, got {block!r}")
    _check_instance(params, inst)
    pi = params.rationale_probs()[inst.prompt]
    rat_sq = 1.0 - 2.0 * pi + float(pi @ pi)  # (|Y|,)
    if params.answer_is_frozen:
        ans_sq = np.zeros_like(rat_sq)
        n_factors = 1
    else:
        pz = params.answer_probs()
        ans_sq = 1.0 - 2.0 * pz[:, inst.gold_answer] + np.einsum("yz,yz->y", pz, pz)
        n_factors = 2
    if block == "rationale":
        sq = rat_sq
    elif block == "answer":
        sq = ans_sq
    else:
        sq = rat_sq + ans_sq
    if reduction == "mean":
        sq = sq / float(n_factors**2)
    return np.sqrt(np.maximum(sq, 0.0))


# ---------------------------------------------------------------------------
# Frozen-posterior surrogate objective (the M-step target) and the ELBO
# ---------------------------------------------------------------------------


def surrogate_objective(
    params: Params,
    instances: Sequence[PromptInstance],
    posteriors: Sequence[PosteriorTable],
) -> float:
    """-(1/m) sum_i E_{y~Q_i} ln P(y, z_i|x_i, theta), with Q frozen.

    Posterior entries with zero probability contribute nothing even when the
    corresponding joint log-probability is -inf (0 * -inf := 0 here).
    """
    if len(instances) != len(posteriors):
        raise ValueError("instances and posteriors must align")
    log_pi = params.rationale_log_probs()
    log_a = params.answer_log_probs()
    total = 0.0
    for inst, post in zip(instances, posteriors):
        lp = log_pi[inst.prompt] + log_a[:, inst.gold_answer]
        q = post.probs
        mask = q > 0.0
        if np.any(~np.isfinite(lp[mask])):
            return float("inf")
        total += float(q[mask] @ lp[mask])
    return -total / len(instances)


def surrogate_gradient(
    params: Params,
    instances: Sequence[PromptInstance],
    posteriors: Sequence[PosteriorTable],
) -> np.ndarray:
    """Gradient of surrogate_objective w.r.t. the flat parameter vector."""
    if len(instances) != len(posteriors):
        raise ValueError("instances and posteriors must align")
    m = len(instances)
    g = np.zeros(params.n_params)
    pi = params.rationale_probs()
    pz = None if params.answer_is_frozen else params.answer_probs()
    for inst, post in zip(instances, posteriors):
        q = post.probs
        g[params.rationale_rows_slice(inst.prompt)] -= q - pi[inst.prompt]
        if pz is not None:
            # row y of the answer block receives q_y * (e_{z_i} - P(.|y))
            block = -q[:, None] * pz
            block[:, inst.gold_answer] += q
            Y, Z = pz.shape
            base = params.spaces.num_prompts * params.spaces.num_rationales
            g[base : base + Y * Z] -= block.ravel()
    return g / m


def exact_elbo_gradient(params: Params, instances: Sequence[PromptInstance]) -> np.ndarray:
    """Exact gradient of the frozen-posterior objective, posterior taken at `params`.

    By the standard latent-variable identity this equals the gradient of the
    marginal NLL at the same point.
    """
    posteriors = [exact_posterior(params, inst) for inst in instances]
    return surrogate_gradient(params, instances, posteriors)


def posterior_entropy(post: PosteriorTable) -> float:
    q = post.probs
    mask = q > 0.0
    return float(-(q[mask] @ np.log(q[mask])))


def negative_elbo(
    params: Params,
    instances: Sequence[PromptInstance],
    posteriors: Sequence[PosteriorTable] | None = None,
) -> float:
    """Upper bound on the marginal NLL: surrogate minus mean posterior entropy.

    With posteriors computed at `params` itself the bound is tight and this
    returns exact_marginal_nll up to roundoff.
    """
    if posteriors is None:
        posteriors = [exact_posterior(params, inst) for inst in instances]
    ent = sum(posterior_entropy(p) for p in posteriors) / len(instances)
    return surrogate_objective(params, instances, posteriors) - ent


# ---------------------------------------------------------------------------
# Exact divergences (used by the GRPO trainer's reference penalty)
# ---------------------------------------------------------------------------


def joint_kl(params: Params, ref: Params, prompt: int) -> float:
    """KL( P_params(y, z|x) || P_ref(y, z|x) ) for one prompt, by enumeration."""
    if params.answer_is_frozen != ref.answer_is_frozen:
        raise ValueError("params and ref must share the answer-channel kind")
    lp = params.rationale_log_probs()[prompt]
    lr = ref.rationale_log_probs()[prompt]
    pi = np.exp(lp)
    kl = float(pi @ (lp - lr))
    if not params.answer_is_frozen:
        la, lb = params.answer_log_probs(), ref.answer_log_probs()
        per_y = np.einsum("yz,yz->y", np.exp(la), la - lb)
        kl += float(pi @ per_y)
    elif not np.array_equal(params.answer_map, ref.answer_map):
        raise ValueError("frozen answer maps must match for a finite divergence")
    return kl


def joint_kl_grad(params: Params, ref: Params, prompt: int) -> np.ndarray:
    """Gradient of joint_kl w.r.t. params' flat vector.

    For a softmax row with probabilities pi and per-outcome scores b_y,
    d/dl_j sum_y pi_y b_y-style terms collapse to pi_j (b_j - sum pi b).
    """
    g = np.zeros(params.n_params)
    lp = params.rationale_log_probs()[prompt]
    lr = ref.rationale_log_probs()[prompt]
    pi = np.exp(lp)
    a = lp - lr
    if params.answer_is_frozen:
        b = a
    else:
        la, lb = params.answer_log_probs(), ref.answer_log_probs()
        pa = np.exp(la)
        kl_z = np.einsum("yz,yz->y", pa, la - lb)
        b = a + kl_z
    total = float(pi @ b)
    g[params.rationale_rows_slice(prompt)] = pi * (b - total)
    if not params.answer_is_frozen:
        for y in range(params.spaces.num_rationales):
            row = pa[y] * ((la[y] - lb[y]) - kl_z[y])
            g[params.answer_rows_slice(y)] = pi[y] * row
    return g


# ---------------------------------------------------------------------------
# Construction helpers and the model-definition file format
# ---------------------------------------------------------------------------


def init_params(
    spaces: Spaces,
    answer_map: Sequence[int] | None = None,
    kind: str = "uniform",
    seed: int = 0,
    scale: float = 1.0,
) -> Params:
    """Build Params with uniform (zero) or seeded-Gaussian logits.

    `answer_map=None` gives a stochastic (trainable) answer channel.
    """
    X, Y, Z = spaces.num_prompts, spaces.num_rationales, spaces.num_answers
    if kind == "uniform":
        rl = np.zeros((X, Y))
        al = None if answer_map is not None else np.zeros((Y, Z))
    elif kind == "seeded-gaussian":
        rng = np.random.default_rng(seed)
        rl = rng.normal(scale=scale, size=(X, Y))
        al = None if answer_map is not None else rng.normal(scale=scale, size=(Y, Z))
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    if answer_map is not None:
        return Params(spaces, rl, answer_map=np.asarray(answer_map, dtype=np.int64))
    return Params(spaces, rl, answer_logits=al)


def model_from_spec(spec: dict) -> Params:
    """Build Params from the model-definition mapping.

    Expected shape::

        {"spaces": {"num_prompts": ..., "num_rationales": ..., "num_answers": ...},
         "answer_map": [ints] | "stochastic",
         "init": {"kind": "uniform"|"seeded-gaussian", "seed": int, "scale": float}}
    """
    try:
        sp = spec["spaces"]
        spaces = Spaces(int(sp["num_prompts"]), int(sp["num_rationales"]), int(sp["num_answers"]))
    except KeyError as e:
        raise ValueError(f"model spec missing field: spaces.{e.args[0]}") from None
    answer_map = spec.get("answer_map", "stochastic")
    if answer_map == "stochastic":
        amap = None
    else:
        amap = np.asarray(answer_map, dtype=np.int64)
    init = spec.get("init", {})
    return init_params(
        spaces,
        answer_map=amap,
        kind=init.get("kind", "uniform"),
        seed=int(init.get("seed", 0)),
        scale=float(init.get("scale", 1.0)),
    )


def load_model_file(path: str | Path) -> Params:
    with open(path) as f:
        return model_from_spec(json.load(f))
