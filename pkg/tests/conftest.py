"""Shared fixture builders: seeded tabular instances of known shape."""

import numpy as np
import pytest

from gvmlab import model as M


def make_frozen(num_prompts=4, num_rationales=8, num_answers=4, seed=5, scale=1.0):
    """Seeded model with a deterministic answer map y -> y mod |Z|."""
    spaces = M.Spaces(num_prompts, num_rationales, num_answers)
    amap = np.arange(num_rationales) % num_answers
    params = M.init_params(spaces, answer_map=amap, kind="seeded-gaussian", seed=seed, scale=scale)
    rng = np.random.default_rng(seed + 1000)
    instances = [
        M.PromptInstance(x, int(rng.integers(num_answers))) for x in range(num_prompts)
    ]
    return params, instances


def make_stochastic(num_prompts=3, num_rationales=5, num_answers=3, seed=7, scale=0.8):
    """Seeded model with a trainable (softmax) answer channel."""
    spaces = M.Spaces(num_prompts, num_rationales, num_answers)
    params = M.init_params(spaces, kind="seeded-gaussian", seed=seed, scale=scale)
    rng = np.random.default_rng(seed + 1000)
    instances = [
        M.PromptInstance(x, int(rng.integers(num_answers))) for x in range(num_prompts)
    ]
    return params, instances


def make_heterogeneous(n_easy=5, n_hard=5, p_easy=0.9, p_hard=0.05, seed=0):
    """The canonical speedup fixture: easy prompts near-solved, hard ones not.

    |Y| = 8 rationales map onto |Z| = 4 answers (two correct rationales per
    gold answer); logits are set so the accept rate is p_easy / p_hard
    exactly, plus a little seeded jitter on the non-gold entries.
    """
    m = n_easy + n_hard
    spaces = M.Spaces(m, 8, 4)
    amap = np.arange(8) % 4
    rng = np.random.default_rng(seed)
    logits = np.zeros((m, 8))
    instances = []
    for i in range(m):
        gold = int(rng.integers(4))
        target_p = p_easy if i < n_easy else p_hard
        # two correct rationales with a shared logit c, six wrong ones at 0:
        # p = 2 e^c / (2 e^c + 6)  =>  e^c = 3 p / (1 - p)
        c = np.log(3.0 * target_p / (1.0 - target_p))
        correct = np.nonzero(amap == gold)[0]
        logits[i, correct] = c
        instances.append(M.PromptInstance(i, gold))
    params = M.Params(spaces, logits, answer_map=amap)
    return params, instances


@pytest.fixture
def frozen_model():
    return make_frozen()


@pytest.fixture
def stochastic_model():
    return make_stochastic()
