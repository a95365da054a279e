"""Estimator checks: unbiasedness vs enumeration, minibatching, variance."""

import numpy as np
import pytest

from gvmlab import allocator as A
from gvmlab import estimator as E
from gvmlab import model as M
from gvmlab import sampler as S
from gvmlab import verify as V

from conftest import make_frozen, make_stochastic


def oracle_plan(params, instances, total_budget, alpha=0.001, beta=2.0):
    p, g = S.oracle_rates_and_norms(params, instances)
    return A.allocate((p, g), A.AllocatorConfig(total_budget, alpha, beta))


class TestEstimateGradient:
    def test_weights_collapse_when_p_is_one(self):
        # all accept rates 1, equal budgets: importance weights become 1/n
        spaces = M.Spaces(2, 3, 2)
        params = M.init_params(spaces, answer_map=[0, 0, 0], kind="seeded-gaussian", seed=1)
        instances = [M.PromptInstance(0, 0), M.PromptInstance(1, 0)]
        plan = A.uniform_allocate(2, 16)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle", rng_seed=3)
        imp = E.estimate_gradient(params, buf, instances, "importance")
        mean = E.estimate_gradient(params, buf, instances, "mean-accepted")
        np.testing.assert_allclose(imp.grad, mean.grad, atol=1e-14)

    def test_empty_buffer_gives_zero_vector(self):
        params, instances = make_frozen(seed=2)
        plan = A.AllocationPlan(
            weights=np.zeros(len(instances)),
            budgets=np.zeros(len(instances), dtype=np.int64),
            lower_bound_accepted=0.0,
        )
        buf = S.fill_buffer(params, instances, plan, p_source="oracle")
        est = E.estimate_gradient(params, buf, instances)
        np.testing.assert_array_equal(est.grad, np.zeros(params.n_params))

    def test_grad_is_negative_mean_of_terms(self):
        params, instances = make_frozen(seed=3)
        plan = oracle_plan(params, instances, 40)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle", rng_seed=9)
        est = E.estimate_gradient(params, buf, instances)
        np.testing.assert_array_equal(
            est.grad, -est.per_prompt_terms.sum(axis=0) / len(instances)
        )

    def test_term_matches_hand_formula(self):
        params, instances = make_frozen(seed=4)
        plan = oracle_plan(params, instances, 32)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle", rng_seed=4)
        est = E.estimate_gradient(params, buf, instances)
        i = 0
        entry = buf.entries[i]
        expected = entry.weight * sum(
            (M.joint_log_prob_grad(params, instances[i].prompt, int(y), instances[i].gold_answer)
             for y in entry.accepted),
            np.zeros(params.n_params),
        )
        np.testing.assert_allclose(est.per_prompt_terms[i], expected, atol=1e-12)

    @pytest.mark.parametrize("maker,seed", [(make_frozen, 5), (make_stochastic, 6)])
    def test_replication_mean_matches_exact_gradient(self, maker, seed):
        params, instances = maker(seed=seed)
        plan = oracle_plan(params, instances, 12 * len(instances))
        R = 20_000
        ests = E.replicate_estimates(params, instances, plan, R, seed)
        exact = M.exact_elbo_gradient(params, instances)
        mean = ests.mean(axis=0)
        se = ests.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(mean - exact) <= 4.0 * se + 1e-12)

    def test_fast_path_agrees_with_fill_buffer_path(self):
        params, instances = make_frozen(seed=7)
        plan = oracle_plan(params, instances, 30)
        R = 4000
        fast = E.replicate_estimates(params, instances, plan, R, 11)
        slow = E.replicate_estimates(params, instances, plan, R, 12, use_fill_buffer=True)
        # estimator laws coincide: means within 4 SE of the difference
        se = np.sqrt(fast.var(0, ddof=1) / R + slow.var(0, ddof=1) / R)
        assert np.all(np.abs(fast.mean(0) - slow.mean(0)) <= 4.0 * se + 1e-12)
        # second moments within 5 sigma too (variance of variance via 4th moments)
        assert np.allclose(fast.var(0), slow.var(0), rtol=0.25, atol=1e-6)

    def test_mean_accepted_weighting_fast_path_agrees(self):
        params, instances = make_frozen(seed=8)
        plan = oracle_plan(params, instances, 24)
        R = 4000
        fast = E.replicate_estimates(params, instances, plan, R, 13, weighting="mean-accepted")
        slow = np.empty_like(fast[:2000])
        for r in range(2000):
            buf = S.fill_buffer(params, instances, plan, "oracle", [14, r])
            slow[r] = E.estimate_gradient(params, buf, instances, "mean-accepted").grad
        se = np.sqrt(fast.var(0, ddof=1) / R + slow.var(0, ddof=1) / 2000)
        assert np.all(np.abs(fast.mean(0) - slow.mean(0)) <= 4.5 * se + 1e-12)


class TestMinibatchGradient:
    def test_full_fraction_identical_to_full_buffer(self):
        params, instances = make_frozen(seed=9)
        plan = oracle_plan(params, instances, 40)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle", rng_seed=5)
        full = E.estimate_gradient(params, buf, instances)
        mb = E.minibatch_gradient(params, buf, instances, 1.0, 99)
        np.testing.assert_array_equal(full.grad, mb.grad)

    def test_single_item_prompt_returns_its_weighted_gradient(self):
        spaces = M.Spaces(1, 4, 4)
        params = M.init_params(spaces, answer_map=[0, 1, 2, 3], kind="seeded-gaussian", seed=2)
        inst = M.PromptInstance(0, 1)
        entry = S.BufferEntry(0, np.array([1]), budget_used=6, weight=0.5, p_value=1 / 3, p_source="oracle")
        buf = S.ReplayBuffer((entry,))
        est = E.minibatch_gradient(params, buf, [inst], 0.4, 7)
        # one accepted item: the batch is the whole list, rescale factor 1
        expected = -0.5 * M.joint_log_prob_grad(params, 0, 1, 1)
        np.testing.assert_allclose(est.grad, expected, atol=1e-14)

    def test_minibatch_mean_matches_full_buffer_gradient(self):
        params, instances = make_frozen(seed=10)
        plan = oracle_plan(params, instances, 60)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle", rng_seed=21)
        full = E.estimate_gradient(params, buf, instances).grad
        R = 20_000
        draws = np.stack([
            E.minibatch_gradient(params, buf, instances, 0.5, [31, r]).grad for r in range(R)
        ])
        se = draws.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(draws.mean(axis=0) - full) <= 4.0 * se + 1e-12)

    def test_fraction_validation(self):
        params, instances = make_frozen()
        plan = oracle_plan(params, instances, 16)
        buf = S.fill_buffer(params, instances, plan, p_source="oracle")
        with pytest.raises(ValueError):
            E.minibatch_gradient(params, buf, instances, 0.0, 1)


class TestVarianceReport:
    def test_deterministic_setting_zero_variance(self):
        # single rationale per prompt: accept rate 1 and a point posterior
        spaces = M.Spaces(2, 1, 2)
        params = M.init_params(spaces, answer_map=[0])
        instances = [M.PromptInstance(0, 0), M.PromptInstance(1, 0)]
        plan = A.uniform_allocate(2, 10)
        rep = E.variance_report(params, instances, plan, 200, 3)
        assert rep.empirical_trace_var == 0.0

    def test_empirical_below_bound_with_slack(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            params, instances = make_frozen(seed=int(rng.integers(1000)))
            plan = oracle_plan(params, instances, 10 * len(instances))
            R = 2000
            rep = E.variance_report(params, instances, plan, R, trial)
            assert rep.empirical_trace_var <= rep.bound_value * (1.0 + 4.0 / np.sqrt(R))

    def test_exact_step_variance_matches_replications(self):
        params, instances = make_frozen(seed=12)
        plan = oracle_plan(params, instances, 36)
        exact = E.exact_step_variance(params, instances, plan.budgets)
        rep = E.variance_report(params, instances, plan, 20_000, 5)
        assert rep.empirical_trace_var == pytest.approx(exact, rel=0.05)
        assert exact <= rep.bound_value

    def test_gvm_bound_below_uniform_bound(self):
        params, instances = make_frozen(num_prompts=8, seed=13)
        N = 64
        gvm = oracle_plan(params, instances, N)
        uni = A.uniform_allocate(len(instances), N)
        b_gvm = E.exact_variance_bound(params, instances, gvm.budgets)
        b_uni = E.exact_variance_bound(params, instances, uni.budgets)
        assert b_gvm <= b_uni

    def test_report_json_fields(self, tmp_path):
        params, instances = make_frozen(seed=14)
        plan = oracle_plan(params, instances, 20)
        rep = E.variance_report(params, instances, plan, 50, 1)
        doc = E.variance_report_to_json(rep, tmp_path / "var.json")
        assert set(doc) == {
            "schema_version", "empirical_trace_var", "bound_value", "replications", "plan_kind",
        }
        assert doc["plan_kind"] == "gvm"
