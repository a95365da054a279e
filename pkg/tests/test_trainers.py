"""Trainer checks: EM loop behavior, clipped objectives, theorem harness."""

import dataclasses
import io

import numpy as np
import pytest

from gvmlab import model as M
from gvmlab import trainers as T
from gvmlab import verify as V

from conftest import make_frozen, make_heterogeneous, make_stochastic


def run_csv_bytes(run, tmp_path, name):
    path = tmp_path / name
    T.metrics_to_csv(run, path)
    return path.read_bytes()


class TestConfigValidation:
    def test_grpo_needs_group_of_two(self):
        with pytest.raises(ValueError, match="group_size"):
            T.TrainerConfig(algorithm="grpo", group_size=1)

    def test_clip_bounds(self):
        with pytest.raises(ValueError):
            T.TrainerConfig(clip_low=1.0)
        with pytest.raises(ValueError):
            T.TrainerConfig(clip_high=0.0)

    def test_bad_enum_values(self):
        with pytest.raises(ValueError):
            T.TrainerConfig(algorithm="ppo")
        with pytest.raises(ValueError):
            T.TrainerConfig(allocation="greedy")
        with pytest.raises(ValueError):
            T.TrainerConfig(batch_fraction=0.0)


class TestEmTrain:
    def test_exact_gradient_loss_monotone(self):
        params, insts = make_frozen(num_prompts=5, seed=23)
        gamma = T.estimate_gamma(params, insts)
        cfg = T.TrainerConfig(
            algorithm="em-sgd", epochs=40, steps_per_estep=1, learning_rate=gamma,
            exact_gradients=True, allocation="uniform", seed=0,
        )
        run = T.em_train(params, insts, cfg)
        losses = [p.metrics.loss_exact for p in run.points]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_stationary_at_optimum(self):
        spaces = M.Spaces(2, 4, 2)
        logits = np.zeros((2, 4))
        logits[0, :2] = 40.0
        logits[1, 2:] = 40.0
        params = M.Params(spaces, logits, answer_map=np.array([0, 0, 1, 1]))
        insts = [M.PromptInstance(0, 0), M.PromptInstance(1, 1)]
        cfg = T.TrainerConfig(
            algorithm="em-sgd", epochs=3, steps_per_estep=2, learning_rate=0.5,
            exact_gradients=True, allocation="uniform", seed=0,
        )
        run = T.em_train(params, insts, cfg)
        for point in run.points:
            assert np.abs(point.params.to_vector() - params.to_vector()).max() < 1e-8

    def test_elbo_sandwich_along_run(self):
        params, insts = make_frozen(num_prompts=4, seed=29)
        cfg = T.TrainerConfig(
            algorithm="em-sgd", epochs=4, steps_per_estep=5, learning_rate=0.4,
            probe_size=64, total_budget=64, seed=5,
        )
        run = T.em_train(params, insts, cfg)
        for point in run.points:
            m = point.metrics
            assert m.elbo >= m.loss_exact - 1e-10
        # tightness at each E-step start: the first flight of each epoch starts
        # from a fresh posterior, checked directly
        nll = M.exact_marginal_nll(run.points[5].params, insts)
        assert M.negative_elbo(run.points[5].params, insts) == pytest.approx(nll, abs=1e-10)

    def test_bit_identical_metrics_for_same_seed(self, tmp_path):
        params, insts = make_frozen(num_prompts=4, seed=31)
        cfg = T.TrainerConfig(
            algorithm="em-sgd", epochs=3, steps_per_estep=4, learning_rate=0.3,
            probe_size=16, total_budget=32, seed=11, var_replications=8,
        )
        a = run_csv_bytes(T.em_train(params, insts, cfg), tmp_path, "a.csv")
        b = run_csv_bytes(T.em_train(params, insts, cfg), tmp_path, "b.csv")
        assert a == b
        c = run_csv_bytes(
            T.em_train(params, insts, dataclasses.replace(cfg, seed=12)), tmp_path, "c.csv"
        )
        assert a != c

    def test_no_feasible_prompt_error(self):
        spaces = M.Spaces(1, 3, 4)
        params = M.init_params(spaces, answer_map=[0, 1, 2])
        with pytest.raises(T.NoFeasiblePromptError):
            T.em_train(params, [M.PromptInstance(0, 3)], T.TrainerConfig())

    def test_divergence_raises_with_last_good_step(self):
        params, insts = make_frozen(num_prompts=3, seed=37)
        cfg = T.TrainerConfig(
            algorithm="em-sgd", epochs=2, steps_per_estep=3, learning_rate=1e300,
            exact_gradients=True, allocation="uniform", seed=0,
        )
        with pytest.raises(T.DivergenceError) as err:
            T.em_train(params, insts, cfg)
        assert err.value.last_good_step >= 0
        assert err.value.run is not None

    def test_heterogeneous_gvm_beats_uniform_single_pair(self):
        params, insts = make_heterogeneous(seed=1)
        base = dict(
            algorithm="em-sgd", epochs=30, steps_per_estep=10, learning_rate=0.35,
            probe_size=8, total_budget=80, seed=77,
        )
        target = 0.9
        run_gvm = T.em_train(params, insts, T.TrainerConfig(allocation="gvm", **base))
        run_uni = T.em_train(params, insts, T.TrainerConfig(allocation="uniform", **base))
        s_gvm = T.steps_to_target(run_gvm, target)
        s_uni = T.steps_to_target(run_uni, target)
        assert s_gvm is not None
        assert s_uni is None or s_gvm <= s_uni


class TestRaftppLoss:
    def setup_group(self, seed=3, n=8):
        params, insts = make_frozen(num_prompts=2, seed=seed)
        inst = insts[0]
        rng = np.random.default_rng(seed)
        group = T._sample_response_group(params, inst, n, rng)
        return params, inst, group

    def test_ratio_one_reduces_to_indicator_average(self):
        params, _, group = self.setup_group()
        cfg = T.TrainerConfig(algorithm="raft++")
        loss = T.raftpp_loss(params, params, group, cfg)
        if group.rewards.max() == 0:
            assert loss == 0.0
        else:
            assert loss == float(group.rewards.mean())

    def test_ratio_one_gradient_is_filtered_loglik_gradient(self):
        params, inst, group = self.setup_group(seed=5)
        assert group.rewards.max() == 1
        cfg = T.TrainerConfig(algorithm="raft++")
        _, grad = T.raftpp_loss_grad(params, params, group, cfg)
        expected = np.zeros(params.n_params)
        for y, r in zip(group.rationales, group.rewards):
            if r == 1:
                expected += M.joint_log_prob_grad(params, inst.prompt, int(y), inst.gold_answer)
        expected /= group.rewards.size
        np.testing.assert_allclose(grad, expected, atol=1e-12)

    def test_clipped_ratio_contributes_clip_value(self):
        # single winning response whose ratio exceeds the upper clip edge
        spaces = M.Spaces(1, 2, 2)
        amap = np.array([0, 1])
        old = M.Params(spaces, np.zeros((1, 2)), answer_map=amap)
        new = M.Params(spaces, np.array([[2.0, 0.0]]), answer_map=amap)
        group = T.ResponseGroup(0, np.array([0]), np.array([0]), np.array([1]))
        cfg = T.TrainerConfig(algorithm="raft++", clip_low=0.2, clip_high=0.28)
        s = np.exp(M.joint_log_prob(new, 0, 0, 0) - M.joint_log_prob(old, 0, 0, 0))
        assert s > 1.28
        assert T.raftpp_loss(new, old, group, cfg) == pytest.approx(1.28, abs=1e-12)

    def test_zero_max_reward_group_dropped(self):
        spaces = M.Spaces(1, 4, 4)
        params = M.init_params(spaces, answer_map=[0, 1, 2, 3])
        group = T.ResponseGroup(0, np.array([0, 1]), np.array([0, 1]), np.array([0, 0]))
        cfg = T.TrainerConfig(algorithm="raft++")
        assert T.raftpp_loss(params, params, group, cfg) == 0.0
        _, _, dropped = T.raftpp_pooled_objective(params, params, [group], cfg)
        assert dropped == 1

    @pytest.mark.parametrize("maker,seed", [(make_frozen, 7), (make_stochastic, 8)])
    def test_gradient_matches_finite_differences(self, maker, seed):
        params_old, insts = maker(seed=seed)
        rng = np.random.default_rng(seed + 1)
        groups = [
            T._sample_response_group(params_old, inst, 6, np.random.default_rng(seed + 2 + i))
            for i, inst in enumerate(insts)
        ]
        vec = params_old.to_vector() + 0.05 * rng.normal(size=params_old.n_params)
        params = params_old.with_vector(vec)
        cfg = T.TrainerConfig(algorithm="raft++")
        _, grad, _ = T.raftpp_pooled_objective(params, params_old, groups, cfg)
        fd = V.finite_difference_gradient(
            lambda v: T.raftpp_pooled_objective(params_old.with_vector(v), params_old, groups, cfg)[0],
            vec,
            h=1e-5,
        )
        assert np.abs(grad - fd).max() < 1e-6


class TestGrpo:
    def test_advantages_standardized_exactly(self):
        rng = np.random.default_rng(0)
        seen_mixed = 0
        for _ in range(50):
            r = rng.integers(0, 2, size=6)
            adv = T.group_advantages(r)
            if r.std() == 0:
                np.testing.assert_array_equal(adv, np.zeros(6))
            else:
                seen_mixed += 1
                assert abs(adv.mean()) <= 1e-10
                assert abs(adv.std() - 1.0) <= 1e-10
        assert seen_mixed > 10

    def test_two_point_normalization(self):
        adv = T.group_advantages(np.array([1, 0]))
        np.testing.assert_array_equal(adv, np.array([1.0, -1.0]))

    def test_degenerate_group_contributes_zero_gradient(self):
        params, insts = make_frozen(num_prompts=1, seed=9)
        group = T.GrpoGroup(0, np.array([0, 4]), np.array([0, 0]), np.array([1, 1]), np.zeros(2))
        cfg = T.TrainerConfig(algorithm="grpo", kl_coef=0.0)
        value, grad = T.grpo_objective(params, params, params, [group], cfg)
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros(params.n_params))

    @pytest.mark.parametrize("maker,seed", [(make_frozen, 11), (make_stochastic, 12)])
    def test_gradient_matches_finite_differences(self, maker, seed):
        params_old, insts = maker(seed=seed)
        cfg = T.TrainerConfig(algorithm="grpo", group_size=6, clip_high=0.2, kl_coef=0.001)
        groups = T.sample_grpo_groups(params_old, insts, cfg, seed)
        rng = np.random.default_rng(seed + 1)
        vec = params_old.to_vector() + 0.05 * rng.normal(size=params_old.n_params)
        params = params_old.with_vector(vec)
        ref = params_old
        _, grad = T.grpo_objective(params, params_old, ref, groups, cfg)
        fd = V.finite_difference_gradient(
            lambda v: T.grpo_objective(params_old.with_vector(v), params_old, ref, groups, cfg)[0],
            vec,
            h=1e-5,
        )
        assert np.abs(grad - fd).max() < 1e-6

    def test_plan_scales_group_replication(self):
        params, insts = make_frozen(num_prompts=3, seed=13)
        cfg = T.TrainerConfig(algorithm="grpo", group_size=4)
        plan = type("P", (), {"budgets": np.array([9, 4, 0]), "kind": "gvm"})()
        groups = T.sample_grpo_groups(params, insts, cfg, 0, plan)
        counts = {i: 0 for i in range(3)}
        for g in groups:
            counts[g.prompt_id] += 1
        assert counts == {0: 3, 1: 1, 2: 0}  # ceil(9/4), ceil(4/4), none

    def test_grpo_step_improves_accuracy_over_run(self):
        params, insts = make_frozen(num_prompts=5, seed=15)
        cfg = T.TrainerConfig(
            algorithm="grpo", epochs=6, steps_per_estep=4, learning_rate=1.0,
            group_size=4, clip_high=0.2, total_budget=40, probe_size=16, seed=3,
        )
        run = T.em_train(params, insts, cfg)
        assert run.points[-1].metrics.accuracy > run.points[0].metrics.accuracy


class TestTheoremHarness:
    def make_runs(self, n_runs, **overrides):
        params, insts = make_frozen(num_prompts=4, seed=9, scale=0.7)
        gamma = T.estimate_gamma(params, insts, ridge=overrides.get("ridge", 0.0))
        base = dict(
            algorithm="em-sgd", epochs=3, steps_per_estep=4,
            learning_rate=0.9 * gamma / 2.0, allocation="gvm",
            stats_source="oracle", p_source="oracle", weighting="importance",
            fresh_buffer_per_step=True, batch_fraction=1.0,
            total_budget=48, probe_size=8,
        )
        base.update(overrides)
        cfg = T.TrainerConfig(**base)
        runs = [
            T.em_train(params, insts, dataclasses.replace(cfg, seed=s)) for s in range(n_runs)
        ]
        return runs, insts, gamma

    def test_exact_gradient_run_has_zero_omega_and_negative_rhs(self):
        runs, insts, gamma = self.make_runs(
            3, exact_gradients=True, allocation="uniform", weighting="importance",
        )
        rep = T.theorem_harness(runs, insts, "smooth", gamma=gamma)
        assert rep.omega == 0.0
        assert rep.rhs == pytest.approx(-rep.eta / 2.0 * rep.delta1)
        assert rep.rhs < 0
        assert rep.status == "pass"

    def test_smooth_and_convex_bounds_hold(self):
        runs, insts, gamma = self.make_runs(25)
        rep1 = T.theorem_harness(runs, insts, "smooth", gamma=gamma)
        rep2 = T.theorem_harness(runs, insts, "convex", gamma=gamma)
        assert rep1.status == "pass"
        assert rep2.status == "pass"
        # the convex bound is the tighter statement on the same runs
        assert rep2.rhs <= rep1.rhs + 1e-12

    def test_boundary_step_size_still_admitted(self):
        params, insts = make_frozen(num_prompts=4, seed=9, scale=0.7)
        gamma = T.estimate_gamma(params, insts)
        runs, _, _ = self.make_runs(2, learning_rate=gamma)
        rep = T.theorem_harness(runs, insts, "smooth", gamma=gamma)
        assert rep.status in ("pass", "fail")  # precondition admitted at the boundary

    def test_step_size_above_gamma_skips(self):
        runs, insts, gamma = self.make_runs(2)
        rep = T.theorem_harness(runs, insts, "smooth", gamma=runs[0].config.learning_rate / 2)
        assert rep.status == "skipped-precondition"

    def test_strongly_convex_requires_ridge(self):
        runs, insts, gamma = self.make_runs(2)
        rep = T.theorem_harness(runs, insts, "strongly-convex", gamma=gamma)
        assert rep.status == "skipped-precondition"

    def test_strongly_convex_bound_on_ridge_instance(self):
        runs, insts, gamma = self.make_runs(20, ridge=0.1, learning_rate=0.15)
        rep = T.theorem_harness(runs, insts, "strongly-convex", gamma=gamma)
        assert rep.status == "pass"
        assert rep.strong_convexity > 0.05

    def test_mismatched_configs_rejected(self):
        runs, insts, _ = self.make_runs(2)
        bad = T.em_train(
            runs[0].points[0].params, insts,
            dataclasses.replace(runs[0].config, total_budget=99, seed=1),
        )
        with pytest.raises(ValueError, match="share a TrainerConfig"):
            T.theorem_harness([runs[0], bad], insts, "smooth", gamma=1.0)

    def test_practical_mode_runs_rejected(self):
        params, insts = make_frozen(num_prompts=3, seed=10)
        cfg = T.TrainerConfig(algorithm="em-sgd", epochs=2, steps_per_estep=2,
                              learning_rate=0.1, seed=0)
        run = T.em_train(params, insts, cfg)
        with pytest.raises(ValueError, match="importance weighting"):
            T.theorem_harness([run], insts, "smooth", gamma=1.0)


class TestStepsToTarget:
    def test_first_crossing_step(self):
        params, insts = make_frozen(num_prompts=4, seed=41)
        cfg = T.TrainerConfig(algorithm="em-sgd", epochs=10, steps_per_estep=2,
                              learning_rate=0.5, exact_gradients=True,
                              allocation="uniform", seed=0)
        run = T.em_train(params, insts, cfg)
        losses = [p.metrics.loss_exact for p in run.points]
        target = losses[len(losses) // 2]
        step = T.steps_to_target(run, target)
        assert step is not None
        for point in run.points:
            if point.metrics.step and point.metrics.step < step:
                assert point.metrics.loss_exact > target
        assert T.steps_to_target(run, -1.0) is None
