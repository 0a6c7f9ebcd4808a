import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_params
from gradcheck import max_rel_error, sample_coords
from expa.core import ActionCatalog, ConfigError, FixedPolicy, UniformPolicy, rollout
from expa.environments import Compare, Swap
from expa.optim import (
    METRIC_COLUMNS,
    GroupResult,
    TrainConfig,
    TrainingAbort,
    UpdateConfig,
    apply_update,
    counterfactual_branch,
    counterfactual_rollout,
    cpo_advantages,
    cpo_batch_update,
    evaluate,
    grpo_batch_update,
    intervention_weights,
    oracle_actions,
    ppo_surrogate,
    sample_intervention,
    sort_probe_set,
    standardized_advantages,
    surrogate_objective,
    train,
)
from expa.policy import NeuralPolicy, action_distribution, encode, init_expanded_actions, sequence_logprob
from expa.tasks import gen_countdown, sort_instance, task_catalog

TINY = {"d": 16, "heads": 2, "ff": 12, "max_len": 96}


def neural_rollout(params, cat, task, seed, max_steps=30):
    return rollout(NeuralPolicy(params, cat), task, cat, max_steps, np.random.default_rng(seed))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epsilon": 0}, {"epsilon": 1.0}, {"beta": -1}, {"m": 1}, {"sigma_floor": 0},
                                    {"advantage_mode": "ppo"}, {"learning_rate": 0}, {"max_steps": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            UpdateConfig(**kw)

    def test_train_config_keys(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"stepz": 3})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"update": {"gamma": 1}})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"pretrain": {"warmup": 3}})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"task": {"generator": "sorting"}})


class TestAdvantages:
    def test_example(self):
        np.testing.assert_array_equal(standardized_advantages([1, 0, 0, 1]), [1, -1, -1, 1])
        np.testing.assert_array_equal(standardized_advantages([1, 0]), [1, -1])

    def test_branch_selection(self):
        assert counterfactual_branch([0, 0, -0.5])
        assert not counterfactual_branch([0, 0, 0.01])
        branch, adv = cpo_advantages([0, -1, 0], [1, 0, 0])
        assert branch == "counterfactual"
        np.testing.assert_array_equal(adv, [1, 1, 0])
        branch, adv = cpo_advantages([0, 1, 0, 1], [5, 5, 5, 5])
        assert branch == "standardized"
        np.testing.assert_array_equal(adv, [-1, 1, -1, 1])

    def test_counterfactuals_required(self):
        with pytest.raises(ValueError):
            cpo_advantages([0, 0], None)

    def test_constant_rewards(self):
        np.testing.assert_array_equal(standardized_advantages([0.5] * 4), 0)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=16), st.floats(-3, 3), st.floats(0.1, 10))
    def test_mean_zero_and_affine_invariance(self, r, shift, scale):
        a = standardized_advantages(r)
        assert abs(a.mean()) < 1e-9
        if np.std(r) > 1e-3:
            np.testing.assert_allclose(standardized_advantages(np.array(r) * scale + shift), a, atol=1e-7)


class TestSurrogate:
    def setup_rollouts(self, cat, n=2):
        p = init_expanded_actions(small_params(cat), cat)
        ros = [neural_rollout(p, cat, sort_instance([3, 1, 2]), s, 12) for s in range(n)]
        return p, ros

    def test_ratio_one_value(self, sort_catalog):
        cat = sort_catalog
        p, (ro,) = self.setup_rollouts(cat, 1)
        cfg = UpdateConfig(beta=0.3)
        value, _ = ppo_surrogate(p, p, p, ro, 0.7, cfg, cat)
        assert value == pytest.approx(0.7 * len(ro), rel=1e-12)

    def test_ratio_one_gradient_is_score(self, sort_catalog):
        cat = sort_catalog
        rng = np.random.default_rng(0)
        p, (ro,) = self.setup_rollouts(cat, 1)
        _, grads = ppo_surrogate(p, p, None, ro, -1.3, UpdateConfig(beta=0), cat)
        err = max_rel_error(lambda q: -1.3 * float(sequence_logprob(q, ro, cat).sum()), p, grads, sample_coords(p, rng, 3))
        assert err < 1e-4

    def test_zero_advantage_zero_gradient(self, sort_catalog):
        cat = sort_catalog
        p, (ro,) = self.setup_rollouts(cat, 1)
        value, grads = ppo_surrogate(p, p, None, ro, 0.0, UpdateConfig(beta=0), cat)
        assert value == 0 and all(not g.any() for g in grads.values())

    def test_clipping_bound(self, sort_catalog):
        cat = sort_catalog
        p, (ro,) = self.setup_rollouts(cat, 1)
        old = small_params(cat, seed=9)
        cfg = UpdateConfig(epsilon=0.2, beta=0)
        # positive advantages gain at most (1 + eps) a per step; negative ones lose at least (1 - eps) |a|
        up, _ = ppo_surrogate(p, old, None, ro, 2.0, cfg, cat, need_grad=False)
        assert 0 <= up <= 2.0 * 1.2 * len(ro) + 1e-12
        down, _ = ppo_surrogate(p, old, None, ro, -2.0, cfg, cat, need_grad=False)
        assert down <= -2.0 * 0.8 * len(ro) + 1e-12

    def test_gradient_with_clip_and_kl(self, sort_catalog):
        cat = sort_catalog
        rng = np.random.default_rng(1)
        p, (ro,) = self.setup_rollouts(cat, 1)
        old, ref = p.copy(), small_params(cat, seed=3)
        for t in old.tensors.values():
            t += 0.05 * rng.standard_normal(t.shape)
        cfg = UpdateConfig(epsilon=0.2, beta=0.1)
        _, grads = ppo_surrogate(p, old, ref, ro, 0.8, cfg, cat)
        f = lambda q: ppo_surrogate(q, old, ref, ro, 0.8, cfg, cat, need_grad=False)[0]  # noqa: E731
        assert max_rel_error(f, p, grads, sample_coords(p, rng, 3)) < 1e-4

    def test_observation_tail_gets_no_gradient(self, sort_catalog):
        cat = sort_catalog
        acts = [cat.route("compare"), cat.env_action("compare", "A"), cat.env_action("compare", "B")]
        ro = rollout(FixedPolicy(cat, acts), sort_instance([2, 1]), cat, 3)
        p = small_params(cat)
        _, grads = surrogate_objective(p, [ro], [1.0], cat, UpdateConfig(beta=0))
        last = ro.records[-1].pre_len
        # positions after the last decision hold only the final observation
        assert not grads["pos"][last + 1:].any()
        tail_only = set(ro.final_state.history[last:]) - set(ro.final_state.history[:last])
        for tok in tail_only:
            assert not grads["embed"][tok].any()
        assert grads["pos"][: last + 1].any()

    def test_weights_scale(self, sort_catalog):
        cat = sort_catalog
        p, ros = self.setup_rollouts(cat, 2)
        cfg = UpdateConfig(beta=0)
        v1, _ = surrogate_objective(p, ros, [1.0, -0.5], cat, cfg, need_grad=False)
        v2, _ = surrogate_objective(p, ros, [1.0, -0.5], cat, cfg, weights=[0.5, 0.5], need_grad=False)
        assert v2 == pytest.approx(v1 / 2)


class TestCounterfactual:
    def test_prefix_and_forced_route(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        task = sort_instance([3, 1, 2])
        for seed in range(10):
            fact = neural_rollout(p, cat, task, seed)
            pair = counterfactual_rollout(p, fact, 2, task, cat, np.random.default_rng(100 + seed), max_steps=30)
            t = pair.intervention_step
            assert fact.records[t].env == 0
            assert [r.action for r in pair.counterfactual.records[:t]] == [r.action for r in fact.records[:t]]
            assert pair.counterfactual.records[t].action == cat.route(2)

    def test_weights_are_description_probabilities(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        fact = neural_rollout(p, cat, sort_instance([3, 1, 2]), 0)
        route = cat.route(1)
        steps, w = intervention_weights(p, fact, route, cat)
        assert list(steps) == [t for t, r in enumerate(fact.records) if r.env == 0]
        hist = fact.final_state.history
        for t, wt in zip(steps, w):
            dist = action_distribution(p, hist[: fact.records[t].pre_len], 0, cat)
            assert wt == pytest.approx(dist.prob(cat.token("compare")), rel=1e-10)

    def test_multi_token_geometric_mean(self):
        vocab = ["sort", "A", "B", "asc", "desc", "<", ">", "swapped", "done", "ERR", "look", "at", "move"]
        cat = ActionCatalog(vocab, [Compare("AB", route_desc=("look", "at")), Swap("AB", route_desc=("move",))])
        p = init_expanded_actions(small_params(cat), cat)
        fact = rollout(UniformPolicy(cat), sort_instance([2, 1]), cat, 12, np.random.default_rng(0))
        steps, w = intervention_weights(p, fact, cat.route(1), cat)
        hist = fact.final_state.history
        look, at = cat.token("look"), cat.token("at")
        for t, wt in zip(steps, w):
            h = hist[: fact.records[t].pre_len]
            p1 = action_distribution(p, h, 0, cat).prob(look)
            p2 = action_distribution(p, list(h) + [look], 0, cat).prob(at)
            assert wt == pytest.approx(np.sqrt(p1 * p2), rel=1e-10)

    def test_uniform_fallback(self):
        rng = np.random.default_rng(0)
        steps = np.array([0, 3, 5])
        draws = [sample_intervention(steps, np.zeros(3), rng) for _ in range(3000)]
        counts = np.array([draws.count(s) for s in steps])
        assert np.all(np.abs(counts - 1000) < 4 * np.sqrt(3000 * (1 / 3) * (2 / 3)))

    def test_no_language_steps(self):
        with pytest.raises(ValueError):
            sample_intervention(np.array([], dtype=int), np.array([]), np.random.default_rng(0))

    def test_draws_follow_weights(self):
        rng = np.random.default_rng(1)
        steps, w = np.array([1, 2, 4, 7]), np.array([0.1, 0.0, 0.3, 0.05])
        n = 4000
        draws = np.array([sample_intervention(steps, w, rng) for _ in range(n)])
        p = w / w.sum()
        for s, pk in zip(steps, p):
            assert abs((draws == s).sum() - n * pk) <= 4 * np.sqrt(n * pk * (1 - pk)) + 1e-9


class TestBatchUpdates:
    def test_counterfactual_branch_without_signal_is_a_no_op(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        cfg = UpdateConfig(m=4, beta=0, max_steps=1)
        new, metrics = cpo_batch_update(p, p.copy(), sort_instance([2, 1]), cfg, np.random.default_rng(0), catalog=cat)
        assert metrics["branch"] == "counterfactual" and metrics["episodes"] == 8
        assert metrics["advantages"] == [0.0] * 4
        np.testing.assert_array_equal(new.flat(), p.flat())

    def test_grpo_identical_rewards_is_a_no_op(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        cfg = UpdateConfig(m=4, beta=0, max_steps=1)
        new, metrics = grpo_batch_update(p, None, sort_instance([2, 1]), cfg, np.random.default_rng(0), catalog=cat)
        assert metrics["branch"] == "standardized" and metrics["episodes"] == 4
        np.testing.assert_array_equal(new.flat(), p.flat())

    def test_positive_group_is_standardized(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        task = sort_instance([1, 2])
        # point the "done" row along the prompt encoding so every rollout answers at once
        g = encode(p, cat.encode(task.prompt))
        p.tensors["head"][cat.token("done")] += 1e3 * g / (g @ g)
        cfg = UpdateConfig(m=6, beta=0, max_steps=6)
        new, metrics = cpo_batch_update(p, None, task, cfg, np.random.default_rng(3), catalog=cat)
        assert metrics["branch"] == "standardized" and metrics["mean_reward"] == 1.0
        assert metrics["advantages"] == [0.0] * 6 and metrics["episodes"] == 6
        np.testing.assert_array_equal(new.flat(), p.flat())

    def test_update_moves_toward_advantage(self, sort_catalog):
        cat = sort_catalog
        p = init_expanded_actions(small_params(cat), cat)
        done = cat.token("done")
        ro_good = rollout(FixedPolicy(cat, [done]), sort_instance([1, 2]), cat, 3)
        ro_bad = rollout(FixedPolicy(cat, [cat.token("A")] * 3), sort_instance([1, 2]), cat, 3)
        cfg = UpdateConfig(m=2, beta=0, learning_rate=1e-2)
        group = GroupResult([ro_good, ro_bad], np.array([1.0, -1.0]), "standardized", np.array([1.0, 0.0]), 0.0, 2)
        before = float(sequence_logprob(p, ro_good, cat)[0])
        q = p.copy()
        apply_update(q, None, [group], cat, cfg, cfg.optimizer())
        assert float(sequence_logprob(q, ro_good, cat)[0]) > before

    def test_non_finite_aborts(self, sort_catalog):
        cat = sort_catalog
        p = small_params(cat)
        p.tensors["w1"][0, 0] = np.nan
        ro = rollout(FixedPolicy(cat, [cat.token("done")]), sort_instance([1, 2]), cat, 3)
        group = GroupResult([ro, ro], np.array([1.0, -1.0]), "standardized", np.array([1.0, 0.0]), 0.0, 2)
        cfg = UpdateConfig(m=2)
        with pytest.raises(TrainingAbort):
            apply_update(p, None, [group], cat, cfg, cfg.optimizer())


class TestEvaluate:
    def test_oracle_sorting(self, sort_catalog):
        cat = sort_catalog
        tasks = sort_probe_set([2, 3])
        report = evaluate(None, cat, tasks, policy_for=lambda t: FixedPolicy(cat, oracle_actions(t, cat)))
        assert report["accuracy"] == 1.0 and report["groups"] == {"2": 1.0, "3": 1.0}
        assert set(report["by_min_swaps"]["3"]) == {"0", "1", "2"}
        assert report["n"] == len(tasks) == 2 * (2 + 6)
        assert report["mean_reward"] == 1.0

    def test_oracle_countdown(self):
        cat = task_catalog("countdown", vocab="default")
        tasks = gen_countdown({"n_instances": 30}, np.random.default_rng(0))
        report = evaluate(None, cat, tasks, policy_for=lambda t: FixedPolicy(cat, oracle_actions(t, cat)))
        assert report["accuracy"] == 1.0

    def test_sampled_is_reproducible(self, sort_catalog):
        p = init_expanded_actions(small_params(sort_catalog), sort_catalog)
        tasks = sort_probe_set([2, 3])
        a = evaluate(p, sort_catalog, tasks, greedy=False, seed=4, max_steps=10)
        b = evaluate(p, sort_catalog, tasks, greedy=False, seed=4, max_steps=10)
        assert a == b and a["decoding"] == "sampled"


def tiny_config(tmp_path=None, **over):
    cfg = {
        "task": {"generator": "sort", "cfg": {"mix": {"2": 0.5, "3": 0.5}, "n_instances": 50}},
        "catalog": {"kind": "sort", "n_labels": 3},
        "probe": {"sort_sizes": [2]},
        "policy": TINY,
        "update": {"m": 2, "max_steps": 10},
        "pretrain": {"epochs": 1, "corpus_size": 20},
        "steps": 4,
        "probe_every": 2,
        "seed": 7,
    }
    if tmp_path is not None:
        cfg["out"] = str(tmp_path)
    cfg.update(over)
    return cfg


class TestTrain:
    def test_outputs(self, tmp_path):
        res = train(tiny_config(tmp_path, checkpoint_every=2))
        assert res.steps == 4 and len(res.metrics) == 4
        rows = list(csv.DictReader(io.StringIO((tmp_path / "metrics.csv").read_text())))
        assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 4
        for name in ("checkpoint_000002.npz", "checkpoint_000004.npz", "checkpoint_final.npz", "probe.json"):
            assert (tmp_path / name).exists()
        assert res.episodes == res.metrics[-1]["episodes"]

    def test_seeded_runs_repeat(self):
        a, b = train(tiny_config()), train(tiny_config())
        assert a.metrics == b.metrics
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = train(tiny_config(tmp_path / "full", checkpoint_every=2))
        part = train(tiny_config(tmp_path / "part", resume=str(tmp_path / "full" / "checkpoint_000002.npz")))
        assert part.metrics == full.metrics
        np.testing.assert_array_equal(part.params.flat(), full.params.flat())

    def test_episode_budget(self):
        res = train(tiny_config(max_episodes=1, steps=50))
        assert res.steps == 1

    def test_early_stop(self):
        res = train(tiny_config(early_stop={"2": 0.0}))
        assert res.steps == 0

    def test_grpo_mode(self):
        res = train(tiny_config(update={"m": 2, "max_steps": 10, "advantage_mode": "grpo"}))
        assert all(r["branch_cf_fraction"] == 0 for r in res.metrics)
