import json
import math

import numpy as np
import pytest

from ttgoals import bootstrap as bs
from ttgoals import policy as P
from ttgoals import ssp
from ttgoals.config import config_from_dict
from ttgoals.dataset import Cache, relabel
from ttgoals.env import run_episode
from ttgoals.goals import extended_region, sample_goal, table_region
from tests.test_dataset import synthetic_traj


def tiny_cfg(seed=0, **ssp_over):
    return config_from_dict(
        {
            "env": {"control_hz": 50, "max_steps": 100},
            "train": {"hidden": 16, "batch_size": 8, "k": 48, "seed": seed},
            "ssp": {
                "steps_between_ssp": 3,
                "num_ssp_per_iter": 4,
                "total_trajectory_budget": 20,
                "eval_every": 2,
                "eval_episodes": 2,
                **ssp_over,
            },
            "eval": {"goals": "uniform", "episodes_per_goal": 4},
        }
    )


class TestSampleGoal:
    def test_zero_margin_stays_on_table(self):
        region = extended_region(margin=0.0)
        rng = np.random.default_rng(0)
        for _ in range(500):
            x, y = sample_goal(region, rng)
            assert -1.37 <= x <= 0.0
            assert abs(y) <= 0.7625

    def test_outside_fraction_matches_area_ratio(self):
        margin = 0.2
        region = extended_region(margin=margin)
        table = table_region()
        rng = np.random.default_rng(1)
        n = 10000
        outside = sum(
            0 if table.contains(*sample_goal(region, rng)) else 1 for _ in range(n)
        )
        expected = 1.0 - table.area / region.area
        assert abs(outside / n - expected) < 0.02

    def test_every_goal_in_region(self):
        region = extended_region(margin=0.3)
        rng = np.random.default_rng(2)
        for _ in range(200):
            assert region.contains(*sample_goal(region, rng))


class TestActionStd:
    def test_identical_actions_zero_std(self):
        cache = Cache()
        t = synthetic_traj(episode_id="a")
        const = np.ones(4)
        t.steps = [(o, const.copy()) for o, _ in t.steps]
        cache.append(relabel(t), "demo")
        np.testing.assert_array_equal(ssp.compute_action_std(cache), np.zeros(4))

    def test_plus_minus_one_gives_unit_std(self):
        cache = Cache()
        t = synthetic_traj(n_steps=20, episode_id="a")
        acts = [np.array([1.0 if i % 2 == 0 else -1.0, 0, 0, 0]) for i in range(20)]
        t.steps = [(o, a) for (o, _), a in zip(t.steps, acts)]
        cache.append(relabel(t), "demo")
        std = ssp.compute_action_std(cache)
        assert std[0] == pytest.approx(1.0)
        assert std[1] == 0.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        cache = Cache()
        all_actions = []
        for i in range(5):
            t = synthetic_traj(n_steps=int(rng.integers(5, 20)), hit=0, rng=rng, episode_id=f"e{i}")
            cache.append(relabel(t), "demo")
            all_actions.extend(a for _, a in cache.episodes[-1].steps)
        stacked = np.stack(all_actions)
        mean = stacked.sum(axis=0) / len(stacked)
        var = ((stacked - mean) ** 2).sum(axis=0) / len(stacked)
        np.testing.assert_allclose(ssp.compute_action_std(cache), np.sqrt(var), atol=1e-9)

    def test_empty_cache_errors(self):
        with pytest.raises(ValueError):
            ssp.compute_action_std(Cache())


class TestNoiseVector:
    def test_zero_scale_is_identity(self):
        rng = np.random.default_rng(0)
        z = ssp.sample_noise_vector(np.array([0.5, 1.0]), 0.0, rng)
        np.testing.assert_array_equal(z, np.zeros(2))

    def test_zero_std_component_stays_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            z = ssp.sample_noise_vector(np.array([0.0, 1.0]), 2.0, rng)
            assert z[0] == 0.0

    def test_empirical_moments(self):
        rng = np.random.default_rng(1)
        a_std = np.array([0.5, 2.0])
        b = 0.8
        zs = np.stack([ssp.sample_noise_vector(a_std, b, rng) for _ in range(10000)])
        bound = b * a_std
        assert np.all(np.abs(zs) <= bound + 1e-12)
        # Uniform(-c, c): mean 0 within 3*sigma/sqrt(n), sigma = c/sqrt(3).
        for j in range(2):
            tol = 3 * (bound[j] / math.sqrt(3)) / math.sqrt(10000)
            assert abs(zs[:, j].mean()) < tol

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            ssp.sample_noise_vector(np.ones(2), -0.1, np.random.default_rng(0))


class TestSspIteration:
    def test_never_hitting_policy_stores_nothing(self):
        cfg = tiny_cfg()
        ens = P.make_ensemble(1, "lstm", 14, 8, 6, seed=0)
        # Park the paddle far out of the ball corridor.
        for k in ens.models[0].tensors:
            ens.models[0].tensors[k][:] = 0.0
        ens.models[0].tensors["by"][:] = np.array([0.15, 0.55, 1.5, 0.0, 0.0, 0.0])
        cache = Cache(joint_count=6)
        env = cfg.make_env()
        report = ssp.ssp_iteration(
            ens, cfg, cache, env, extended_region(), np.zeros(6), 0, 6, master_seed=0
        )
        assert report.attempted == 6
        assert report.stored == 0
        assert cache.seen_count == 6
        assert report.mean_dist is None

    def test_round_robin_counts(self):
        cfg = tiny_cfg()
        ens = P.make_ensemble(5, "lstm", 14, 8, 6, seed=0)
        cache = Cache(joint_count=6)
        env = cfg.make_env()
        report = ssp.ssp_iteration(
            ens, cfg, cache, env, extended_region(), np.zeros(6), 0, 10, master_seed=0
        )
        assert report.per_model_attempted == [2, 2, 2, 2, 2]

    def test_noise_constant_within_episode(self):
        # action - policy(obs) is one fixed vector per rollout.
        cfg = tiny_cfg()
        env = cfg.make_env()
        params = P.make_ensemble(1, "lstm", 14, 8, 6, seed=3).models[0]
        a_std = np.full(6, 0.2)
        rng = np.random.default_rng(5)
        z = ssp.sample_noise_vector(a_std, 0.7, rng)
        agent = P.PolicyAgent(params)
        traj = run_episode(env, agent, goal=(-0.7, 0.1), noise_vector=z, seed=11)
        fresh = P.PolicyAgent(params)
        fresh.start_episode(env)
        for obs, action in traj.steps:
            raw = fresh(obs)
            np.testing.assert_allclose(action - raw, z, atol=1e-12)


class TestRunTraining:
    def test_budget_accounting_exact(self, tmp_path):
        cfg = tiny_cfg()
        demos, _ = bs.generate_bootstrap("scripted", 6, cfg, seed=50)
        out = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "run", mode="goalseye")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["ssp_attempted"] == cfg.ssp.total_trajectory_budget - 6
        rows = (out / "progress.csv").read_text().splitlines()[1:]
        attempted = sum(int(r.split(",")[1]) for r in rows)
        assert attempted == manifest["ssp_attempted"]

    def test_lfp_runs_no_rollouts(self, tmp_path):
        cfg = tiny_cfg()
        demos, _ = bs.generate_bootstrap("scripted", 6, cfg, seed=50)
        out = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "lfp", mode="lfp")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["ssp_attempted"] == 0
        assert manifest["cache_size"] == 6
        # Compute-matched: same iteration count as the goalseye schedule.
        assert manifest["iterations"] == math.ceil((20 - 6) / 4)

    def test_budget_equal_to_demos_degenerates_to_lfp(self, tmp_path):
        cfg = tiny_cfg(total_trajectory_budget=6)
        demos, _ = bs.generate_bootstrap("scripted", 6, cfg, seed=50)
        out = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "deg", mode="goalseye")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["ssp_attempted"] == 0
        assert manifest["iterations"] == 1

    def test_no_demos_no_budget_errors(self, tmp_path):
        cfg = tiny_cfg()
        with pytest.raises(ValueError):
            ssp.run_training(cfg, demos=None, out_dir=tmp_path / "x", mode="lfp")

    def test_gcsl_runs_without_demos(self, tmp_path):
        cfg = tiny_cfg(total_trajectory_budget=8, num_ssp_per_iter=4)
        out = ssp.run_training(cfg, demos=None, out_dir=tmp_path / "gcsl", mode="gcsl")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["demos_count"] == 0
        assert manifest["ssp_attempted"] == 8

    def test_determinism_byte_identical(self, tmp_path):
        cfg = tiny_cfg(total_trajectory_budget=14)
        demos, _ = bs.generate_bootstrap("scripted", 6, cfg, seed=50)
        a = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "a", mode="goalseye")
        b = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "b", mode="goalseye")
        assert (a / "progress.csv").read_bytes() == (b / "progress.csv").read_bytes()
        assert (a / "model_00.ckpt").read_bytes() == (b / "model_00.ckpt").read_bytes()
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()

    def test_schedule_steps_between_ssp(self, tmp_path):
        # Model 0's Adam step counter advances steps_between_ssp per iteration.
        cfg = tiny_cfg()
        demos, _ = bs.generate_bootstrap("scripted", 4, cfg, seed=50)
        captured = []
        orig = ssp.ssp_iteration

        def spy(ens, *args, **kwargs):
            captured.append(ens.opt_states[0].step)
            return orig(ens, *args, **kwargs)

        ssp.ssp_iteration = spy
        try:
            ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "sched", mode="goalseye")
        finally:
            ssp.ssp_iteration = orig
        diffs = np.diff([0] + captured)
        assert all(d == cfg.ssp.steps_between_ssp for d in diffs)

    def test_goal_containment(self, tmp_path):
        cfg = tiny_cfg()
        demos, _ = bs.generate_bootstrap("scripted", 6, cfg, seed=50)
        out = ssp.run_training(cfg, demos=demos, out_dir=tmp_path / "gc", mode="goalseye")
        # All relabeled goals of an emitted run live in the extended region.
        region = extended_region(cfg.geom, cfg.ssp.goal_margin)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["cache_size"] >= 6
