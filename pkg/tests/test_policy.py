import numpy as np
import pytest

from ttgoals.dataset import WindowSample
from ttgoals.policy import (
    ARCH_LSTM,
    ARCH_STACKED_FF,
    AdamState,
    Ensemble,
    PolicyAgent,
    PolicyParams,
    TrainConfig,
    TrainingDiverged,
    act,
    ensemble_rollout_assignment,
    forward,
    global_norm,
    grad,
    init_adam,
    init_params,
    init_recurrent_state,
    load_checkpoint,
    loss,
    make_ensemble,
    save_checkpoint,
    train_step,
)


def make_batch(rng, obs_shape, out_dim=4, sizes=(5, 3, 5)):
    batch = []
    for i, n in enumerate(sizes):
        batch.append(
            WindowSample(
                obs=rng.normal(size=(n,) + obs_shape),
                acts=rng.normal(size=(n, out_dim)),
                goal=(0.0, 0.0),
                episode_id=f"e{i}",
                start=0,
            )
        )
    return batch


def fd_gradient_check(arch, layout, obs_shape, input_dim, seed, hidden=8, window=5):
    """Central finite differences at eps=1e-5 over every parameter.

    Where the gradient scale is above 1e-6 the relative error must beat 1e-4;
    below that scale the FD quotient is dominated by roundoff of the loss
    itself, so the absolute disagreement must be at the noise floor instead.
    """
    rng = np.random.default_rng(seed)
    params = init_params(arch, input_dim, hidden, 4, rng, obs_layout=layout)
    batch = make_batch(rng, obs_shape, sizes=(window, 3))
    _, g = grad(params, batch)
    flat = params.flatten()
    gflat = np.concatenate([g[k].ravel() for k in params.tensor_order()])
    eps = 1e-5
    fds = np.empty_like(flat)
    for i in range(flat.size):
        fp = flat.copy()
        fp[i] += eps
        fm = flat.copy()
        fm[i] -= eps
        fds[i] = (loss(params.with_flat(fp), batch) - loss(params.with_flat(fm), batch)) / (2 * eps)
    abs_err = np.abs(fds - gflat)
    scale = np.maximum(np.abs(fds), np.abs(gflat))
    meaningful = scale >= 1e-6
    rel = abs_err[meaningful] / scale[meaningful]
    assert rel.max() < 1e-4
    if (~meaningful).any():
        assert abs_err[~meaningful].max() < 1e-9


class TestGradients:
    def test_lstm_matches_finite_differences(self):
        for seed in range(3):
            fd_gradient_check(ARCH_LSTM, "flat", (9,), 9, seed)

    def test_stacked_ff_matches_finite_differences(self):
        for seed in range(3):
            fd_gradient_check(ARCH_STACKED_FF, "stacked", (8, 9), 72, seed)

    def test_zero_loss_point_has_zero_gradient(self):
        rng = np.random.default_rng(0)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        obs = rng.normal(size=(6, 9))
        acts = forward(params, obs)
        batch = [WindowSample(obs=obs, acts=acts, goal=(0, 0), episode_id="e", start=0)]
        lv, g = grad(params, batch)
        assert lv < 1e-24
        assert global_norm(g) < 1e-10

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(1)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        batch = make_batch(rng, (9,))
        _, g1 = grad(params, batch)
        _, g2 = grad(params, batch + batch)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


class TestForwardAct:
    def test_zero_weights_output_bias(self):
        rng = np.random.default_rng(0)
        for arch, layout, shape, dim in (
            (ARCH_LSTM, "flat", (10, 9), 9),
            (ARCH_STACKED_FF, "stacked", (10, 8, 9), 72),
        ):
            params = init_params(arch, dim, 8, 4, rng, obs_layout=layout)
            for k in params.tensors:
                params.tensors[k][:] = 0.0
            params.tensors["by"][:] = 1.5
            out = forward(params, rng.normal(size=shape))
            np.testing.assert_allclose(out, 1.5)

    def test_window_length_one_matches_single_act(self):
        rng = np.random.default_rng(2)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        obs = rng.normal(size=(1, 9))
        y = forward(params, obs)
        a, _ = act(params, init_recurrent_state(params), obs[0])
        np.testing.assert_allclose(y[0], a, atol=1e-15)

    def test_streaming_equivalence(self):
        rng = np.random.default_rng(3)
        params = init_params(ARCH_LSTM, 9, 16, 4, rng)
        window = rng.normal(size=(16, 9))
        y = forward(params, window)
        rs = init_recurrent_state(params)
        for t in range(16):
            a, rs = act(params, rs, window[t])
            np.testing.assert_allclose(a, y[t], atol=1e-12)

    def test_batch_order_permutation(self):
        rng = np.random.default_rng(4)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        X = rng.normal(size=(5, 7, 9))
        Y = forward(params, X)
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(forward(params, X[perm]), Y[perm], atol=1e-14)

    def test_reset_state_forgets_prior_episode(self):
        rng = np.random.default_rng(5)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        agent = PolicyAgent(params)
        obs = rng.normal(size=9)
        first = agent(obs).copy()
        for _ in range(5):
            agent(rng.normal(size=9))
        agent.start_episode(None)
        np.testing.assert_allclose(agent(obs), first, atol=1e-15)

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(6)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        with pytest.raises(ValueError):
            forward(params, rng.normal(size=(5, 11)))


class TestLoss:
    def test_zero_when_predictions_match(self):
        rng = np.random.default_rng(0)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        obs = rng.normal(size=(6, 9))
        batch = [WindowSample(obs=obs, acts=forward(params, obs), goal=(0, 0), episode_id="e", start=0)]
        assert loss(params, batch) < 1e-24

    def test_unit_targets_zero_net(self):
        rng = np.random.default_rng(1)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        for k in params.tensors:
            params.tensors[k][:] = 0.0
        obs = rng.normal(size=(5, 9))
        batch = [
            WindowSample(obs=obs, acts=np.ones((5, 4)), goal=(0, 0), episode_id="e", start=0)
        ]
        assert loss(params, batch) == pytest.approx(1.0)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(2)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        for k in params.tensors:
            params.tensors[k][:] = 0.0
        obs = rng.normal(size=(5, 9))
        acts = rng.normal(size=(5, 4))
        base = loss(params, [WindowSample(obs, acts, (0, 0), "e", 0)])
        scaled = loss(params, [WindowSample(obs, 3.0 * acts, (0, 0), "e", 0)])
        assert scaled == pytest.approx(9.0 * base)

    def test_short_window_normalization(self):
        # Mean over present ticks only: padding must not dilute the loss.
        rng = np.random.default_rng(3)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        for k in params.tensors:
            params.tensors[k][:] = 0.0
        short = WindowSample(rng.normal(size=(2, 9)), np.ones((2, 4)), (0, 0), "a", 0)
        long = WindowSample(rng.normal(size=(6, 9)), np.ones((6, 4)), (0, 0), "b", 0)
        assert loss(params, [short, long]) == pytest.approx(1.0)


class TestTrainStep:
    def test_zero_gradient_keeps_params(self):
        rng = np.random.default_rng(0)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        obs = rng.normal(size=(6, 9))
        batch = [WindowSample(obs, forward(params, obs), (0, 0), "e", 0)]
        new, _, lv = train_step(params, init_adam(params), batch, TrainConfig())
        assert lv < 1e-20
        for k in params.tensors:
            np.testing.assert_allclose(new.tensors[k], params.tensors[k], atol=1e-9)

    def test_identical_seeds_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(7)
            params = init_params(ARCH_LSTM, 9, 8, 4, rng)
            opt = init_adam(params)
            batch_rng = np.random.default_rng(8)
            for _ in range(20):
                batch = make_batch(batch_rng, (9,))
                params, opt, _ = train_step(params, opt, batch, TrainConfig())
            return params.flatten()

        np.testing.assert_array_equal(run(), run())

    def test_overfits_small_cache(self):
        # 2000 steps on a fixed small dataset drive the loss below 10% of its
        # starting value.
        rng = np.random.default_rng(9)
        params = init_params(ARCH_LSTM, 9, 16, 4, rng)
        opt = init_adam(params)
        episodes = [
            (rng.normal(size=(10, 9)), rng.normal(scale=0.3, size=(10, 4))) for _ in range(10)
        ]
        batch_rng = np.random.default_rng(10)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8)

        def sample():
            batch = []
            for _ in range(cfg.batch_size):
                obs, acts = episodes[int(batch_rng.integers(0, len(episodes)))]
                batch.append(WindowSample(obs, acts, (0, 0), "e", 0))
            return batch

        first = loss(params, sample())
        losses = []
        for _ in range(2000):
            params, opt, lv = train_step(params, opt, sample(), cfg)
            losses.append(lv)
        assert np.mean(losses[-50:]) < 0.1 * first

    def test_moving_average_mostly_decreases(self):
        # Fixed 10-episode cache trained full-batch: the 100-step moving
        # average of the loss must fall in at least 95% of windows over the
        # first 2000 steps.
        rng = np.random.default_rng(11)
        params = init_params(ARCH_LSTM, 9, 16, 4, rng)
        opt = init_adam(params)
        batch = [
            WindowSample(
                rng.normal(size=(10, 9)), rng.normal(scale=0.5, size=(10, 4)), (0, 0), f"e{i}", 0
            )
            for i in range(10)
        ]
        cfg = TrainConfig(learning_rate=3e-4, batch_size=10)
        losses = []
        for _ in range(2000):
            params, opt, lv = train_step(params, opt, batch, cfg)
            losses.append(lv)
        ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
        decreasing = np.mean(ma[1:] <= ma[:-1] + 1e-15)
        assert decreasing >= 0.95

    def test_divergence_reports_episode_ids(self):
        rng = np.random.default_rng(13)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        params.tensors["by"][:] = np.inf
        batch = make_batch(rng, (9,))
        with pytest.raises(TrainingDiverged) as exc:
            train_step(params, init_adam(params), batch, TrainConfig())
        assert exc.value.episode_ids == ["e0", "e1", "e2"]

    def test_clipping_bounds_update(self):
        rng = np.random.default_rng(14)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        batch = make_batch(rng, (9,))
        _, g = grad(params, batch)
        cfg = TrainConfig(clip_norm=1e-6)
        # With an absurdly tight clip the scaled gradient norm equals the clip.
        gn = global_norm(g)
        assert gn > cfg.clip_norm
        new, _, _ = train_step(params, init_adam(params), batch, cfg)
        assert all(np.isfinite(v).all() for v in new.tensors.values())


class TestEnsemble:
    def test_round_robin_exact_split(self):
        ens = make_ensemble(5, ARCH_LSTM, 9, 8, 4, seed=0)
        order = ensemble_rollout_assignment(ens, 0, 10)
        counts = [order.count(m) for m in range(5)]
        assert counts == [2, 2, 2, 2, 2]

    def test_single_model_gets_everything(self):
        ens = make_ensemble(1, ARCH_LSTM, 9, 8, 4, seed=0)
        assert ensemble_rollout_assignment(ens, 3, 7) == [0] * 7

    def test_uneven_split_rotates(self):
        ens = make_ensemble(3, ARCH_LSTM, 9, 8, 4, seed=0)
        all_counts = np.zeros(3, dtype=int)
        for it in range(3):
            for m in ensemble_rollout_assignment(ens, it, 4):
                all_counts[m] += 1
        assert all_counts.tolist() == [4, 4, 4]

    def test_members_differ_but_share_architecture(self):
        ens = make_ensemble(3, ARCH_LSTM, 9, 8, 4, seed=0)
        assert not np.array_equal(ens.models[0].flatten(), ens.models[1].flatten())

    def test_mismatched_members_rejected(self):
        a = make_ensemble(1, ARCH_LSTM, 9, 8, 4, seed=0).models[0]
        b = make_ensemble(1, ARCH_LSTM, 9, 16, 4, seed=0).models[0]
        with pytest.raises(ValueError):
            Ensemble(models=[a, b], opt_states=[init_adam(a), init_adam(b)])


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        for arch, layout, dim in ((ARCH_LSTM, "flat", 9), (ARCH_STACKED_FF, "stacked", 72)):
            params = init_params(arch, dim, 8, 4, rng, obs_layout=layout)
            path = tmp_path / f"{arch}.ckpt"
            save_checkpoint(params, path)
            loaded = load_checkpoint(path)
            assert loaded.arch == arch
            assert loaded.obs_layout == layout
            np.testing.assert_array_equal(loaded.flatten(), params.flatten())

    def test_byte_determinism(self, tmp_path):
        rng = np.random.default_rng(1)
        params = init_params(ARCH_LSTM, 9, 8, 4, rng)
        save_checkpoint(params, tmp_path / "a.ckpt")
        save_checkpoint(params, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)
