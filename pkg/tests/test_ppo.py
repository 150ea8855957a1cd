import numpy as np
import pytest

from littrack import env as envmod
from littrack import mathnn, policy as polmod, ppo
from littrack.config import EnvConfig, PpoConfig, RandConfig, make_rng
from littrack.env import VecEnv
from littrack.ppo import (clipped_objective, collect_rollout, compute_gae,
                          ppo_update)

H = 2


@pytest.fixture
def hyper():
    h = PpoConfig()
    h.n_envs = 4
    h.rollout_steps = 20
    h.epochs = 2
    h.minibatches = 2
    return h


def small_setup(seed=0, n=4, hist=H):
    rng = make_rng(seed, "setup")
    pol = polmod.make_policy(rng, hist, has_refs=False, enc_hidden=[16],
                             latent_dim=8, actor_hidden=[16, 16],
                             init_log_std=np.log(0.5))
    critic = polmod.make_critic(rng, hist, [16, 16])
    venv = VecEnv(EnvConfig(), RandConfig(), n, hist, make_rng(seed, "env"),
                  fixed=True)
    venv.reset_all()
    return pol, critic, venv


class TestGae:
    def test_gamma_zero_collapses_to_reward_minus_value(self):
        rng = make_rng(0, "gae")
        r = rng.standard_normal(10)
        v = rng.standard_normal(10)
        d = np.zeros(10, dtype=bool)
        adv, ret = compute_gae(r, v, d, 0.5, gamma=0.0, lam=0.95)
        np.testing.assert_allclose(adv, r - v, atol=1e-15)
        np.testing.assert_allclose(ret, r, atol=1e-15)

    def test_terminal_base_case(self):
        adv, ret = compute_gae(np.array([1.0]), np.array([0.5]),
                               np.array([True]), 99.0, gamma=0.99, lam=0.95)
        np.testing.assert_allclose(adv, [0.5], atol=1e-15)
        np.testing.assert_allclose(ret, [1.0], atol=1e-15)

    def test_length_three_matches_direct_recurrence(self):
        gamma, lam = 0.99, 0.95
        r = np.array([1.0, -0.5, 2.0])
        v = np.array([0.3, 0.8, -0.2])
        d = np.array([False, False, False])
        boot = 0.7
        adv, ret = compute_gae(r, v, d, boot, gamma, lam)
        # direct backward evaluation
        v_ext = np.append(v, boot)
        expect = np.zeros(3)
        carry = 0.0
        for t in (2, 1, 0):
            delta = r[t] + gamma * v_ext[t + 1] - v[t]
            carry = delta + gamma * lam * carry
            expect[t] = carry
        np.testing.assert_allclose(adv, expect, atol=1e-12)
        np.testing.assert_allclose(ret, expect + v, atol=1e-12)

    def test_done_blocks_bootstrap_and_carry(self):
        gamma, lam = 0.9, 0.8
        r = np.array([1.0, 1.0])
        v = np.array([0.0, 0.0])
        d = np.array([True, False])
        adv, _ = compute_gae(r, v, d, 10.0, gamma, lam)
        # step 0 sees nothing from step 1 because it terminated
        np.testing.assert_allclose(adv[0], 1.0, atol=1e-15)

    def test_vectorized_matches_bruteforce_on_random_batches(self):
        rng = make_rng(1, "gae")
        for trial in range(100):
            steps = int(rng.integers(1, 33))
            n = int(rng.integers(1, 5))
            r = rng.standard_normal((n, steps))
            v = rng.standard_normal((n, steps))
            d = rng.random((n, steps)) < 0.15
            boot = rng.standard_normal(n)
            gamma = float(rng.uniform(0.0, 0.999))
            lam = float(rng.uniform(0.0, 1.0))
            adv, ret = compute_gae(r, v, d, boot, gamma, lam)
            for i in range(n):
                carry = 0.0
                nxt = boot[i]
                expect = np.zeros(steps)
                for t in range(steps - 1, -1, -1):
                    live = 0.0 if d[i, t] else 1.0
                    delta = r[i, t] + gamma * nxt * live - v[i, t]
                    carry = delta + gamma * lam * live * carry
                    expect[t] = carry
                    nxt = v[i, t]
                np.testing.assert_allclose(adv[i], expect, atol=1e-10)
                np.testing.assert_allclose(ret[i], expect + v[i], atol=1e-10)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compute_gae(np.zeros((2, 5)), np.zeros((2, 4)),
                        np.zeros((2, 5), dtype=bool), np.zeros(2), 0.9, 0.9)


class TestClippedObjective:
    def test_positive_advantage_clips_from_above(self):
        assert clipped_objective(np.array([1.5]), np.array([1.0]), 0.2)[0] == 1.2

    def test_negative_advantage_clips_from_below(self):
        np.testing.assert_allclose(
            clipped_objective(np.array([0.5]), np.array([-1.0]), 0.2), [-0.8])

    def test_unit_ratio_passes_through(self):
        adv = np.array([0.3, -0.7])
        np.testing.assert_array_equal(
            clipped_objective(np.ones(2), adv, 0.2), adv)

    def test_never_exceeds_unclipped_in_improving_direction(self):
        rng = make_rng(2, "clip")
        ratio = np.exp(rng.uniform(-1, 1, 1000))
        adv = rng.standard_normal(1000)
        clipped = clipped_objective(ratio, adv, 0.2)
        assert (clipped <= ratio * adv + 1e-12).all()


class TestCollectRollout:
    def test_buffer_shapes(self, hyper):
        pol, critic, venv = small_setup()
        buf, stats = collect_rollout(pol, critic, venv, hyper.rollout_steps,
                                     hyper, make_rng(0, "roll"))
        assert buf.actions.shape == (4, 20, 3)
        assert buf.actor_in.shape == (4, 20, pol.input_dim)
        assert buf.priv_in.shape == (4, 20, critic.input_dim)
        assert buf.log_probs.shape == (4, 20)
        assert buf.n_envs * buf.steps == 80
        assert 0.0 <= stats["lin_score"] <= 1.0

    def test_fixed_seed_bit_identical_buffers(self, hyper):
        def run():
            pol, critic, venv = small_setup(3)
            buf, _ = collect_rollout(pol, critic, venv, 20, hyper,
                                     make_rng(4, "roll"))
            return buf

        a, b = run(), run()
        for name in ("actor_in", "actions", "log_probs", "rewards", "values"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_stored_log_probs_match_recomputation(self, hyper):
        pol, critic, venv = small_setup(5)
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(6, "roll"))
        flat_in = buf.actor_in.reshape(-1, pol.input_dim)
        flat_act = buf.actions.reshape(-1, 3)
        mean = polmod.policy_mean(pol, flat_in)
        recomputed = polmod.gaussian_log_prob(mean, pol.log_std, flat_act)
        assert np.abs(recomputed - buf.log_probs.reshape(-1)).max() < 1e-9

    def test_ref_callbacks_populate_reference_slots(self, hyper):
        rng = make_rng(7, "setup")
        pol = polmod.make_policy(rng, H, has_refs=True, enc_hidden=[16],
                                 latent_dim=8, actor_hidden=[16],
                                 init_log_std=np.log(0.5))
        critic = polmod.make_critic(rng, H, [16])
        venv = VecEnv(EnvConfig(), RandConfig(), 4, H, make_rng(7, "env"), fixed=True)
        venv.reset_all()

        def ref_fn(obs_hist):
            n = obs_hist.shape[0]
            return np.full((n, 3), 0.25), np.full((n, 9), -0.5)

        buf, _ = collect_rollout(pol, critic, venv, 5, hyper, make_rng(8, "roll"),
                                 ref_fn=ref_fn)
        assert (buf.ref_action == 0.25).all()
        assert (buf.ref_obs == -0.5).all()
        assert (buf.actor_in[:, :, -12:-9] == 0.25).all()
        assert (buf.actor_in[:, :, -9:] == -0.5).all()


class TestPpoUpdate:
    def test_zero_advantage_perfect_value_no_entropy_keeps_params(self, hyper):
        pol, critic, venv = small_setup(9)
        hyper.entropy_coef = 0.0
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(9, "roll"))
        # engineer zero advantages and a perfect value fit: gamma=0 makes
        # returns = rewards, then set rewards := values
        hyper.gamma = 0.0
        buf.rewards = buf.values.copy()
        before_a = [leaf.copy() for leaf in mathnn.tree_leaves(pol.trainable())]
        before_c = [leaf.copy() for leaf in mathnn.tree_leaves(critic.net)]
        pol2, critic2, _, _, stats = ppo_update(
            pol, critic, mathnn.init_adam(pol.trainable()),
            mathnn.init_adam(critic.net), buf, hyper, make_rng(10, "upd"))
        assert not stats["aborted"]
        # zero advantages make the actor gradients exactly zero
        for b, a in zip(before_a, mathnn.tree_leaves(pol2.trainable())):
            np.testing.assert_array_equal(b, a)
        # the value fit is perfect only up to BLAS rounding, and Adam turns
        # any nonzero gradient into an lr-sized step, so "unchanged up to
        # optimizer epsilon" means within a few lr
        for b, a in zip(before_c, mathnn.tree_leaves(critic2.net)):
            np.testing.assert_allclose(a, b, rtol=0, atol=5e-3)

    def test_update_moves_parameters_and_reports_stats(self, hyper):
        pol, critic, venv = small_setup(11)
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(11, "roll"))
        pol2, critic2, _, _, stats = ppo_update(
            pol, critic, mathnn.init_adam(pol.trainable()),
            mathnn.init_adam(critic.net), buf, hyper, make_rng(12, "upd"))
        assert not stats["aborted"]
        assert stats["value_loss"] > 0.0
        changed = any(not np.array_equal(a, b) for a, b in
                      zip(mathnn.tree_leaves(pol.trainable()),
                          mathnn.tree_leaves(pol2.trainable())))
        assert changed

    def test_non_finite_reward_aborts_and_keeps_params(self, hyper):
        pol, critic, venv = small_setup(13)
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(13, "roll"))
        buf.rewards[0, 0] = np.nan
        pol2, critic2, _, _, stats = ppo_update(
            pol, critic, mathnn.init_adam(pol.trainable()),
            mathnn.init_adam(critic.net), buf, hyper, make_rng(14, "upd"))
        assert stats["aborted"]
        for b, a in zip(mathnn.tree_leaves(pol.trainable()),
                        mathnn.tree_leaves(pol2.trainable())):
            np.testing.assert_array_equal(b, a)

    def test_update_is_deterministic(self, hyper):
        def run():
            pol, critic, venv = small_setup(15)
            buf, _ = collect_rollout(pol, critic, venv, 20, hyper,
                                     make_rng(15, "roll"))
            pol2, _, _, _, _ = ppo_update(
                pol, critic, mathnn.init_adam(pol.trainable()),
                mathnn.init_adam(critic.net), buf, hyper, make_rng(16, "upd"))
            return mathnn.tree_leaves(pol2.trainable())

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestModelPairs:
    def test_pairs_skip_episode_boundaries(self, hyper):
        pol, critic, venv = small_setup(17)
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(17, "roll"))
        buf.dones[:, 3] = True
        obs, act, nxt = ppo.model_pairs(buf)
        assert obs.shape[0] == 4 * 20 - 4
        assert obs.shape[1] == 9 and act.shape[1] == 3 and nxt.shape[1] == 9

    def test_pair_alignment(self, hyper):
        pol, critic, venv = small_setup(18)
        buf, _ = collect_rollout(pol, critic, venv, 20, hyper, make_rng(18, "roll"))
        obs, act, nxt = ppo.model_pairs(buf)
        np.testing.assert_array_equal(obs[0], buf.obs[0, 0])
        np.testing.assert_array_equal(nxt[0], buf.next_obs[0, 0])
        # within an unbroken episode the next obs is the following step's obs
        if not buf.dones[0, 0]:
            np.testing.assert_array_equal(buf.next_obs[0, 0], buf.obs[0, 1])


def test_actor_loss_gradients_pass_fd_check():
    # central differences on an O(1) loss resolve gradients down to ~1e-7;
    # the seeded subsample keeps the check away from smaller entries, whose
    # apparent error is oracle noise rather than a gradient defect
    rng = make_rng(19, "fd21")
    pol = polmod.make_policy(rng, H, has_refs=True, enc_hidden=[12], latent_dim=6,
                             actor_hidden=[12], init_log_std=np.log(0.5))
    x = rng.standard_normal((16, pol.input_dim))
    out = polmod.act(pol, x, rng=rng)
    logp_old = polmod.gaussian_log_prob(out.mean, pol.log_std, out.action)
    adv = rng.standard_normal(16)
    hyper = PpoConfig()

    def loss_and_grad(tree):
        p = pol.with_trainable(tree)
        return ppo.actor_loss_and_grads(p, x, out.action, logp_old, adv, hyper)

    err = mathnn.finite_diff_check(loss_and_grad, pol.trainable(), eps=1e-5)
    assert err < 1e-4


def test_critic_loss_gradients_pass_fd_check():
    rng = make_rng(20, "fd")
    critic = polmod.make_critic(rng, H, [16, 16])
    x = rng.standard_normal((16, critic.input_dim))
    ret = rng.standard_normal(16)
    hyper = PpoConfig()

    def loss_and_grad(net):
        c = polmod.CriticParams(net=net, hist_len=H)
        return ppo.critic_loss_and_grads(c, x, ret, hyper)

    err = mathnn.finite_diff_check(loss_and_grad, critic.net, eps=1e-5,
                                   rng=rng, max_entries=300)
    assert err < 1e-4
