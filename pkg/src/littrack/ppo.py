"""On-policy PPO: vectorized rollouts, GAE, clipped surrogate with hand gradients.

The update differentiates the exact objective used for reporting: clipped
surrogate plus value MSE minus an entropy bonus.  Actor and critic gradients
are clipped by global norm and applied with separate Adam states.  A non-finite
loss or gradient aborts the update and keeps the previous parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as envmod
from . import mathnn, policy as polmod
from .config import PpoConfig
from .env import ACT_DIM, OBS_DIM, VecEnv
from .mathnn import AdamState
from .policy import CriticParams, PolicyParams

Array = np.ndarray


@dataclass
class RolloutBuffer:
    """Per-env, per-step records; arrays have shape (n_envs, T, ...)."""

    actor_in: Array
    priv_in: Array
    obs: Array
    next_obs: Array
    actions: Array
    log_probs: Array
    rewards: Array        # scaled rewards used for the update
    values: Array
    dones: Array
    bootstrap_value: Array  # (n_envs,)
    ref_action: Array | None = None
    ref_obs: Array | None = None

    @property
    def n_envs(self) -> int:
        return self.actions.shape[0]

    @property
    def steps(self) -> int:
        return self.actions.shape[1]


def collect_rollout(pol: PolicyParams, critic: CriticParams, venv: VecEnv, steps: int,
                    hyper: PpoConfig, rng: np.random.Generator,
                    ref_fn=None, act_transform=None) -> tuple[RolloutBuffer, dict]:
    """Roll the vector env for ``steps`` under the stochastic policy.

    ``ref_fn(obs_hist) -> (a_ref, o_ref)`` supplies per-step reference inputs
    for reference-conditioned variants; ``act_transform(raw, a_ref)`` maps the
    sampled action to the executed one (residual wiring).  Environments
    auto-reset inside the vector env; time-outs bootstrap the critic value
    into the reward so the cut looks like a continuing episode.
    """
    n = venv.n
    da = pol.input_dim
    dp = critic.input_dim
    buf = RolloutBuffer(
        actor_in=np.zeros((n, steps, da)),
        priv_in=np.zeros((n, steps, dp)),
        obs=np.zeros((n, steps, OBS_DIM)),
        next_obs=np.zeros((n, steps, OBS_DIM)),
        actions=np.zeros((n, steps, ACT_DIM)),
        log_probs=np.zeros((n, steps)),
        rewards=np.zeros((n, steps)),
        values=np.zeros((n, steps)),
        dones=np.zeros((n, steps), dtype=bool),
        bootstrap_value=np.zeros(n),
        ref_action=None if ref_fn is None else np.zeros((n, steps, ACT_DIM)),
        ref_obs=None if ref_fn is None else np.zeros((n, steps, OBS_DIM)),
    )
    lin_sum = ang_sum = rew_sum = 0.0
    completed: list[float] = []
    fails = 0

    for t in range(steps):
        hist_flat = venv.hist_flat.copy()
        cur_obs = venv.obs_hist[:, 0].copy()
        if ref_fn is not None:
            a_ref, o_ref = ref_fn(venv.obs_hist)
            actor_in = polmod.build_actor_input(hist_flat, a_ref, o_ref, has_refs=True)
            buf.ref_action[:, t] = a_ref
            buf.ref_obs[:, t] = o_ref
        else:
            a_ref = None
            actor_in = polmod.build_actor_input(hist_flat, has_refs=pol.has_refs)
        priv_in = venv.priv_flat.copy()

        out = polmod.act(pol, actor_in, deterministic=False, rng=rng)
        value = polmod.evaluate_critic(critic, priv_in)
        executed = out.action if act_transform is None else act_transform(out.action, a_ref)

        res = venv.step(executed)

        reward = res.terms.total * hyper.reward_scale
        if res.timeout.any():
            idx = np.flatnonzero(res.timeout)
            v_term = polmod.evaluate_critic(critic, res.priv_next_flat[idx])
            reward[idx] += hyper.gamma * v_term

        buf.actor_in[:, t] = actor_in
        buf.priv_in[:, t] = priv_in
        buf.obs[:, t] = cur_obs
        buf.next_obs[:, t] = res.next_obs
        buf.actions[:, t] = out.action
        buf.log_probs[:, t] = polmod.gaussian_log_prob(out.mean, pol.log_std, out.action)
        buf.rewards[:, t] = reward
        buf.values[:, t] = value
        buf.dones[:, t] = res.done

        lin_sum += float(res.terms.lin_tracking.mean())
        ang_sum += float(res.terms.ang_tracking.mean())
        rew_sum += float(res.terms.total.mean())
        fails += int(res.fail.sum())
        completed.extend(float(x) for x in res.completed_lin)

    buf.bootstrap_value = polmod.evaluate_critic(critic, venv.priv_flat)
    stats = {
        "lin_score": lin_sum / steps,
        "ang_score": ang_sum / steps,
        "reward": rew_sum / steps,
        "fails": fails,
        "completed_lin": completed,
    }
    return buf, stats


def compute_gae(rewards: Array, values: Array, dones: Array, bootstrap_value,
                gamma: float, lam: float) -> tuple[Array, Array]:
    """Generalized advantage estimation over (n_envs, T) arrays.

    1-D inputs are treated as a single sequence.  ``dones`` masks the
    bootstrap so no value flows across an episode boundary.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards = rewards[None, :]
        values = np.asarray(values, dtype=np.float64)[None, :]
        dones = np.asarray(dones, dtype=bool)[None, :]
        bootstrap_value = np.atleast_1d(np.asarray(bootstrap_value, dtype=np.float64))
    else:
        values = np.asarray(values, dtype=np.float64)
        dones = np.asarray(dones, dtype=bool)
        bootstrap_value = np.asarray(bootstrap_value, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("compute_gae: rewards/values/dones shapes differ")
    n, steps = rewards.shape
    adv = np.zeros((n, steps))
    carry = np.zeros(n)
    next_value = bootstrap_value
    for t in range(steps - 1, -1, -1):
        live = 1.0 - dones[:, t].astype(np.float64)
        delta = rewards[:, t] + gamma * next_value * live - values[:, t]
        carry = delta + gamma * lam * live * carry
        adv[:, t] = carry
        next_value = values[:, t]
    returns = adv + values
    if squeeze:
        return adv[0], returns[0]
    return adv, returns


def clipped_objective(ratio: Array, adv: Array, clip_eps: float) -> Array:
    """Per-sample PPO objective min(ratio*A, clip(ratio)*A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _surrogate_dlogp(ratio: Array, adv: Array, clip_eps: float) -> Array:
    """d/d(logp) of the per-sample clipped objective."""
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    in_band = (ratio > 1.0 - clip_eps) & (ratio < 1.0 + clip_eps)
    d_ratio = np.where(s1 <= s2, adv, np.where(in_band, adv, 0.0))
    return d_ratio * ratio


def actor_loss_and_grads(pol: PolicyParams, actor_in: Array, actions: Array,
                         logp_old: Array, adv: Array, hyper: PpoConfig
                         ) -> tuple[float, dict]:
    """Clipped surrogate minus entropy bonus, with gradients for the actor tree."""
    m = actor_in.shape[0]
    mean, caches = polmod.policy_mean_cached(pol, actor_in)
    std = np.exp(pol.log_std)
    logp = polmod.gaussian_log_prob(mean, pol.log_std, actions)
    ratio = np.exp(logp - logp_old)
    entropy = polmod.gaussian_entropy(pol.log_std)
    loss = float(-np.mean(clipped_objective(ratio, adv, hyper.clip_eps))
                 - hyper.entropy_coef * entropy)

    d_logp = -_surrogate_dlogp(ratio, adv, hyper.clip_eps) / m
    z = (actions - mean) / std
    d_mean = d_logp[:, None] * z / std
    grads = polmod.policy_backward_cached(pol, caches, d_mean)
    grads["log_std"] = (d_logp[:, None] * (z * z - 1.0)).sum(axis=0) \
        - hyper.entropy_coef
    return loss, grads


def critic_loss_and_grads(critic: CriticParams, priv_in: Array, returns: Array,
                          hyper: PpoConfig) -> tuple[float, object]:
    """Weighted value MSE with gradients for the critic net."""
    m = priv_in.shape[0]
    v, cache = polmod.evaluate_critic_cached(critic, priv_in)
    err = v - returns
    loss = float(hyper.value_coef * np.mean(err * err))
    d_v = 2.0 * hyper.value_coef * err / m
    grads = polmod.critic_backward_cached(critic, cache, d_v)
    return loss, grads


def ppo_update(pol: PolicyParams, critic: CriticParams, adam_actor: AdamState,
               adam_critic: AdamState, buf: RolloutBuffer, hyper: PpoConfig,
               rng: np.random.Generator):
    """Run the clipped-surrogate update over epochs x minibatches.

    Returns (policy, critic, adam_actor, adam_critic, stats); on a non-finite
    loss or gradient the incoming parameters are returned unchanged with
    ``stats['aborted'] = True``.
    """
    m = buf.n_envs * buf.steps
    actor_in = buf.actor_in.reshape(m, -1)
    priv_in = buf.priv_in.reshape(m, -1)
    actions = buf.actions.reshape(m, ACT_DIM)
    logp_old = buf.log_probs.reshape(m)
    adv, returns = compute_gae(buf.rewards, buf.values, buf.dones,
                               buf.bootstrap_value, hyper.gamma, hyper.lam)
    adv = adv.reshape(m)
    returns = returns.reshape(m)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"actor_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "approx_kl": 0.0, "aborted": False}
    batches = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(m)
        for chunk in np.array_split(order, hyper.minibatches):
            a_loss, a_grads = actor_loss_and_grads(
                pol, actor_in[chunk], actions[chunk], logp_old[chunk], adv[chunk], hyper)
            c_loss, c_grads = critic_loss_and_grads(
                critic, priv_in[chunk], returns[chunk], hyper)
            if not (np.isfinite(a_loss) and np.isfinite(c_loss)):
                stats["aborted"] = True
                return pol, critic, adam_actor, adam_critic, stats
            a_grads = mathnn.clip_tree_by_norm(a_grads, hyper.max_grad_norm)
            c_grads = mathnn.clip_tree_by_norm(c_grads, hyper.max_grad_norm)
            try:
                tree, adam_actor = mathnn.adam_step(pol.trainable(), a_grads, adam_actor)
                critic_net, adam_critic = mathnn.adam_step(critic.net, c_grads, adam_critic)
            except ValueError:
                stats["aborted"] = True
                return pol, critic, adam_actor, adam_critic, stats
            tree["log_std"] = np.clip(tree["log_std"], -4.0, 1.0)
            pol = pol.with_trainable(tree)
            critic = CriticParams(net=critic_net, hist_len=critic.hist_len)
            stats["actor_loss"] += a_loss
            stats["value_loss"] += c_loss
            batches += 1

    # post-update diagnostics on the full batch
    mean = polmod.policy_mean(pol, actor_in)
    logp_new = polmod.gaussian_log_prob(mean, pol.log_std, actions)
    stats["approx_kl"] = float(np.mean(logp_old - logp_new))
    stats["entropy"] = polmod.gaussian_entropy(pol.log_std)
    stats["actor_loss"] /= max(batches, 1)
    stats["value_loss"] /= max(batches, 1)
    return pol, critic, adam_actor, adam_critic, stats


def model_pairs(buf: RolloutBuffer) -> tuple[Array, Array, Array]:
    """(obs, action, next_obs) training triples, skipping episode boundaries."""
    keep = ~buf.dones.reshape(-1)
    obs = buf.obs.reshape(-1, OBS_DIM)[keep]
    act = buf.actions.reshape(-1, ACT_DIM)[keep]
    nxt = buf.next_obs.reshape(-1, OBS_DIM)[keep]
    return obs, act, nxt
