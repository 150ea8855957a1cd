"""Two-stage training pipeline and ablation variant wiring.

Stage 1 (reference): PPO-train a tracking policy in the fixed, noise-free
environment and fit the dynamics model on the same rollouts; then calibrate
and freeze the sigma statistics.  Stage 2 (robust): PPO-train a fresh policy
under full randomization, feeding it per-step imagined transitions built from
the frozen stage-1 artifacts.  Variants A-F rewire how (and whether) the
reference inputs reach the actor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import dynmodel as dynmod
from . import env as envmod
from . import mathnn, policy as polmod, ppo as ppomod
from .config import RunConfig, make_rng
from .dynmodel import DynModelParams, SigmaStats
from .env import ACT_DIM, OBS_DIM, VecEnv
from .policy import CriticParams, PolicyParams

Array = np.ndarray


class ReferenceTrainingError(RuntimeError):
    """Stage 1 failed to produce a usable reference policy."""


@dataclass(frozen=True)
class Variant:
    tag: str
    has_refs: bool
    adjust_enabled: bool
    residual: bool
    zero_action_ref: bool
    zero_state_ref: bool


VARIANTS = {
    "A": Variant("A", False, False, False, False, False),
    "B": Variant("B", True, False, False, False, False),
    "C": Variant("C", True, True, True, False, False),
    "D": Variant("D", True, True, False, True, False),
    "E": Variant("E", True, True, False, False, True),
    "F": Variant("F", True, True, False, False, False),
}


@dataclass
class ImaginedTransition:
    """(current obs, reference action, gated next-obs prediction) per env.

    The raw model mean and sigma ride along for the variants that bypass the
    adjustment.
    """

    obs: Array       # (n, OBS_DIM)
    a_ref: Array     # (n, ACT_DIM)
    o_ref: Array     # (n, OBS_DIM), adjusted prediction
    mu: Array        # (n, OBS_DIM)
    sigma: Array     # (n, OBS_DIM)


@dataclass
class Stage1Artifacts:
    policy: PolicyParams
    critic: CriticParams
    model: DynModelParams
    stats: SigmaStats
    iterations: int
    eval_score: float
    level: int
    curves: list = field(default_factory=list)


@dataclass
class Stage2Result:
    policy: PolicyParams
    critic: CriticParams
    variant: str
    iterations: int
    diverged: bool
    curves: list = field(default_factory=list)


def make_imagined_transition(ideal: PolicyParams, model: DynModelParams,
                             stats: SigmaStats, history) -> ImaginedTransition:
    """Compose reference action, model prediction, and gating for one history
    (or a batch of histories shaped (n, H+1, OBS_DIM))."""
    if isinstance(history, polmod.ObservationHistory):
        frames = history.frames[None, :, :]
    else:
        frames = np.asarray(history, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None, :, :]
    n = frames.shape[0]
    hist_flat = frames.reshape(n, -1)
    a_ref = polmod.policy_mean(ideal, hist_flat)
    obs = frames[:, 0]
    mu, sigma = dynmod.predict(model, obs, a_ref)
    o_ref = dynmod.adjust(mu, sigma, stats)
    return ImaginedTransition(obs=obs, a_ref=a_ref, o_ref=o_ref, mu=mu, sigma=sigma)


def wiring_refs(variant: Variant, tr: ImaginedTransition) -> tuple[Array, Array] | None:
    """Reference slots as the actor sees them, or None for the plain baseline."""
    if not variant.has_refs:
        return None
    a_in = np.zeros_like(tr.a_ref) if variant.zero_action_ref else tr.a_ref
    o_base = tr.mu if not variant.adjust_enabled else tr.o_ref
    o_in = np.zeros_like(o_base) if variant.zero_state_ref else o_base
    return a_in, o_in


def wiring_action(variant: Variant, tr: ImaginedTransition, raw_action: Array) -> Array:
    """Executed action: residual variants add the reference action."""
    return tr.a_ref + raw_action if variant.residual else raw_action


def variant_wiring(variant: Variant, tr: ImaginedTransition, raw_action: Array
                   ) -> tuple[tuple[Array, Array] | None, Array]:
    return wiring_refs(variant, tr), wiring_action(variant, tr, raw_action)


def make_ref_callbacks(ideal: PolicyParams, model: DynModelParams, stats: SigmaStats,
                       variant: Variant):
    """(ref_fn, act_transform) pair for the rollout collector."""
    if not variant.has_refs:
        return None, None

    def ref_fn(obs_hist: Array) -> tuple[Array, Array]:
        tr = make_imagined_transition(ideal, model, stats, obs_hist)
        return wiring_refs(variant, tr)

    if variant.residual:
        def act_transform(raw: Array, a_ref_in: Array) -> Array:
            return a_ref_in + raw
    else:
        act_transform = None
    return ref_fn, act_transform


def params_checksum(tree) -> str:
    """Content hash of a parameter tree (stage-1 immutability checks)."""
    h = hashlib.sha256()
    for leaf in mathnn.tree_leaves(tree):
        h.update(np.ascontiguousarray(leaf, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# deterministic evaluation episodes (shared by the stage-1 gate and eval)


@dataclass
class EpisodeBatch:
    """Aggregates over a batch of evaluation episodes."""

    lin_score: Array     # (e,) mean exp(-err^2/0.25) over alive steps
    ang_score: Array
    lin_err: Array       # (e,) mean squared linear tracking error
    ang_err: Array
    survived: Array      # (e,) bool
    steps_alive: Array   # (e,) int
    obs_seq: Array | None = None    # (e, T+1, OBS_DIM) when recorded
    act_seq: Array | None = None    # (e, T, ACT_DIM) when recorded


def run_episode_batch(cfg: RunConfig, pol: PolicyParams, params: envmod.DynamicsParams,
                      rng: np.random.Generator, steps: int,
                      commands: Array, command_hold: int | None = None,
                      command_lin: float = 0.0, command_ang: float = 0.0,
                      variant: Variant | None = None,
                      ideal: PolicyParams | None = None,
                      model: DynModelParams | None = None,
                      stats: SigmaStats | None = None,
                      push_step: Array | None = None,
                      push_delta: Array | None = None,
                      record: bool = False) -> EpisodeBatch:
    """Run a batch of fixed-length episodes with the deterministic policy.

    Commands start at ``commands`` and, when ``command_hold`` is set, are
    resampled from +-(command_lin, command_ang) every ``command_hold`` steps.
    Failed episodes are frozen in place: they stop accumulating error and keep
    ``survived = False``.
    """
    variant = variant if variant is not None else VARIANTS["A"]
    e = params.mass.shape[0]
    hist_len = pol.hist_len
    state, obs = envmod.reset(cfg.env, params, 0, rng, n=e,
                              command=commands, buf_len=cfg.rand.delay_max + 1)
    obs_hist = np.tile(obs[:, None, :], (1, hist_len + 1, 1))

    alive = np.ones(e, dtype=bool)
    steps_alive = np.zeros(e, dtype=np.int64)
    lin_s = np.zeros(e)
    ang_s = np.zeros(e)
    lin_e2 = np.zeros(e)
    ang_e2 = np.zeros(e)
    obs_seq = np.zeros((e, steps + 1, OBS_DIM)) if record else None
    act_seq = np.zeros((e, steps, ACT_DIM)) if record else None
    if record:
        obs_seq[:, 0] = obs

    for t in range(steps):
        if command_hold is not None and t > 0 and t % command_hold == 0:
            cmd = np.empty((e, 3))
            cmd[:, 0] = rng.uniform(-command_lin, command_lin, e)
            cmd[:, 1] = rng.uniform(-command_lin, command_lin, e)
            cmd[:, 2] = rng.uniform(-command_ang, command_ang, e)
            state.command[:] = np.where(alive[:, None], cmd, state.command)
            obs_hist[:, 0, 0:3] = state.command

        hist_flat = obs_hist.reshape(e, -1)
        if variant.has_refs:
            tr = make_imagined_transition(ideal, model, stats, obs_hist)
            refs = wiring_refs(variant, tr)
            actor_in = polmod.build_actor_input(hist_flat, refs[0], refs[1], has_refs=True)
        else:
            tr = None
            actor_in = polmod.build_actor_input(hist_flat, has_refs=pol.has_refs)
        raw = polmod.policy_mean(pol, actor_in)
        executed = raw if tr is None else wiring_action(variant, tr, raw)
        executed = np.where(alive[:, None], executed, 0.0)

        if push_step is not None:
            due = alive & (push_step == t)
            if due.any():
                state = envmod.apply_push(state, rng, 0.0,
                                          mask=due.astype(np.float64), delta=push_delta)

        state, terms, fail, _ = envmod.step(state, executed, cfg.env, k=cfg.lit.action_scale)
        # keep failed episodes frozen in place so later steps stay finite
        dead = ~(alive & ~fail)
        if dead.any():
            state.vel[dead] = 0.0
            state.omega[dead] = 0.0
        obs = envmod.observe(state, cfg.env, rng)
        obs_hist = np.concatenate([obs[:, None, :], obs_hist[:, :-1]], axis=1)
        if record:
            obs_seq[:, t + 1] = obs
            act_seq[:, t] = executed

        vb = envmod.body_vel(state)
        lin_err2 = np.sum((state.command[:, 0:2] - vb) ** 2, axis=1)
        ang_err2 = (state.command[:, 2] - state.omega) ** 2
        lin_s += np.where(alive, terms.lin_tracking, 0.0)
        ang_s += np.where(alive, terms.ang_tracking, 0.0)
        lin_e2 += np.where(alive, lin_err2, 0.0)
        ang_e2 += np.where(alive, ang_err2, 0.0)
        steps_alive += alive.astype(np.int64)
        alive = alive & ~fail

    denom = np.maximum(steps_alive, 1)
    return EpisodeBatch(
        lin_score=lin_s / denom, ang_score=ang_s / denom,
        lin_err=lin_e2 / denom, ang_err=ang_e2 / denom,
        survived=alive.copy(), steps_alive=steps_alive,
        obs_seq=obs_seq, act_seq=act_seq,
    )


def fixed_eval_score(cfg: RunConfig, pol: PolicyParams, seed: int, episodes: int,
                     tag: str = "stage1-eval") -> float:
    """Mean linear tracking score over fixed-dynamics evaluation episodes."""
    rng = make_rng(seed, tag)
    params = envmod.nominal_dynamics(cfg.env, episodes)
    cmd = np.empty((episodes, 3))
    cmd[:, 0] = rng.uniform(-cfg.eval.cmd_lin, cfg.eval.cmd_lin, episodes)
    cmd[:, 1] = rng.uniform(-cfg.eval.cmd_lin, cfg.eval.cmd_lin, episodes)
    cmd[:, 2] = rng.uniform(-cfg.eval.cmd_ang, cfg.eval.cmd_ang, episodes)
    batch = run_episode_batch(cfg, pol, params, rng, cfg.eval.episode_steps, cmd,
                              command_hold=cfg.eval.command_hold_steps,
                              command_lin=cfg.eval.cmd_lin,
                              command_ang=cfg.eval.cmd_ang)
    return float(batch.lin_score.mean())


# ---------------------------------------------------------------------------
# stage 1: reference policy + dynamics model in fixed dynamics


def train_reference(cfg: RunConfig, seed: int | None = None) -> Stage1Artifacts:
    seed = cfg.seed if seed is None else seed
    init_rng = make_rng(seed, "stage1-init")
    pol = polmod.make_policy(init_rng, cfg.lit.history_len, has_refs=False,
                             enc_hidden=cfg.lit.enc_hidden, latent_dim=cfg.lit.latent_dim,
                             actor_hidden=cfg.lit.actor_hidden,
                             init_log_std=cfg.lit.init_log_std)
    critic = polmod.make_critic(init_rng, cfg.lit.history_len, cfg.lit.critic_hidden)
    model = dynmod.make_dynmodel(init_rng, cfg.lit.dyn_hidden, cfg.lit.sigma_floor)

    adam_actor = mathnn.init_adam(pol.trainable(), lr=cfg.ppo.lr)
    adam_critic = mathnn.init_adam(critic.net, lr=cfg.ppo.lr)
    adam_dyn = mathnn.init_adam(model.trainable(), lr=cfg.lit.dyn_lr)

    venv = VecEnv(cfg.env, cfg.rand, cfg.ppo.n_envs, cfg.lit.history_len,
                  make_rng(seed, "stage1-env"), fixed=True, level=0,
                  k=cfg.lit.action_scale)
    venv.reset_all()
    rng = make_rng(seed, "stage1-train")

    level = 0
    last_eval_level = -1
    curves: list[dict] = []
    score = 0.0
    evaluated = False
    iterations = 0
    for it in range(cfg.lit.stage1_iters):
        iterations = it + 1
        buf, stats = ppomod.collect_rollout(pol, critic, venv, cfg.ppo.rollout_steps,
                                            cfg.ppo, rng)
        pol, critic, adam_actor, adam_critic, ustats = ppomod.ppo_update(
            pol, critic, adam_actor, adam_critic, buf, cfg.ppo, rng)
        if ustats["aborted"]:
            raise ReferenceTrainingError(f"stage 1 update hit non-finite loss at "
                                         f"iteration {it}")

        obs_b, act_b, nxt_b = ppomod.model_pairs(buf)
        dyn_loss = 0.0
        n_batches = 0
        for _ in range(cfg.lit.dyn_epochs):
            order = rng.permutation(obs_b.shape[0])
            for chunk in np.array_split(order, cfg.lit.dyn_minibatches):
                model, adam_dyn, dl = dynmod.train_batch(
                    model, adam_dyn, obs_b[chunk], act_b[chunk], nxt_b[chunk])
                dyn_loss += dl
                n_batches += 1

        level = envmod.curriculum_update(level, stats["lin_score"], cfg.env)
        venv.set_level(level)
        curves.append({"iter": it, "lin_score": stats["lin_score"],
                       "ang_score": stats["ang_score"], "level": level,
                       "reward": stats["reward"],
                       "actor_loss": ustats["actor_loss"],
                       "value_loss": ustats["value_loss"],
                       "dyn_loss": dyn_loss / max(n_batches, 1)})

        if (it + 1) % cfg.lit.eval_every == 0:
            # evaluate once the command curriculum has topped out or stalled
            settled = level >= cfg.env.levels - 1 or level <= last_eval_level
            last_eval_level = level
            if settled or not cfg.lit.stage1_require_plateau:
                score = fixed_eval_score(cfg, pol, seed, cfg.lit.stage1_eval_episodes)
                evaluated = True
                if score >= cfg.lit.stage1_target_score:
                    break

    if not evaluated or score < cfg.lit.stage1_target_score:
        score = fixed_eval_score(cfg, pol, seed, cfg.lit.stage1_eval_episodes)
    if score < cfg.lit.stage1_min_score:
        raise ReferenceTrainingError(
            f"reference policy unusable: eval lin score {score:.3f} < "
            f"{cfg.lit.stage1_min_score} after {iterations} iterations "
            f"(level {level}/{cfg.env.levels - 1})")

    # calibration: frozen model's sigma range over fresh in-distribution rollouts
    stats_acc = SigmaStats.empty(OBS_DIM)
    for _ in range(cfg.lit.calib_rollouts):
        buf, _ = ppomod.collect_rollout(pol, critic, venv, cfg.ppo.rollout_steps,
                                        cfg.ppo, rng)
        obs_b, act_b, _ = ppomod.model_pairs(buf)
        _, sigma = dynmod.predict(model, obs_b, act_b)
        stats_acc = dynmod.update_sigma_stats(stats_acc, sigma)

    return Stage1Artifacts(policy=pol, critic=critic, model=model, stats=stats_acc,
                           iterations=iterations, eval_score=score, level=level,
                           curves=curves)


# ---------------------------------------------------------------------------
# stage 2: robust policy under randomization


def train_robust(cfg: RunConfig, artifacts: Stage1Artifacts | None, variant_tag: str,
                 seed: int | None = None) -> Stage2Result:
    seed = cfg.seed if seed is None else seed
    variant = VARIANTS[variant_tag]
    if variant.has_refs and artifacts is None:
        raise ValueError(f"variant {variant_tag} needs stage-1 artifacts")

    init_rng = make_rng(seed, "stage2-init", variant_tag)
    pol = polmod.make_policy(init_rng, cfg.lit.history_len, has_refs=variant.has_refs,
                             enc_hidden=cfg.lit.enc_hidden, latent_dim=cfg.lit.latent_dim,
                             actor_hidden=cfg.lit.actor_hidden,
                             init_log_std=cfg.lit.init_log_std)
    critic = polmod.make_critic(init_rng, cfg.lit.history_len, cfg.lit.critic_hidden)
    lr = cfg.lit.stage2_lr or cfg.ppo.lr
    adam_actor = mathnn.init_adam(pol.trainable(), lr=lr)
    adam_critic = mathnn.init_adam(critic.net, lr=lr)

    if variant.has_refs:
        ref_fn, act_transform = make_ref_callbacks(artifacts.policy, artifacts.model,
                                                   artifacts.stats, variant)
    else:
        ref_fn, act_transform = None, None

    n_envs = cfg.lit.stage2_n_envs or cfg.ppo.n_envs
    level = min(max(cfg.lit.stage2_start_level, 0), cfg.env.levels - 1)
    venv = VecEnv(cfg.env, cfg.rand, n_envs, cfg.lit.history_len,
                  make_rng(seed, "stage2-env", variant_tag), fixed=False,
                  level=level, k=cfg.lit.action_scale)
    venv.reset_all()
    rng = make_rng(seed, "stage2-train", variant_tag)
    curves: list[dict] = []
    diverged = False
    recent: list[float] = []
    iterations = 0
    for it in range(cfg.lit.stage2_iters):
        iterations = it + 1
        buf, stats = ppomod.collect_rollout(pol, critic, venv, cfg.ppo.rollout_steps,
                                            cfg.ppo, rng, ref_fn=ref_fn,
                                            act_transform=act_transform)
        pol, critic, adam_actor, adam_critic, ustats = ppomod.ppo_update(
            pol, critic, adam_actor, adam_critic, buf, cfg.ppo, rng)
        # the configured start level is also a floor: robust training keeps
        # its disturbances (and pushes) active instead of demoting to zero
        level = max(envmod.curriculum_update(level, stats["lin_score"], cfg.env),
                    min(cfg.lit.stage2_start_level, cfg.env.levels - 1))
        venv.set_level(level)
        curves.append({"iter": it, "lin_score": stats["lin_score"],
                       "ang_score": stats["ang_score"], "level": level,
                       "reward": stats["reward"],
                       "actor_loss": ustats["actor_loss"],
                       "value_loss": ustats["value_loss"]})
        if ustats["aborted"]:
            diverged = True
            break
        recent.append(stats["lin_score"])
        if len(recent) > 10:
            recent.pop(0)
        if it >= 50 and len(recent) == 10 and max(recent) < 0.05:
            diverged = True
            break

    return Stage2Result(policy=pol, critic=critic, variant=variant_tag,
                        iterations=iterations, diverged=diverged, curves=curves)
