"""Planar velocity-tracking environment, vectorized over parallel instances.

A holonomic rigid body on the plane with three actuators (longitudinal force,
lateral force, yaw torque) tracks body-frame velocity commands
[v_x, v_y, omega].  Hidden per-episode dynamics (mass, drag, actuator gain,
payload, sensor bias/delay, a constant external force) are sampled from
configurable ranges; the agent only sees noisy, possibly delayed velocity
measurements, the command, and its previous action.

All state containers hold arrays with a leading instance axis of size n; use
n=1 for single-environment semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import EnvConfig, RandConfig

Array = np.ndarray

OBS_DIM = 9          # command(3) + measured v(2) + measured omega(1) + prev action(3)
PRIV_DIM = 18        # OBS_DIM + true v(2) + true omega(1) + f_ext body(2) + dynamics(4)
ACT_DIM = 3


@dataclass
class DynamicsParams:
    """Hidden true dynamics, one row per environment instance."""

    mass: Array          # (n,) kg
    inertia: Array       # (n,) kg*m^2
    lin_drag: Array      # (n,) 1/s
    ang_drag: Array      # (n,) 1/s
    gain: Array          # (n,) actuator gain multiplier
    payload: Array       # (n,) kg, added to mass
    f_ext: Array         # (n,2) world-frame N
    f_ext_onset: Array   # (n,) step index at which f_ext switches on
    v_bias: Array        # (n,2) velocity sensor bias, m/s
    delay: Array         # (n,) observation delay in steps, int
    noise_on: Array      # (n,) 1.0 when sensing noise is active

    def validate(self) -> None:
        if np.any(self.mass + self.payload <= 0.0):
            raise ValueError("total mass must be positive")
        if np.any(self.inertia <= 0.0) or np.any(self.gain <= 0.0):
            raise ValueError("inertia and gain must be positive")
        if np.any(self.lin_drag < 0.0) or np.any(self.ang_drag < 0.0):
            raise ValueError("drag coefficients must be non-negative")
        if np.any(self.delay < 0):
            raise ValueError("delay must be >= 0")


@dataclass
class EnvState:
    pos: Array           # (n,2) world m
    heading: Array       # (n,) rad
    vel: Array           # (n,2) world m/s
    omega: Array         # (n,) rad/s
    step: Array          # (n,) int steps since episode start
    command: Array       # (n,3) body-frame [vx, vy, omega]
    prev_action: Array   # (n,3) last action passed to step
    prev_action2: Array  # (n,3) action before that
    sensor_buf: Array    # (n, delay_max+1, 3) past true [v_body, omega], newest first
    params: DynamicsParams


@dataclass
class RewardTerms:
    """Per-term reward values; tracking terms in (0,1], penalties <= 0."""

    lin_tracking: Array
    ang_tracking: Array
    action_rate: Array
    smoothness: Array
    energy: Array
    total: Array


REWARD_WEIGHTS = {
    "lin_tracking": 1.0,
    "ang_tracking": 0.5,
    "action_rate": 0.01,
    "smoothness": 0.01,
    "energy": 2e-4,
}


def rot(heading: Array) -> Array:
    """Body-to-world rotation matrices, (n,2,2)."""
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def body_vel(state: EnvState) -> Array:
    """World velocity expressed in the body frame, (n,2)."""
    c, s = np.cos(state.heading), np.sin(state.heading)
    vx = c * state.vel[:, 0] + s * state.vel[:, 1]
    vy = -s * state.vel[:, 0] + c * state.vel[:, 1]
    return np.stack([vx, vy], -1)


# ---------------------------------------------------------------------------
# dynamics sampling


def nominal_dynamics(cfg: EnvConfig, n: int) -> DynamicsParams:
    return DynamicsParams(
        mass=np.full(n, cfg.mass),
        inertia=np.full(n, cfg.inertia),
        lin_drag=np.full(n, cfg.lin_drag),
        ang_drag=np.full(n, cfg.ang_drag),
        gain=np.ones(n),
        payload=np.zeros(n),
        f_ext=np.zeros((n, 2)),
        f_ext_onset=np.zeros(n, dtype=np.int64),
        v_bias=np.zeros((n, 2)),
        delay=np.zeros(n, dtype=np.int64),
        noise_on=np.zeros(n),
    )


def sample_dynamics(cfg: EnvConfig, rand: RandConfig, rng: np.random.Generator,
                    n: int = 1, fixed: bool = False) -> DynamicsParams:
    """Draw per-episode hidden dynamics; fixed=True returns exact nominals."""
    if fixed:
        return nominal_dynamics(cfg, n)
    if rand.mass_scale_lo > rand.mass_scale_hi or rand.payload_lo > rand.payload_hi \
            or rand.drag_scale_lo > rand.drag_scale_hi or rand.gain_lo > rand.gain_hi:
        raise ValueError("randomization ranges must satisfy lo <= hi")
    u = lambda lo, hi, size: rng.uniform(lo, hi, size)
    params = DynamicsParams(
        mass=cfg.mass * u(rand.mass_scale_lo, rand.mass_scale_hi, n),
        inertia=cfg.inertia * u(rand.mass_scale_lo, rand.mass_scale_hi, n),
        lin_drag=cfg.lin_drag * u(rand.drag_scale_lo, rand.drag_scale_hi, n),
        ang_drag=cfg.ang_drag * u(rand.drag_scale_lo, rand.drag_scale_hi, n),
        gain=u(rand.gain_lo, rand.gain_hi, n),
        payload=u(rand.payload_lo, rand.payload_hi, n),
        f_ext=u(-rand.f_ext_max, rand.f_ext_max, (n, 2)),
        f_ext_onset=np.zeros(n, dtype=np.int64),
        v_bias=u(-rand.v_bias_max, rand.v_bias_max, (n, 2)),
        delay=rng.integers(0, rand.delay_max + 1, n),
        noise_on=np.ones(n),
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# curriculum


def command_ranges(level: int, cfg: EnvConfig) -> tuple[float, float]:
    """(linear, angular) command magnitude at a curriculum level."""
    top = max(cfg.levels - 1, 1)
    frac = min(max(level, 0), top) / top
    lin = cfg.cmd_lin_lo + frac * (cfg.cmd_lin_hi - cfg.cmd_lin_lo)
    ang = cfg.cmd_ang_lo + frac * (cfg.cmd_ang_hi - cfg.cmd_ang_lo)
    return lin, ang


def push_magnitude(level: int, cfg: EnvConfig) -> float:
    top = max(cfg.levels - 1, 1)
    return cfg.push_max * min(max(level, 0), top) / top


def curriculum_update(level: int, mean_lin_tracking: float, cfg: EnvConfig,
                      promote: float = 0.8, demote: float = 0.4) -> int:
    """Promote at >= 80% linear tracking, demote below 40%; clamp to range."""
    if mean_lin_tracking >= promote:
        level += 1
    elif mean_lin_tracking < demote:
        level -= 1
    return min(max(level, 0), cfg.levels - 1)


def sample_commands(rng: np.random.Generator, n: int, level: int, cfg: EnvConfig) -> Array:
    lin, ang = command_ranges(level, cfg)
    cmd = np.empty((n, 3))
    cmd[:, 0] = rng.uniform(-lin, lin, n)
    cmd[:, 1] = rng.uniform(-lin, lin, n)
    cmd[:, 2] = rng.uniform(-ang, ang, n)
    return cmd


# ---------------------------------------------------------------------------
# reset / observe / step


def reset(cfg: EnvConfig, params: DynamicsParams, level: int,
          rng: np.random.Generator, n: int | None = None,
          command: Array | None = None, buf_len: int | None = None
          ) -> tuple[EnvState, Array]:
    """Fresh episodes: near-zero state, curriculum-level command, prefilled buffer."""
    if n is None:
        n = params.mass.shape[0]
    vel = cfg.reset_noise * rng.standard_normal((n, 2))
    omega = cfg.reset_noise * rng.standard_normal(n)
    if command is None:
        command = sample_commands(rng, n, level, cfg)
    if buf_len is None:
        buf_len = int(params.delay.max()) + 1 if params.delay.size else 1
    state = EnvState(
        pos=np.zeros((n, 2)),
        heading=np.zeros(n),
        vel=vel,
        omega=omega,
        step=np.zeros(n, dtype=np.int64),
        command=np.array(command, dtype=np.float64),
        prev_action=np.zeros((n, 3)),
        prev_action2=np.zeros((n, 3)),
        sensor_buf=np.zeros((n, buf_len, 3)),
        params=params,
    )
    vb = body_vel(state)
    frame0 = np.concatenate([vb, state.omega[:, None]], axis=1)
    state.sensor_buf[:] = frame0[:, None, :]
    return state, observe(state, cfg, rng)


def observe(state: EnvState, cfg: EnvConfig, rng: np.random.Generator) -> Array:
    """Actor-visible frame: delayed, biased, noisy velocities; clean command/action."""
    n = state.command.shape[0]
    d = state.params.delay
    if int(d.max()) >= state.sensor_buf.shape[1]:
        raise ValueError("observe: sensor buffer shorter than configured delay")
    delayed = state.sensor_buf[np.arange(n), d]
    noise = rng.standard_normal((n, 3)) * state.params.noise_on[:, None]
    obs = np.empty((n, OBS_DIM))
    obs[:, 0:3] = state.command
    obs[:, 3:5] = delayed[:, 0:2] + state.params.v_bias + cfg.lin_noise_std * noise[:, 0:2]
    obs[:, 5] = delayed[:, 2] + cfg.ang_noise_std * noise[:, 2]
    obs[:, 6:9] = state.prev_action
    return obs


def privileged_observe(state: EnvState, cfg: EnvConfig) -> Array:
    """Critic-only frame: the actor frame minus noise, plus ground truth."""
    n = state.command.shape[0]
    d = state.params.delay
    delayed = state.sensor_buf[np.arange(n), d]
    vb = body_vel(state)
    c, s = np.cos(state.heading), np.sin(state.heading)
    fx = c * state.params.f_ext[:, 0] + s * state.params.f_ext[:, 1]
    fy = -s * state.params.f_ext[:, 0] + c * state.params.f_ext[:, 1]
    active = (state.step >= state.params.f_ext_onset).astype(np.float64)
    obs = np.empty((n, PRIV_DIM))
    obs[:, 0:3] = state.command
    obs[:, 3:5] = delayed[:, 0:2] + state.params.v_bias
    obs[:, 5] = delayed[:, 2]
    obs[:, 6:9] = state.prev_action
    obs[:, 9:11] = vb
    obs[:, 11] = state.omega
    obs[:, 12] = fx * active
    obs[:, 13] = fy * active
    obs[:, 14] = state.params.mass + state.params.payload
    obs[:, 15] = state.params.lin_drag
    obs[:, 16] = state.params.ang_drag
    obs[:, 17] = state.params.gain
    return obs


def compute_reward(state_after: EnvState, action_t: Array, action_tm1: Array,
                   action_tm2: Array, cfg: EnvConfig) -> RewardTerms:
    """Tracking rewards plus action-rate / smoothness / energy penalties."""
    vb = body_vel(state_after)
    lin_err2 = np.sum((state_after.command[:, 0:2] - vb) ** 2, axis=1)
    ang_err2 = (state_after.command[:, 2] - state_after.omega) ** 2
    lin = np.exp(-lin_err2 / 0.25)
    ang = np.exp(-ang_err2 / 0.25)
    rate = -np.sum((action_t - action_tm1) ** 2, axis=1)
    smooth = -np.sum((action_t - 2.0 * action_tm1 + action_tm2) ** 2, axis=1)
    energy = -np.sum(action_t ** 2, axis=1)
    w = REWARD_WEIGHTS
    total = (w["lin_tracking"] * lin + w["ang_tracking"] * ang
             + w["action_rate"] * rate + w["smoothness"] * smooth
             + w["energy"] * energy)
    return RewardTerms(lin, ang, rate, smooth, energy, total)


def step(state: EnvState, action: Array, cfg: EnvConfig, k: float = 1.0
         ) -> tuple[EnvState, RewardTerms, Array, Array]:
    """Advance one control step with semi-implicit Euler.

    Returns (new_state, reward_terms, failed, timeout).  ``failed`` marks
    divergence-bound hits (or non-finite actions); ``timeout`` marks the step
    cap.  The sensor buffer is rolled with the post-step measurement; call
    ``observe`` on the new state for the next actor frame.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.ndim == 1:
        action = action[None, :]
    if action.shape != state.command.shape:
        raise ValueError(f"step: action shape {action.shape} != (n, {ACT_DIM})")
    bad = ~np.isfinite(action).all(axis=1)
    safe_action = np.where(bad[:, None], 0.0, action)

    p = state.params
    cmd_norm = np.clip(k * safe_action, -1.0, 1.0)
    f_body = p.gain[:, None] * cmd_norm[:, 0:2] * cfg.f_max
    tau = p.gain * cmd_norm[:, 2] * cfg.tau_max

    r = rot(state.heading)
    f_world = np.einsum("nij,nj->ni", r, f_body)
    active = (state.step >= p.f_ext_onset)[:, None]
    f_world = f_world + np.where(active, p.f_ext, 0.0)
    m_tot = (p.mass + p.payload)[:, None]

    vel = state.vel + cfg.dt * f_world / m_tot - cfg.dt * p.lin_drag[:, None] * state.vel
    omega = state.omega + cfg.dt * tau / p.inertia - cfg.dt * p.ang_drag * state.omega
    pos = state.pos + cfg.dt * vel
    heading = state.heading + cfg.dt * omega

    new = EnvState(
        pos=pos, heading=heading, vel=vel, omega=omega,
        step=state.step + 1,
        command=state.command.copy(),
        prev_action=np.where(bad[:, None], 0.0, action),
        prev_action2=state.prev_action.copy(),
        sensor_buf=np.roll(state.sensor_buf, 1, axis=1),
        params=p,
    )
    vb = body_vel(new)
    new.sensor_buf[:, 0, 0:2] = vb
    new.sensor_buf[:, 0, 2] = new.omega

    terms = compute_reward(new, new.prev_action, state.prev_action, state.prev_action2, cfg)
    speed = np.sqrt(np.sum(vel ** 2, axis=1))
    failed = bad | (speed > cfg.v_limit) | (np.abs(omega) > cfg.omega_limit)
    timeout = (new.step >= cfg.episode_steps) & ~failed
    return new, terms, failed, timeout


def apply_push(state: EnvState, rng: np.random.Generator, speed_range: float,
               mask: Array | None = None, delta: Array | None = None) -> EnvState:
    """Add a random world-frame velocity kick, per-axis uniform in +-speed_range.

    Only the velocity changes; sensors first see the kick in the next step's
    measurement.
    """
    if speed_range < 0.0:
        raise ValueError("apply_push: speed_range must be >= 0")
    n = state.vel.shape[0]
    if delta is None:
        delta = rng.uniform(-speed_range, speed_range, (n, 2))
    if mask is not None:
        delta = delta * mask[:, None]
    return replace(state, vel=state.vel + delta)


# ---------------------------------------------------------------------------
# vectorized training environment


@dataclass
class VecStepResult:
    next_obs: Array        # (n, OBS_DIM) post-step frame, before any auto-reset
    terms: RewardTerms
    fail: Array            # (n,) bool
    timeout: Array         # (n,) bool
    done: Array            # (n,) bool
    priv_next_flat: Array  # (n, (H+1)*PRIV_DIM) post-step privileged history, pre-reset
    completed_lin: list    # per finished episode: mean lin_tracking over the episode


class VecEnv:
    """N independent environment instances stepped in lockstep.

    Owns per-episode dynamics sampling, command resampling, training pushes,
    auto-resets, and the rolling observation histories used by the policy and
    the privileged critic.
    """

    def __init__(self, cfg: EnvConfig, rand: RandConfig, n: int, hist_len: int,
                 rng: np.random.Generator, fixed: bool, level: int = 0,
                 push_enabled: bool = True, k: float = 1.0):
        self.cfg = cfg
        self.rand = rand
        self.n = n
        self.hist_len = hist_len            # H; histories hold H+1 frames
        self.rng = rng
        self.fixed = fixed
        self.level = level
        self.k = k
        self.push_enabled = push_enabled and not fixed
        self.buf_len = (1 if fixed else rand.delay_max + 1)
        self.state: EnvState | None = None
        self.obs_hist = np.zeros((n, hist_len + 1, OBS_DIM))
        self.priv_hist = np.zeros((n, hist_len + 1, PRIV_DIM))
        self.push_phase = np.zeros(n, dtype=np.int64)
        self.ep_lin_sum = np.zeros(n)
        self.ep_len = np.zeros(n, dtype=np.int64)

    def set_level(self, level: int) -> None:
        self.level = min(max(level, 0), self.cfg.levels - 1)

    def reset_all(self) -> None:
        params = sample_dynamics(self.cfg, self.rand, self.rng, self.n, self.fixed)
        self.state, obs = reset(self.cfg, params, self.level, self.rng,
                                n=self.n, buf_len=self.buf_len)
        self.obs_hist[:] = obs[:, None, :]
        self.priv_hist[:] = privileged_observe(self.state, self.cfg)[:, None, :]
        self.push_phase = self.rng.integers(0, self.cfg.push_interval_steps, self.n)
        self.ep_lin_sum[:] = 0.0
        self.ep_len[:] = 0

    @property
    def hist_flat(self) -> Array:
        return self.obs_hist.reshape(self.n, -1)

    @property
    def priv_flat(self) -> Array:
        return self.priv_hist.reshape(self.n, -1)

    def _reset_envs(self, idx: Array) -> None:
        m = idx.shape[0]
        params = sample_dynamics(self.cfg, self.rand, self.rng, m, self.fixed)
        sub, obs = reset(self.cfg, params, self.level, self.rng,
                         n=m, buf_len=self.buf_len)
        st = self.state
        st.pos[idx] = sub.pos
        st.heading[idx] = sub.heading
        st.vel[idx] = sub.vel
        st.omega[idx] = sub.omega
        st.step[idx] = 0
        st.command[idx] = sub.command
        st.prev_action[idx] = 0.0
        st.prev_action2[idx] = 0.0
        st.sensor_buf[idx] = sub.sensor_buf
        for name in ("mass", "inertia", "lin_drag", "ang_drag", "gain", "payload",
                     "f_ext", "f_ext_onset", "v_bias", "delay", "noise_on"):
            getattr(st.params, name)[idx] = getattr(params, name)
        self.obs_hist[idx] = obs[:, None, :]
        self.priv_hist[idx] = privileged_observe(sub, self.cfg)[:, None, :]
        self.push_phase[idx] = self.rng.integers(0, self.cfg.push_interval_steps, m)
        self.ep_lin_sum[idx] = 0.0
        self.ep_len[idx] = 0

    def step(self, actions: Array) -> VecStepResult:
        assert self.state is not None, "call reset_all() first"
        st = self.state

        if self.push_enabled:
            mag = push_magnitude(self.level, self.cfg)
            due = ((st.step + self.push_phase) % self.cfg.push_interval_steps
                   == self.cfg.push_interval_steps - 1)
            if mag > 0.0 and due.any():
                st = apply_push(st, self.rng, mag, mask=due.astype(np.float64))

        new_state, terms, fail, timeout = step(st, actions, self.cfg, k=self.k)
        done = fail | timeout

        # resample commands at segment boundaries before observing, so the
        # post-step frame (policy input and model target) carries the new one
        resample = ~done & (new_state.step % self.cfg.command_resample_steps == 0) \
            & (new_state.step > 0)
        if resample.any():
            idx = np.flatnonzero(resample)
            new_state.command[idx] = sample_commands(self.rng, idx.shape[0],
                                                     self.level, self.cfg)

        next_obs = observe(new_state, self.cfg, self.rng)
        priv_next = privileged_observe(new_state, self.cfg)
        obs_hist_next = np.concatenate([next_obs[:, None, :], self.obs_hist[:, :-1]], axis=1)
        priv_hist_next = np.concatenate([priv_next[:, None, :], self.priv_hist[:, :-1]], axis=1)
        priv_next_flat = priv_hist_next.reshape(self.n, -1).copy()

        self.state = new_state
        self.obs_hist = obs_hist_next
        self.priv_hist = priv_hist_next

        self.ep_lin_sum += terms.lin_tracking
        self.ep_len += 1
        completed = []
        if done.any():
            idx = np.flatnonzero(done)
            completed = list(self.ep_lin_sum[idx] / np.maximum(self.ep_len[idx], 1))
            self._reset_envs(idx)

        return VecStepResult(next_obs=next_obs, terms=terms, fail=fail,
                             timeout=timeout, done=done,
                             priv_next_flat=priv_next_flat, completed_lin=completed)
