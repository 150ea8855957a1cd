"""Run configuration: dataclass schema, strict flat-text parser, fingerprinting.

Config files are flat ``key = value`` text with dotted key paths
(``ppo.n_envs = 128``).  Values are JSON fragments; bare words parse as
strings.  Unknown keys and inverted ranges fail fast, before any compute.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or inconsistent values."""


@dataclass
class EnvConfig:
    dt: float = 0.02                  # control step, 50 Hz
    episode_steps: int = 1000
    command_resample_steps: int = 25
    f_max: float = 10.0               # per-axis body force bound, N
    tau_max: float = 1.0              # yaw torque bound, N*m
    mass: float = 1.0                 # nominal body mass, kg
    inertia: float = 0.1              # nominal yaw inertia, kg*m^2
    lin_drag: float = 0.5             # nominal linear drag, 1/s
    ang_drag: float = 0.5             # nominal angular drag, 1/s
    v_limit: float = 5.0              # speed divergence bound, m/s
    omega_limit: float = 10.0         # yaw-rate divergence bound, rad/s
    levels: int = 9                   # curriculum levels 0..levels-1
    cmd_lin_lo: float = 0.5           # level-0 linear command range, +/- m/s
    cmd_lin_hi: float = 3.0           # top-level linear command range
    cmd_ang_lo: float = 0.5           # level-0 yaw command range, +/- rad/s
    cmd_ang_hi: float = 3.0
    push_max: float = 1.0             # top-level training push, m/s per axis
    push_interval_steps: int = 200
    reset_noise: float = 0.05         # initial velocity perturbation scale
    lin_noise_std: float = 0.02       # velocity sensor noise, m/s
    ang_noise_std: float = 0.02       # yaw-rate sensor noise, rad/s


@dataclass
class RandConfig:
    mass_scale_lo: float = 0.8
    mass_scale_hi: float = 1.2
    payload_lo: float = -0.2          # kg
    payload_hi: float = 0.5
    drag_scale_lo: float = 0.5
    drag_scale_hi: float = 1.5
    gain_lo: float = 0.9
    gain_hi: float = 1.1
    delay_max: int = 3                # observation delay, control steps
    f_ext_max: float = 2.5            # per-axis external force, N (sized to body weight)
    v_bias_max: float = 0.05          # velocity sensor bias, m/s per axis


@dataclass
class PpoConfig:
    n_envs: int = 128
    rollout_steps: int = 100
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    reward_scale: float = 0.02        # scales per-step reward; keeps values O(1)


@dataclass
class LitConfig:
    variant: str = "F"
    history_len: int = 5              # H; the policy sees H+1 frames
    action_scale: float = 1.0         # k in target = nominal + k*a
    stage1_iters: int = 1000
    stage2_iters: int = 2000
    stage2_n_envs: int = 0            # 0: reuse ppo.n_envs
    stage2_lr: float = 0.0            # 0: reuse ppo.lr
    stage2_start_level: int = 0       # initial and minimum level for robust training
    stage1_target_score: float = 0.9
    stage1_min_score: float = 0.6
    stage1_require_plateau: bool = True   # eval only once the curriculum stalls
    stage1_eval_episodes: int = 100
    eval_every: int = 25
    sigma_floor: float = 1e-4
    calib_rollouts: int = 5           # rollouts for sigma min/max calibration
    enc_hidden: list = field(default_factory=lambda: [64])
    latent_dim: int = 32
    actor_hidden: list = field(default_factory=lambda: [64, 64])
    critic_hidden: list = field(default_factory=lambda: [64, 64])
    dyn_hidden: list = field(default_factory=lambda: [64, 64])
    dyn_lr: float = 1e-3
    dyn_epochs: int = 2
    dyn_minibatches: int = 4
    init_log_std: float = -0.6931471805599453  # log(0.5)


@dataclass
class EvalConfig:
    episodes: int = 40                # tracking-suite episodes per seed
    episode_steps: int = 200
    command_hold_steps: int = 100     # eval commands held longer than training
    cmd_lin: float = 1.0              # eval command range, +/- m/s
    cmd_ang: float = 1.0
    payload_grid: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0])
    payload_trials: int = 100
    push_samples: int = 2000
    push_range: float = 3.0           # per-axis eval push, m/s
    push_step_lo: int = 100
    push_step_hi: int = 150
    push_f_ext_max: float = 6.0       # unseen external force range for push trials
    push_bins: list = field(default_factory=lambda: [0.0, 1.0, 2.0])  # bin lower edges, |push|
    probe_onset: int = 200
    probe_steps: int = 400
    probe_f_ext: float = 3.0          # disturbance magnitude for the sigma probe, N
    sigma_aggregate: str = "mean"     # how the probe pools per-dim sigma
    variants: list = field(default_factory=lambda: ["A", "B", "C", "D", "E", "F"])
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    rand: RandConfig = field(default_factory=RandConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    lit: LitConfig = field(default_factory=LitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"


_SECTIONS = ("env", "rand", "ppo", "lit", "eval")


def _coerce(key: str, value, want: type):
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if want is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {want}")


def set_key(cfg: RunConfig, key: str, value) -> None:
    """Assign one dotted key path, rejecting anything not in the schema."""
    parts = key.split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target, name = getattr(cfg, parts[0]), parts[1]
    else:
        raise ConfigError(f"unknown config key: {key}")
    fields = {f.name for f in dataclasses.fields(target)}
    if name not in fields or name in _SECTIONS:
        raise ConfigError(f"unknown config key: {key}")
    setattr(target, name, _coerce(key, value, _field_type(target, name)))


def _field_type(obj, name: str) -> type:
    for f in dataclasses.fields(obj):
        if f.name == name:
            return {"float": float, "int": int, "bool": bool, "str": str, "list": list}[f.type]
    raise ConfigError(f"no field {name}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        set_key(cfg, key.strip(), _parse_value(val))
    return cfg


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        set_key(cfg, key.strip(), _parse_value(val))
    env_out = os.environ.get("LITTRACK_OUT")
    if env_out:
        cfg.out_dir = env_out
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    pairs = [
        ("rand.mass_scale", cfg.rand.mass_scale_lo, cfg.rand.mass_scale_hi),
        ("rand.payload", cfg.rand.payload_lo, cfg.rand.payload_hi),
        ("rand.drag_scale", cfg.rand.drag_scale_lo, cfg.rand.drag_scale_hi),
        ("rand.gain", cfg.rand.gain_lo, cfg.rand.gain_hi),
        ("env.cmd_lin", cfg.env.cmd_lin_lo, cfg.env.cmd_lin_hi),
        ("env.cmd_ang", cfg.env.cmd_ang_lo, cfg.env.cmd_ang_hi),
        ("eval.push_step", float(cfg.eval.push_step_lo), float(cfg.eval.push_step_hi)),
    ]
    for name, lo, hi in pairs:
        if lo > hi:
            raise ConfigError(f"{name}: inverted range [{lo}, {hi}]")
    if cfg.rand.delay_max < 0:
        raise ConfigError("rand.delay_max must be >= 0")
    if not 0.0 <= cfg.ppo.gamma < 1.0:
        raise ConfigError("ppo.gamma must be in [0, 1)")
    if not 0.0 <= cfg.ppo.lam <= 1.0:
        raise ConfigError("ppo.lam must be in [0, 1]")
    if cfg.ppo.clip_eps <= 0.0:
        raise ConfigError("ppo.clip_eps must be > 0")
    if not 0.0 < cfg.lit.action_scale <= 1.0:
        raise ConfigError("lit.action_scale must be in (0, 1]")
    if cfg.lit.variant not in ("A", "B", "C", "D", "E", "F"):
        raise ConfigError(f"lit.variant must be one of A..F, got {cfg.lit.variant!r}")
    if cfg.lit.sigma_floor <= 0.0:
        raise ConfigError("lit.sigma_floor must be > 0")
    for v in cfg.eval.variants:
        if v not in ("A", "B", "C", "D", "E", "F"):
            raise ConfigError(f"eval.variants entry {v!r} not in A..F")
    for x in (cfg.env.dt, cfg.env.f_max, cfg.env.tau_max, cfg.env.mass, cfg.env.inertia):
        if not (isinstance(x, float) and math.isfinite(x) and x > 0):
            raise ConfigError("env dt/f_max/tau_max/mass/inertia must be positive finite")


def resolved_text(cfg: RunConfig) -> str:
    """Canonical flat rendering: one sorted 'key = json' line per leaf."""
    lines = []
    for sect in ("",) + _SECTIONS:
        obj = cfg if sect == "" else getattr(cfg, sect)
        for f in dataclasses.fields(obj):
            if f.name in _SECTIONS:
                continue
            key = f.name if sect == "" else f"{sect}.{f.name}"
            lines.append(f"{key} = {json.dumps(getattr(obj, f.name), sort_keys=True)}")
    return "\n".join(sorted(lines)) + "\n"


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode("utf-8")).hexdigest()[:16]


def make_rng(master_seed: int, *tags) -> np.random.Generator:
    """Deterministic named RNG stream.

    Streams are derived from the master seed plus string/int tags, so the same
    (seed, tags) always yields the same stream regardless of creation order.
    """
    entropy = [int(master_seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little"))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
