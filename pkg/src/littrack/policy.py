"""Actor-critic networks and action utilities.

The actor encodes the flattened observation history to a small latent, then a
trunk maps [latent, current frame, optional reference slots] to a tanh action
mean; a trainable state-independent log-std completes the diagonal Gaussian.
The critic is a plain MLP over the flattened privileged history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mathnn
from .env import ACT_DIM, OBS_DIM, PRIV_DIM
from .mathnn import MlpParams

Array = np.ndarray

REF_DIM = ACT_DIM + OBS_DIM   # reference action + reference next observation

# Static per-channel input scaling (stored in checkpoints alongside weights).
FRAME_SCALE = np.array([1 / 3, 1 / 3, 1 / 3,      # command
                        1 / 3, 1 / 3,             # measured v
                        1 / 4,                    # measured omega
                        1.0, 1.0, 1.0])           # previous action
PRIV_EXTRA_SCALE = np.array([1 / 3, 1 / 3,        # true v
                             1 / 4,               # true omega
                             1 / 3, 1 / 3,        # external force (body frame)
                             1 / 2, 1.0, 1.0, 1.0])  # mass, drags, gain
PRIV_SCALE = np.concatenate([FRAME_SCALE, PRIV_EXTRA_SCALE])
REF_SCALE = np.concatenate([np.ones(ACT_DIM), FRAME_SCALE])


@dataclass
class ObservationHistory:
    """H+1 observation frames, newest first."""

    frames: Array   # (H+1, OBS_DIM)

    @classmethod
    def initial(cls, frame: Array, hist_len: int) -> "ObservationHistory":
        return cls(np.tile(np.asarray(frame, dtype=np.float64), (hist_len + 1, 1)))

    def push(self, frame: Array) -> "ObservationHistory":
        return ObservationHistory(np.concatenate([np.asarray(frame)[None, :],
                                                  self.frames[:-1]], axis=0))

    def flat(self) -> Array:
        return self.frames.reshape(-1)

    @property
    def current(self) -> Array:
        return self.frames[0]


@dataclass
class PolicyParams:
    encoder: MlpParams          # flat history -> latent
    trunk: MlpParams            # [latent, frame, refs?] -> action mean (tanh)
    log_std: Array              # (ACT_DIM,)
    hist_len: int
    has_refs: bool

    @property
    def input_dim(self) -> int:
        base = (self.hist_len + 1) * OBS_DIM
        return base + (REF_DIM if self.has_refs else 0)

    def trainable(self) -> dict:
        return {"encoder": self.encoder, "trunk": self.trunk, "log_std": self.log_std}

    def with_trainable(self, tree: dict) -> "PolicyParams":
        return PolicyParams(encoder=tree["encoder"], trunk=tree["trunk"],
                            log_std=tree["log_std"], hist_len=self.hist_len,
                            has_refs=self.has_refs)


@dataclass
class CriticParams:
    net: MlpParams
    hist_len: int

    @property
    def input_dim(self) -> int:
        return (self.hist_len + 1) * PRIV_DIM


@dataclass
class PolicyOutput:
    mean: Array       # (n, ACT_DIM)
    log_std: Array    # (ACT_DIM,)
    action: Array     # (n, ACT_DIM)


def make_policy(rng: np.random.Generator, hist_len: int, has_refs: bool,
                enc_hidden: list, latent_dim: int, actor_hidden: list,
                init_log_std: float) -> PolicyParams:
    hist_dim = (hist_len + 1) * OBS_DIM
    encoder = mathnn.make_mlp(rng, [hist_dim, *enc_hidden, latent_dim],
                              ["elu"] * (len(enc_hidden) + 1))
    trunk_in = latent_dim + OBS_DIM + (REF_DIM if has_refs else 0)
    trunk = mathnn.make_mlp(rng, [trunk_in, *actor_hidden, ACT_DIM],
                            ["elu"] * len(actor_hidden) + ["tanh"],
                            out_gain=0.01)
    return PolicyParams(encoder=encoder, trunk=trunk,
                        log_std=np.full(ACT_DIM, float(init_log_std)),
                        hist_len=hist_len, has_refs=has_refs)


def make_critic(rng: np.random.Generator, hist_len: int, critic_hidden: list
                ) -> CriticParams:
    dim = (hist_len + 1) * PRIV_DIM
    net = mathnn.make_mlp(rng, [dim, *critic_hidden, 1],
                          ["elu"] * len(critic_hidden) + ["identity"])
    return CriticParams(net=net, hist_len=hist_len)


def build_actor_input(hist_flat: Array, a_ref: Array | None = None,
                      o_ref: Array | None = None, has_refs: bool = False) -> Array:
    """Concatenate history with reference slots (zero-filled when absent)."""
    hist_flat = np.atleast_2d(hist_flat)
    if not has_refs:
        return hist_flat
    n = hist_flat.shape[0]
    a_ref = np.zeros((n, ACT_DIM)) if a_ref is None else np.atleast_2d(a_ref)
    o_ref = np.zeros((n, OBS_DIM)) if o_ref is None else np.atleast_2d(o_ref)
    return np.concatenate([hist_flat, a_ref, o_ref], axis=1)


def _split_input(p: PolicyParams, x: Array) -> tuple[Array, Array, Array | None]:
    hist_dim = (p.hist_len + 1) * OBS_DIM
    if x.shape[1] != p.input_dim:
        raise ValueError(f"actor input width {x.shape[1]} != expected {p.input_dim}")
    hist = x[:, :hist_dim]
    refs = x[:, hist_dim:] if p.has_refs else None
    return hist, hist[:, :OBS_DIM], refs


def _forward_parts(p: PolicyParams, x: Array):
    hist, cur, refs = _split_input(p, x)
    n = x.shape[0]
    hist_scale = np.tile(FRAME_SCALE, p.hist_len + 1)
    enc_cache = mathnn.forward_cached(p.encoder, hist * hist_scale)
    parts = [enc_cache[-1], cur * FRAME_SCALE]
    if p.has_refs:
        parts.append(refs * REF_SCALE)
    trunk_in = np.concatenate(parts, axis=1)
    trunk_cache = mathnn.forward_cached(p.trunk, trunk_in)
    return enc_cache, trunk_cache, hist_scale


def policy_mean_cached(p: PolicyParams, x: Array) -> tuple[Array, tuple]:
    """(action mean, forward caches) so backward can skip the recompute."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    enc_cache, trunk_cache, _ = _forward_parts(p, x)
    return trunk_cache[-1], (enc_cache, trunk_cache)


def policy_mean(p: PolicyParams, x: Array) -> Array:
    """Deterministic action mean for a batch of actor inputs."""
    return policy_mean_cached(p, x)[0]


def policy_backward_cached(p: PolicyParams, caches: tuple, d_mean: Array) -> dict:
    """Gradients of sum(d_mean * mean) for the encoder and trunk weights."""
    enc_cache, trunk_cache = caches
    trunk_grads, d_trunk_in = mathnn.backward_from_cache(p.trunk, trunk_cache, d_mean)
    enc_grads, _ = mathnn.backward_from_cache(p.encoder, enc_cache,
                                              d_trunk_in[:, :p.encoder.out_dim])
    return {"encoder": enc_grads, "trunk": trunk_grads,
            "log_std": np.zeros_like(p.log_std)}


def policy_backward(p: PolicyParams, x: Array, d_mean: Array) -> dict:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return policy_backward_cached(p, _forward_parts(p, x)[:2], d_mean)


def act(p: PolicyParams, x: Array, deterministic: bool = False,
        rng: np.random.Generator | None = None) -> PolicyOutput:
    """Sample (or take the mean of) the diagonal-Gaussian policy."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean = policy_mean(p, x)
    if deterministic:
        action = mean.copy()
    else:
        if rng is None:
            raise ValueError("act: stochastic sampling needs an rng")
        action = mean + np.exp(p.log_std) * rng.standard_normal(mean.shape)
    return PolicyOutput(mean=mean, log_std=p.log_std.copy(), action=action)


def gaussian_log_prob(mean: Array, log_std: Array, action: Array) -> Array:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    z = (action - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) \
        - 0.5 * mean.shape[-1] * np.log(2.0 * np.pi)


def gaussian_entropy(log_std: Array) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.shape[0] * np.log(2.0 * np.pi * np.e))


def scale_action(a: Array, k: float, nominal: Array | float = 0.0,
                 lo: float = -1.0, hi: float = 1.0) -> Array:
    """Actuator target: nominal + k*a, clamped to the actuator bounds."""
    if not 0.0 < k <= 1.0:
        raise ValueError("scale_action: k must be in (0, 1]")
    return np.clip(nominal + k * np.asarray(a, dtype=np.float64), lo, hi)


def evaluate_critic_cached(c: CriticParams, priv_hist_flat: Array
                           ) -> tuple[Array, list]:
    x = np.atleast_2d(np.asarray(priv_hist_flat, dtype=np.float64))
    if x.shape[1] != c.input_dim:
        raise ValueError(f"critic input width {x.shape[1]} != expected {c.input_dim}")
    scale = np.tile(PRIV_SCALE, c.hist_len + 1)
    cache = mathnn.forward_cached(c.net, x * scale)
    return cache[-1][:, 0], cache


def evaluate_critic(c: CriticParams, priv_hist_flat: Array) -> Array:
    """State-value estimates for a batch of flattened privileged histories."""
    return evaluate_critic_cached(c, priv_hist_flat)[0]


def critic_backward_cached(c: CriticParams, cache: list, d_value: Array) -> MlpParams:
    grads, _ = mathnn.backward_from_cache(c.net, cache, d_value[:, None])
    return grads


def critic_backward(c: CriticParams, priv_hist_flat: Array, d_value: Array) -> MlpParams:
    _, cache = evaluate_critic_cached(c, priv_hist_flat)
    return critic_backward_cached(c, cache, d_value)
