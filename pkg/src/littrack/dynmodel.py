"""Probabilistic one-step dynamics model with uncertainty-gated output.

A shared trunk maps (observation, action) to two heads: the predicted mean of
the next observation and a per-dimension standard deviation (softplus plus a
small floor).  Training minimizes Gaussian negative log-likelihood.  Running
per-dimension min/max statistics of sigma, frozen after the reference stage,
normalize sigma so the mean prediction can be scaled down toward zero exactly
when the model reports out-of-distribution uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mathnn
from .env import ACT_DIM, OBS_DIM
from .mathnn import AdamState, MlpParams
from .policy import FRAME_SCALE

Array = np.ndarray

IN_SCALE = np.concatenate([FRAME_SCALE, np.ones(ACT_DIM)])

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DynModelParams:
    trunk: MlpParams        # scaled (obs, action) -> features
    mu_head: MlpParams      # features -> predicted next observation
    sigma_head: MlpParams   # features -> softplus sigma (floor added on top)
    sigma_floor: float = 1e-4

    def trainable(self) -> dict:
        return {"trunk": self.trunk, "mu": self.mu_head, "sigma": self.sigma_head}

    def with_trainable(self, tree: dict) -> "DynModelParams":
        return DynModelParams(trunk=tree["trunk"], mu_head=tree["mu"],
                              sigma_head=tree["sigma"], sigma_floor=self.sigma_floor)


@dataclass
class SigmaStats:
    """Per-dimension running min/max of predicted sigma."""

    sigma_min: Array
    sigma_max: Array
    count: int = 0

    @classmethod
    def empty(cls, dim: int = OBS_DIM) -> "SigmaStats":
        return cls(sigma_min=np.full(dim, np.inf), sigma_max=np.full(dim, -np.inf),
                   count=0)


def make_dynmodel(rng: np.random.Generator, hidden: list, sigma_floor: float
                  ) -> DynModelParams:
    trunk = mathnn.make_mlp(rng, [OBS_DIM + ACT_DIM, *hidden], ["elu"] * len(hidden))
    feat = hidden[-1]
    mu_head = mathnn.make_mlp(rng, [feat, OBS_DIM], ["identity"])
    sigma_head = mathnn.make_mlp(rng, [feat, OBS_DIM], ["softplus"])
    # start sigma around softplus(-1) ~ 0.31 so early NLL is well-conditioned
    sigma_head.layers[0].b[:] = -1.0
    return DynModelParams(trunk=trunk, mu_head=mu_head, sigma_head=sigma_head,
                          sigma_floor=sigma_floor)


def _model_input(obs: Array, action: Array) -> Array:
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    action = np.atleast_2d(np.asarray(action, dtype=np.float64))
    if obs.shape[1] != OBS_DIM or action.shape[1] != ACT_DIM:
        raise ValueError(f"predict: expected widths ({OBS_DIM}, {ACT_DIM}), "
                         f"got ({obs.shape[1]}, {action.shape[1]})")
    return np.concatenate([obs, action], axis=1) * IN_SCALE


def predict(model: DynModelParams, obs: Array, action: Array
            ) -> tuple[Array, Array]:
    """Mean and strictly-positive std of the next-observation distribution."""
    squeeze = np.asarray(obs).ndim == 1
    x = _model_input(obs, action)
    feat = mathnn.mlp_forward(model.trunk, x)
    mu = mathnn.mlp_forward(model.mu_head, feat)
    sigma = mathnn.mlp_forward(model.sigma_head, feat) + model.sigma_floor
    if squeeze:
        return mu[0], sigma[0]
    return mu, sigma


def nll_loss(mu: Array, sigma: Array, target: Array) -> float:
    """Gaussian negative log-likelihood, summed over dimensions.

    For batched inputs the mean over the batch is returned.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if np.any(sigma <= 0.0):
        raise ValueError("nll_loss: sigma must be strictly positive")
    z = (target - mu) / sigma
    per_sample = np.sum(0.5 * z * z + np.log(sigma) + 0.5 * LOG_2PI, axis=1)
    return float(per_sample.mean())


def nll_grads(mu: Array, sigma: Array, target: Array) -> tuple[Array, Array]:
    """d(mean NLL)/d(mu), d(mean NLL)/d(sigma) for a batch."""
    n = mu.shape[0]
    inv_s = 1.0 / sigma
    d_mu = (mu - target) * inv_s * inv_s / n
    d_sigma = (inv_s - (target - mu) ** 2 * inv_s ** 3) / n
    return d_mu, d_sigma


def dyn_loss_and_grads(model: DynModelParams, obs: Array, action: Array,
                       target: Array) -> tuple[float, dict]:
    """Mean NLL over a batch plus gradients for every trainable block."""
    x = _model_input(obs, action)
    trunk_cache = mathnn.forward_cached(model.trunk, x)
    feat = trunk_cache[-1]
    mu_cache = mathnn.forward_cached(model.mu_head, feat)
    sg_cache = mathnn.forward_cached(model.sigma_head, feat)
    mu = mu_cache[-1]
    sigma = sg_cache[-1] + model.sigma_floor
    loss = float(np.mean(np.sum(0.5 * ((target - mu) / sigma) ** 2
                                + np.log(sigma) + 0.5 * LOG_2PI, axis=1)))
    d_mu, d_sigma = nll_grads(mu, sigma, target)
    mu_grads, d_feat_mu = mathnn.backward_from_cache(model.mu_head, mu_cache, d_mu)
    sg_grads, d_feat_sg = mathnn.backward_from_cache(model.sigma_head, sg_cache, d_sigma)
    trunk_grads, _ = mathnn.backward_from_cache(model.trunk, trunk_cache,
                                                d_feat_mu + d_feat_sg)
    return loss, {"trunk": trunk_grads, "mu": mu_grads, "sigma": sg_grads}


def train_batch(model: DynModelParams, state: AdamState, obs: Array, action: Array,
                target: Array) -> tuple[DynModelParams, AdamState, float]:
    loss, grads = dyn_loss_and_grads(model, obs, action, target)
    if not np.isfinite(loss):
        raise ValueError("dynamics model: non-finite training loss")
    tree, state = mathnn.adam_step(model.trainable(), grads, state)
    return model.with_trainable(tree), state, loss


def update_sigma_stats(stats: SigmaStats, sigma_batch: Array) -> SigmaStats:
    """Fold a batch of sigma rows into the running per-dimension min/max."""
    sigma_batch = np.atleast_2d(np.asarray(sigma_batch, dtype=np.float64))
    if np.any(sigma_batch <= 0.0):
        raise ValueError("update_sigma_stats: sigma entries must be positive")
    return SigmaStats(
        sigma_min=np.minimum(stats.sigma_min, sigma_batch.min(axis=0)),
        sigma_max=np.maximum(stats.sigma_max, sigma_batch.max(axis=0)),
        count=stats.count + 1,
    )


def adjust(mu: Array, sigma: Array, stats: SigmaStats) -> Array:
    """Scale the mean prediction by (1 - norm(sigma)), elementwise.

    norm(sigma) is min-max normalization against the frozen stats, clamped to
    [0, 1]; dimensions whose stats collapsed (max == min) pass the mean
    through unchanged.  At the in-distribution noise floor the output equals
    mu; at or beyond the recorded maximum it is exactly zero.
    """
    if stats.count <= 0:
        raise ValueError("adjust: sigma statistics are unpopulated; "
                         "train the reference stage first")
    span = stats.sigma_max - stats.sigma_min
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(span > 0.0,
                        np.clip((sigma - stats.sigma_min) / np.where(span > 0.0, span, 1.0),
                                0.0, 1.0),
                        0.0)
    return (1.0 - norm) * mu


def sigma_error_probe(model: DynModelParams, obs_seq: Array, act_seq: Array,
                      onset: int, aggregate: str = "mean"
                      ) -> tuple[Array, Array]:
    """Paired per-step (pooled sigma, prediction error) series for a rollout.

    ``obs_seq`` holds T+1 observations and ``act_seq`` the T executed actions;
    the trajectory must extend past the disturbance onset.  The error at step
    t is the L2 norm of (o_{t+1} - mu_t).
    """
    obs_seq = np.asarray(obs_seq, dtype=np.float64)
    act_seq = np.asarray(act_seq, dtype=np.float64)
    steps = act_seq.shape[0]
    if obs_seq.shape[0] != steps + 1:
        raise ValueError("sigma_error_probe: need T+1 observations for T actions")
    if steps <= onset:
        raise ValueError(f"sigma_error_probe: trajectory ({steps}) does not reach "
                         f"the disturbance onset ({onset})")
    mu, sigma = predict(model, obs_seq[:-1], act_seq)
    err = np.sqrt(np.sum((obs_seq[1:] - mu) ** 2, axis=1))
    if aggregate == "mean":
        pooled = sigma.mean(axis=1)
    elif aggregate == "max":
        pooled = sigma.max(axis=1)
    else:
        raise ValueError(f"sigma_error_probe: unknown aggregate {aggregate!r}")
    return pooled, err
