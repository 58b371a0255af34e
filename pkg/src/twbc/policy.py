"""Tanh-squashed Gaussian policy and weighted behavior cloning.

The policy is a diagonal Gaussian over pre-squash actions u with a
state-dependent mean and a state-independent log-std vector; executed actions
are a = tanh(u). Densities transform accordingly:

    log pi(a|s) = log N(atanh(a); mean(s), exp(log_std)^2)
                  - sum_i log(1 - a_i^2)

Cloning minimizes -mean(W * log pi(a|s)) over dataset steps; plain cloning is
the same loop with every weight equal to one. The policy stores the
normalization statistics it was trained with so checkpoints act on raw states.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from twbc.data import Dataset, RunConfig, flatten_pairs
from twbc.nn import (
    Mlp,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    load_mlp,
    save_mlp,
)

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
# Actions are clipped this far inside (-1, 1) before atanh.
ACTION_EDGE = 1e-6

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class PolicyDivergedError(RuntimeError):
    """Raised when the cloning loss turns non-finite."""


@dataclass
class Policy:
    mean_net: Mlp
    log_std: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    def params(self) -> list[np.ndarray]:
        return self.mean_net.params() + [self.log_std]

    def param_names(self) -> list[str]:
        return self.mean_net.param_names() + ["log_std"]

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.norm_mean) / self.norm_std

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        """Squashed mean, the deterministic evaluation-time action."""
        mu, _ = forward(self.mean_net, np.atleast_2d(self.normalize(states)))
        return np.tanh(mu)

    def act(self, states: np.ndarray, rng: np.random.Generator | None = None
            ) -> np.ndarray:
        return self.mean_action(states)


def init_policy(
    state_dim: int,
    action_dim: int,
    config: RunConfig,
    rng: np.random.Generator,
    norm_mean: np.ndarray | None = None,
    norm_std: np.ndarray | None = None,
) -> Policy:
    sizes = [state_dim] + [config.hidden_size] * config.n_hidden + [action_dim]
    net = init_mlp(sizes, "relu", "gaussian_mean", rng)
    return Policy(
        mean_net=net,
        log_std=np.zeros(action_dim),
        norm_mean=np.zeros(state_dim) if norm_mean is None else np.asarray(norm_mean),
        norm_std=np.ones(state_dim) if norm_std is None else np.asarray(norm_std),
    )


def _squash_inputs(actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.clip(actions, -1.0 + ACTION_EDGE, 1.0 - ACTION_EDGE)
    return np.arctanh(a), a


def log_prob(policy: Policy, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-sample log density of executed actions, shape (B,)."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    mu, _ = forward(policy.mean_net, policy.normalize(states))
    u, a = _squash_inputs(actions)
    z = (u - mu) * np.exp(-policy.log_std)
    gauss = -_HALF_LOG_2PI - policy.log_std - 0.5 * z * z
    correction = np.log1p(-a * a)
    return np.sum(gauss - correction, axis=1)


def wbc_loss_and_grads(
    policy: Policy,
    states: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Weighted negative log-likelihood and grads in policy.params() order."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    w = np.asarray(weights, dtype=np.float64)
    b = states.shape[0]
    x = policy.normalize(states)
    mu, cache = forward(policy.mean_net, x)
    u, a = _squash_inputs(actions)
    inv_sigma = np.exp(-policy.log_std)
    z = (u - mu) * inv_sigma
    gauss = -_HALF_LOG_2PI - policy.log_std - 0.5 * z * z
    lp = np.sum(gauss - np.log1p(-a * a), axis=1)
    loss = float(-np.mean(w * lp))
    if np.all(w == 0.0):
        log.warning("all cloning weights are zero; batch contributes nothing")
    coef = (-w / b)[:, None]
    # d lp / d mu = z / sigma, d lp / d log_std = z^2 - 1.
    upstream_mu = coef * (z * inv_sigma)
    net_grads, _ = backward(policy.mean_net, cache, upstream_mu)
    grad_log_std = np.sum(coef * (z * z - 1.0), axis=0)
    return loss, net_grads + [grad_log_std]


def wbc_loss(policy, states, actions, weights) -> float:
    return wbc_loss_and_grads(policy, states, actions, weights)[0]


def train_policy(
    ta: Dataset,
    flat_weights: np.ndarray | None,
    config: RunConfig,
    rng: np.random.Generator,
    on_checkpoint=None,
    history: list | None = None,
) -> Policy:
    """Fit the policy on all task-agnostic steps by weighted cloning.

    ``flat_weights`` aligns with the dataset's flattened step order (see
    WeightTable.flat_weights); None trains plain behavior cloning, which is
    the identical loop with unit weights. ``on_checkpoint(step, policy)``
    fires every eval_interval steps and at the final step.
    """
    states, actions, _, _ = flatten_pairs(ta)
    if actions is None:
        raise ValueError("behavior cloning needs actions on every trajectory")
    n = states.shape[0]
    if flat_weights is None:
        w_all = np.ones(n)
    else:
        w_all = np.asarray(flat_weights, dtype=np.float64)
        if w_all.shape != (n,):
            raise ValueError(
                f"flat weights shape {w_all.shape} does not match {n} steps"
            )
    policy = init_policy(
        ta.state_dim, ta.action_dim, config, rng,
        norm_mean=ta.norm_stats.mean, norm_std=ta.norm_stats.std,
    )
    params = policy.params()
    names = policy.param_names()
    state = init_adam(params)
    for step in range(1, config.steps_bc + 1):
        idx = rng.integers(0, n, size=config.batch_bc)
        loss, grads = wbc_loss_and_grads(
            policy, states[idx], actions[idx], w_all[idx]
        )
        if not np.isfinite(loss):
            raise PolicyDivergedError(f"non-finite cloning loss at step {step}")
        adam_step(params, grads, state, lr=config.lr_policy,
                  weight_decay=config.weight_decay_policy, names=names)
        np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
        if history is not None:
            history.append((step, loss))
        if on_checkpoint is not None and (
            step % config.eval_interval == 0 or step == config.steps_bc
        ):
            on_checkpoint(step, policy)
    return policy


def save_policy(policy: Policy, path: str | Path) -> None:
    save_mlp(
        policy.mean_net,
        path,
        extra={
            "kind": "tanh_gaussian_policy",
            "log_std": policy.log_std.tolist(),
            "norm_mean": policy.norm_mean.tolist(),
            "norm_std": policy.norm_std.tolist(),
        },
    )


def load_policy(path: str | Path) -> Policy:
    net, extra = load_mlp(path)
    if extra.get("kind") != "tanh_gaussian_policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    return Policy(
        mean_net=net,
        log_std=np.asarray(extra["log_std"], dtype=np.float64),
        norm_mean=np.asarray(extra["norm_mean"], dtype=np.float64),
        norm_std=np.asarray(extra["norm_std"], dtype=np.float64),
    )
