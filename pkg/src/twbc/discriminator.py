"""Positive-unlabeled discriminator training and state scoring.

Task-specific states are the positives, task-agnostic states the unlabeled
pool. Training happens in two stages: a screening classifier fit with a
debiased positive-unlabeled loss ranks whole trajectories so the lowest-mean
fraction can serve as safe negatives, then a final classifier is fit against
those negatives with a convex mix of the debiased loss and plain
cross-entropy. Scores are read out as clamped logits log(c/(1-c)), which act
as per-state rewards downstream.

All classifier inputs are standardized with the task-agnostic dataset's
normalization statistics; logits are clamped to +-logit_clamp before the
sigmoid so the log terms stay bounded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twbc.data import Dataset, RunConfig, normalize_state
from twbc.nn import (
    Mlp,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    input_gradients,
    jvp_param_grads,
)

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("nnpu", "paper-literal", "unbiased")


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def debiased_loss_grads(
    p_probs: np.ndarray,
    u_probs: np.ndarray,
    eta_p: float,
    variant: str = "nnpu",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Debiased positive-unlabeled loss and its gradients w.r.t. the probs.

    The unlabeled pool is treated as an eta_p : (1 - eta_p) mix of positives
    and negatives, so the negative risk is estimated by subtracting the
    positive contribution. Variants differ in how the subtracted term is
    clamped when it overshoots:

    - "nnpu": clamp the corrected negative risk at zero from below,
      loss = eta_p*mean_P[-log c] + max(0, mean_U[-log(1-c)]
                                           - eta_p*mean_P[-log(1-c)])
    - "paper-literal": subtract a nonnegative correction instead,
      loss = eta_p*mean_P[-log c] - max(0, eta_p*mean_P[-log(1-c)]
                                           - mean_U[-log(1-c)])
    - "unbiased": no clamp at all (can go negative when positives leak
      into the unlabeled estimate).

    The two clamped variants agree whenever the correction is inactive but
    differ otherwise (at c = 0.5 everywhere they give ln 2 and eta_p * ln 2).
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    p = np.asarray(p_probs, dtype=np.float64)
    u = np.asarray(u_probs, dtype=np.float64)
    n_p = p.size
    n_u = u.size
    if n_p == 0 or n_u == 0:
        raise ValueError("both positive and unlabeled batches must be non-empty")
    term_p = eta_p * np.mean(-np.log(p))
    a = np.mean(-np.log1p(-u))
    b = eta_p * np.mean(-np.log1p(-p))
    d_term_p = -eta_p / (n_p * p)
    da_du = 1.0 / (n_u * (1.0 - u))
    db_dp = eta_p / (n_p * (1.0 - p))
    if variant == "nnpu":
        if a - b > 0.0:
            loss = term_p + (a - b)
            grad_p = d_term_p - db_dp
            grad_u = da_du
        else:
            loss = term_p
            grad_p = d_term_p
            grad_u = np.zeros_like(u)
    elif variant == "paper-literal":
        if b - a > 0.0:
            loss = term_p - (b - a)
            grad_p = d_term_p - db_dp
            grad_u = da_du
        else:
            loss = term_p
            grad_p = d_term_p
            grad_u = np.zeros_like(u)
    else:
        loss = term_p + (a - b)
        grad_p = d_term_p - db_dp
        grad_u = da_du
    return float(loss), grad_p, grad_u


def debiased_loss(p_probs, u_probs, eta_p: float, variant: str = "nnpu") -> float:
    return debiased_loss_grads(p_probs, u_probs, eta_p, variant)[0]


def cross_entropy_loss_grads(
    p_probs: np.ndarray,
    n_probs: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Binary cross-entropy as the sum of the two class means."""
    p = np.asarray(p_probs, dtype=np.float64)
    n = np.asarray(n_probs, dtype=np.float64)
    if p.size == 0 or n.size == 0:
        raise ValueError("both class batches must be non-empty")
    loss = float(np.mean(-np.log(p)) + np.mean(-np.log1p(-n)))
    grad_p = -1.0 / (p.size * p)
    grad_n = 1.0 / (n.size * (1.0 - n))
    return loss, grad_p, grad_n


def cross_entropy_loss(p_probs, n_probs) -> float:
    return cross_entropy_loss_grads(p_probs, n_probs)[0]


_NORM_GUARD = 1e-12


def gradient_penalty_at(
    net: Mlp,
    x_tilde: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Penalty mean((||grad_x logit|| - 1)^2) at given points, with param grads.

    The penalty acts on the raw pre-sigmoid logit. Parameter gradients need
    second derivatives of the network; they come from reversing a tangent
    pass (see nn.jvp_param_grads).
    """
    _, cache = forward(net, x_tilde)
    g = input_gradients(net, cache)
    norms = np.sqrt(np.sum(g * g, axis=1))
    value = float(np.mean((norms - 1.0) ** 2))
    b = x_tilde.shape[0]
    coef = 2.0 * (norms - 1.0) / np.maximum(norms, _NORM_GUARD) / b
    _, grads = jvp_param_grads(net, cache, coef[:, None] * g)
    return value, grads


def gradient_penalty(
    net: Mlp,
    p_states: np.ndarray,
    u_states: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Draw pairwise interpolates between the two batches and penalize there."""
    if p_states.shape != u_states.shape:
        raise ValueError(
            f"batch shapes differ: {p_states.shape} vs {u_states.shape}"
        )
    u = rng.uniform(0.0, 1.0, size=(p_states.shape[0], 1))
    x_tilde = u * p_states + (1.0 - u) * u_states
    return gradient_penalty_at(net, x_tilde)


@dataclass
class DiscTrainHistory:
    """Per-step loss stream of one discriminator training run."""

    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    main: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, main: float, penalty: float) -> None:
        self.steps.append(step)
        self.loss.append(loss)
        self.main.append(main)
        self.penalty.append(penalty)


def _clamped_probs(
    net: Mlp, x: np.ndarray, clamp: float
) -> tuple[np.ndarray, np.ndarray, object]:
    logits, cache = forward(net, x)
    clamped = np.clip(logits, -clamp, clamp)
    probs = _sigmoid(clamped)
    # Gradient mask: clipped coordinates are flat.
    active = (np.abs(logits) < clamp).astype(np.float64)
    dprob_dlogit = probs * (1.0 - probs) * active
    return probs[:, 0], dprob_dlogit, cache


def _train_discriminator(
    pos: np.ndarray,
    unl: np.ndarray,
    loss_fn,
    steps: int,
    config: RunConfig,
    rng: np.random.Generator,
    history: DiscTrainHistory | None = None,
    stage: str = "discriminator",
) -> Mlp:
    """Shared minibatch loop: PU/CE loss on clamped sigmoids plus penalty.

    Per step the draw order is fixed (positive indices, unlabeled indices,
    interpolation coefficients) so equal seeds give equal loss streams.
    """
    d = pos.shape[1]
    sizes = [d] + [config.hidden_size] * config.n_hidden + [1]
    net = init_mlp(sizes, "tanh", "scalar_logit", rng)
    state = init_adam(net.params())
    names = net.param_names()
    b = config.batch_disc
    for step in range(steps):
        idx_p = rng.integers(0, pos.shape[0], size=b)
        idx_u = rng.integers(0, unl.shape[0], size=b)
        xp = pos[idx_p]
        xu = unl[idx_u]
        stacked = np.concatenate([xp, xu], axis=0)
        probs, dprob, cache = _clamped_probs(net, stacked, config.logit_clamp)
        main, gp, gu = loss_fn(probs[:b], probs[b:])
        upstream = np.concatenate([gp, gu])[:, None] * dprob
        grads, _ = backward(net, cache, upstream)
        pen_value = 0.0
        if config.grad_penalty_coef > 0.0:
            pen_value, pen_grads = gradient_penalty(net, xp, xu, rng)
            for g, pg in zip(grads, pen_grads):
                g += config.grad_penalty_coef * pg
        total = main + config.grad_penalty_coef * pen_value
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"{stage}: non-finite loss at step {step}: "
                f"main={main!r} penalty={pen_value!r}"
            )
        if history is not None:
            history.append(step, total, main, pen_value)
        adam_step(net.params(), grads, state, lr=config.lr_disc, names=names)
    return net


def pretrain_discriminator(
    ts: Dataset,
    ta: Dataset,
    config: RunConfig,
    rng: np.random.Generator,
    history: DiscTrainHistory | None = None,
) -> Mlp:
    """Stage one: screening classifier, debiased loss on TS vs all of TA."""
    pos = normalize_state(_all_states(ts), ta.norm_stats)
    unl = normalize_state(_all_states(ta), ta.norm_stats)

    def loss_fn(p, u):
        return debiased_loss_grads(p, u, config.eta_p, config.loss_variant)

    return _train_discriminator(
        pos, unl, loss_fn, config.steps_pretrain, config, rng,
        history=history, stage="screening discriminator",
    )


def train_final_discriminator(
    ts: Dataset,
    ta: Dataset,
    safe_ids: list[int],
    config: RunConfig,
    rng: np.random.Generator,
    history: DiscTrainHistory | None = None,
) -> Mlp:
    """Stage two: fresh classifier against the safe-negative trajectories.

    The loss is beta2 * debiased(TS, safe) + (1 - beta2) * cross_entropy(TS,
    safe); with beta2 at either end the unused branch is skipped entirely, so
    the mixture degenerates to the pure loss with an identical stream.
    """
    safe_set = set(int(i) for i in safe_ids)
    if not safe_set:
        raise ValueError("safe negative set is empty")
    safe_states = [t.states for t in ta.trajectories if t.id in safe_set]
    if len(safe_states) != len(safe_set):
        missing = safe_set - {t.id for t in ta.trajectories}
        raise ValueError(f"safe ids not present in dataset: {sorted(missing)}")
    pos = normalize_state(_all_states(ts), ta.norm_stats)
    neg = normalize_state(np.concatenate(safe_states, axis=0), ta.norm_stats)
    beta2 = float(config.beta2)

    def loss_fn(p, u):
        if beta2 == 0.0:
            return cross_entropy_loss_grads(p, u)
        if beta2 == 1.0:
            return debiased_loss_grads(p, u, config.eta_p, config.loss_variant)
        l2, gp2, gu2 = debiased_loss_grads(p, u, config.eta_p, config.loss_variant)
        l3, gp3, gu3 = cross_entropy_loss_grads(p, u)
        return (
            beta2 * l2 + (1 - beta2) * l3,
            beta2 * gp2 + (1 - beta2) * gp3,
            beta2 * gu2 + (1 - beta2) * gu3,
        )

    return _train_discriminator(
        pos, neg, loss_fn, config.steps_formal, config, rng,
        history=history, stage="final discriminator",
    )


def train_one_step_discriminator(
    ts: Dataset,
    ta: Dataset,
    config: RunConfig,
    rng: np.random.Generator,
    history: DiscTrainHistory | None = None,
) -> Mlp:
    """Single-stage variant: unclamped (unbiased) PU loss on TS vs all of TA.

    Used by the ablation variants that skip safe-negative mining; runs for the
    combined step budget of the two stages.
    """
    pos = normalize_state(_all_states(ts), ta.norm_stats)
    unl = normalize_state(_all_states(ta), ta.norm_stats)

    def loss_fn(p, u):
        return debiased_loss_grads(p, u, config.eta_p, "unbiased")

    return _train_discriminator(
        pos, unl, loss_fn, config.steps_pretrain + config.steps_formal,
        config, rng, history=history, stage="one-step discriminator",
    )


def train_cross_entropy_discriminator(
    ts: Dataset,
    ta: Dataset,
    config: RunConfig,
    rng: np.random.Generator,
    history: DiscTrainHistory | None = None,
) -> Mlp:
    """Plain binary classifier (TS positive, TA negative) for the dual baseline."""
    pos = normalize_state(_all_states(ts), ta.norm_stats)
    neg = normalize_state(_all_states(ta), ta.norm_stats)

    def loss_fn(p, u):
        return cross_entropy_loss_grads(p, u)

    return _train_discriminator(
        pos, neg, loss_fn, config.steps_disc_ce, config, rng,
        history=history, stage="cross-entropy discriminator",
    )


def _all_states(dataset: Dataset) -> np.ndarray:
    if not dataset.trajectories:
        raise ValueError("dataset has no trajectories")
    return np.concatenate([t.states for t in dataset.trajectories], axis=0)


def trajectory_mean_scores(
    net: Mlp,
    ta: Dataset,
    logit_clamp: float,
) -> np.ndarray:
    """Mean clamped logit per trajectory, in trajectory id order."""
    scores = np.empty(len(ta.trajectories))
    for i, t in enumerate(ta.trajectories):
        logits, _ = forward(net, normalize_state(t.states, ta.norm_stats))
        clamped = np.clip(logits[:, 0], -logit_clamp, logit_clamp)
        scores[i] = clamped.mean()
    return scores


def select_safe_negatives(
    net: Mlp,
    ta: Dataset,
    beta1: float,
    logit_clamp: float,
) -> list[int]:
    """Ids of the floor(beta1 * m) trajectories with lowest mean score.

    Ties are broken by ascending trajectory id. The returned list is sorted
    by id (it is a set of ids; order carries no meaning).
    """
    m = len(ta.trajectories)
    k = int(np.floor(beta1 * m))
    if k < 1:
        raise ValueError(
            f"beta1={beta1} keeps floor({beta1}*{m}) = 0 trajectories"
        )
    means = trajectory_mean_scores(net, ta, logit_clamp)
    ids = np.array([t.id for t in ta.trajectories])
    order = np.lexsort((ids, means))
    return sorted(int(ids[i]) for i in order[:k])


@dataclass
class RewardField:
    """Per-(trajectory, step) scores R = clamped logit of the classifier."""

    rewards: dict[int, np.ndarray]
    clamp: float

    def for_trajectory(self, traj_id: int) -> np.ndarray:
        if traj_id not in self.rewards:
            raise KeyError(f"no rewards for trajectory {traj_id}")
        return self.rewards[traj_id]

    def lookup(self, traj_ids: np.ndarray, steps: np.ndarray) -> np.ndarray:
        out = np.empty(len(traj_ids))
        for i, (tid, s) in enumerate(zip(traj_ids, steps)):
            r = self.rewards.get(int(tid))
            if r is None or not (0 <= int(s) < len(r)):
                raise KeyError(f"no reward for trajectory {tid} step {s}")
            out[i] = r[int(s)]
        return out

    def to_csv(self, path: str | Path) -> None:
        lines = ["trajectory_id,step,R"]
        for tid in sorted(self.rewards):
            for step, r in enumerate(self.rewards[tid]):
                lines.append(f"{tid},{step},{format(r, '.17g')}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def reward_field(
    net: Mlp,
    ta: Dataset,
    logit_clamp: float,
) -> RewardField:
    """Score every task-agnostic state with the clamped logit log(c/(1-c))."""
    rewards: dict[int, np.ndarray] = {}
    for t in ta.trajectories:
        logits, _ = forward(net, normalize_state(t.states, ta.norm_stats))
        rewards[t.id] = np.clip(logits[:, 0], -logit_clamp, logit_clamp)
    return RewardField(rewards=rewards, clamp=logit_clamp)


def probs_from_rewards(field: RewardField) -> dict[int, np.ndarray]:
    """Recover classifier probabilities c(s) = sigmoid(R) per trajectory."""
    return {tid: _sigmoid(r) for tid, r in field.rewards.items()}
