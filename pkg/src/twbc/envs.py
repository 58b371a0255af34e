"""Synthetic control environments, scripted experts, and dataset surgery.

The pointmass environment is deliberately tiny: a frictionless point on a
plane, velocity-clipped dynamics, and a "reach the left region" task. Four
scripted direction experts generate a mixed-quality state-action corpus in
which exactly one direction solves the task, so expert identification is
non-trivial but verifiable by construction. The chain MDP is an even smaller
substrate used to demonstrate value-function divergence under missing
transitions.

Corruption operators (`corrupt_remove_every_x`, `truncate_head_tail`) are
pure dataset-to-dataset transforms; they never reorder surviving states.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from twbc.data import Dataset, Trajectory, new_dataset

log = logging.getLogger(__name__)

DIRECTION_TAG_PREFIX = "scripted-direction-"
DIRECTION_VECTORS = {
    "L": np.array([-1.0, 0.0]),
    "R": np.array([1.0, 0.0]),
    "U": np.array([0.0, 1.0]),
    "D": np.array([0.0, -1.0]),
}


@dataclass
class PointmazeEnv:
    """Pointmass with state (x, y, vx, vy) and acceleration actions.

    Dynamics: v' = clip(v + action_gain * a, -1, 1), p' = p + dt * v', with
    actions clipped into [-1, 1]^2. Episodes start at the origin with zero
    velocity and run for `horizon` steps. The task is solved when the x
    coordinate of any visited state drops to `success_x` or below.
    """

    horizon: int = 100
    action_gain: float = 0.1
    dt: float = 0.1
    success_x: float = -2.0

    state_dim = 4
    action_dim = 2

    def reset(self, n_episodes: int) -> np.ndarray:
        return np.zeros((n_episodes, self.state_dim))

    def step(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        v = np.clip(states[:, 2:] + self.action_gain * a, -1.0, 1.0)
        p = states[:, :2] + self.dt * v
        return np.concatenate([p, v], axis=1)


def gen_pointmaze(
    n_per_direction: int, noise_std: float, rng: np.random.Generator
) -> Dataset:
    """Scripted experts in four directions; `horizon` pairs per trajectory.

    Each expert applies its unit direction plus Gaussian action noise
    (clipped into the action box; the recorded action is the clipped one the
    dynamics actually saw). Trajectories are tagged
    ``scripted-direction-{L,R,U,D}``; the dataset holds 4 * n_per_direction
    of them in L, R, U, D block order. Generation is vectorized across the
    trajectories of a direction, so the draw order is fixed and the output
    is byte-stable for a given seed.
    """
    if n_per_direction < 1:
        raise ValueError("n_per_direction must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    env = PointmazeEnv()
    trajectories = []
    for name in "LRUD":
        unit = DIRECTION_VECTORS[name]
        n = n_per_direction
        states = env.reset(n)
        all_states = np.empty((env.horizon, n, env.state_dim))
        all_actions = np.empty((env.horizon, n, env.action_dim))
        for t in range(env.horizon):
            actions = np.tile(unit, (n, 1))
            if noise_std > 0:
                actions = actions + rng.normal(size=(n, 2)) * noise_std
            actions = np.clip(actions, -1.0, 1.0)
            all_states[t] = states
            all_actions[t] = actions
            states = env.step(states, actions)
        for i in range(n):
            trajectories.append(
                Trajectory(
                    id=0,
                    states=all_states[:, i].copy(),
                    actions=all_actions[:, i].copy(),
                    source_tag=DIRECTION_TAG_PREFIX + name,
                )
            )
    return new_dataset(
        "task_agnostic", trajectories,
        state_dim=env.state_dim, action_dim=env.action_dim,
    )


def make_task_specific_examples(
    dataset: Dataset, direction_tag: str, mode: str = "final_state"
) -> Dataset:
    """Carve a state-only task-specific dataset out of tagged trajectories.

    ``final_state`` keeps only each selected trajectory's last state (one
    1-state trajectory per source trajectory); ``full`` keeps whole
    trajectories with actions stripped. A bare direction letter is expanded
    to the scripted tag for convenience.
    """
    if mode not in ("final_state", "full"):
        raise ValueError(f"unknown mode {mode!r}")
    tag = direction_tag
    selected = [t for t in dataset.trajectories if t.source_tag == tag]
    if not selected and not tag.startswith(DIRECTION_TAG_PREFIX):
        tag = DIRECTION_TAG_PREFIX + direction_tag
        selected = [t for t in dataset.trajectories if t.source_tag == tag]
    if not selected:
        available = sorted({t.source_tag for t in dataset.trajectories})
        raise ValueError(
            f"no trajectories tagged {direction_tag!r}; available: {available}"
        )
    out = []
    for t in selected:
        states = t.states[-1:] if mode == "final_state" else t.states
        out.append(
            Trajectory(id=0, states=states.copy(), actions=None,
                       source_tag=t.source_tag)
        )
    return new_dataset(
        "task_specific", out,
        state_dim=dataset.state_dim, action_dim=dataset.action_dim,
    )


def corrupt_remove_every_x(dataset: Dataset, x: int) -> Dataset:
    """Delete the x-th pair of every consecutive block of x in each trajectory.

    Removal indices are x-1, 2x-1, ... (0-based) within each trajectory's own
    pair sequence; survivors keep their original order. Indexing restarts at
    every trajectory head so membership boundaries are preserved. A trajectory
    that would lose all its states is dropped with a logged count (cannot
    happen for x >= 2, but the guard stays).
    """
    if x < 2:
        raise ValueError("x must be >= 2")
    kept = []
    dropped = 0
    for t in dataset.trajectories:
        keep = np.ones(len(t), dtype=bool)
        keep[x - 1:: x] = False
        if not keep.any():
            dropped += 1
            continue
        kept.append(
            Trajectory(
                id=0,
                states=t.states[keep].copy(),
                actions=None if t.actions is None else t.actions[keep].copy(),
                source_tag=t.source_tag,
            )
        )
    if dropped:
        log.warning("remove-every-%d dropped %d emptied trajectories",
                    x, dropped)
    if not kept:
        raise ValueError("corruption removed every trajectory")
    return new_dataset(dataset.kind, kept, state_dim=dataset.state_dim,
                       action_dim=dataset.action_dim)


def truncate_head_tail(dataset: Dataset, head: int, tail: int) -> Dataset:
    """Keep each trajectory's first `head` and last `tail` states.

    When the kept ranges leave a gap, the two segments become separate
    trajectories (order: head piece, then tail piece); when head + tail
    covers the whole trajectory it is passed through intact. States are
    never reordered.
    """
    if head < 0 or tail < 0:
        raise ValueError("head and tail must be >= 0")
    if head + tail < 1:
        raise ValueError("head + tail must be >= 1")

    def piece(t: Trajectory, sl: slice) -> Trajectory:
        return Trajectory(
            id=0,
            states=t.states[sl].copy(),
            actions=None if t.actions is None else t.actions[sl].copy(),
            source_tag=t.source_tag,
        )

    out = []
    for t in dataset.trajectories:
        n = len(t)
        if head + tail >= n:
            out.append(piece(t, slice(None)))
            continue
        if head > 0:
            out.append(piece(t, slice(0, head)))
        if tail > 0:
            out.append(piece(t, slice(n - tail, n)))
    return new_dataset(dataset.kind, out, state_dim=dataset.state_dim,
                       action_dim=dataset.action_dim)


@dataclass
class RolloutResult:
    successes: np.ndarray  # (n_episodes,) bool
    returns: np.ndarray    # (n_episodes,) leftward progress, -min visited x

    @property
    def success_rate(self) -> float:
        return float(self.successes.mean())


def rollout(
    actor, env: PointmazeEnv, n_episodes: int, rng: np.random.Generator
) -> RolloutResult:
    """Evaluate an actor for `env.horizon` steps, vectorized across episodes.

    The actor is queried as ``actor.act(states, rng)``; deterministic actors
    (a trained policy acts through its squashed mean) simply ignore the rng,
    which makes the whole evaluation a pure function of the seed. An episode
    whose state turns non-finite is frozen where it died and counted as a
    failure regardless of earlier progress.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    states = env.reset(n_episodes)
    success = np.zeros(n_episodes, dtype=bool)
    alive = np.ones(n_episodes, dtype=bool)
    min_x = states[:, 0].copy()
    for _ in range(env.horizon):
        actions = np.asarray(actor.act(states, rng), dtype=np.float64)
        if actions.shape != (n_episodes, env.action_dim):
            raise ValueError(
                f"actor returned shape {actions.shape}, expected "
                f"{(n_episodes, env.action_dim)}"
            )
        nxt = env.step(states, actions)
        finite = np.isfinite(nxt).all(axis=1)
        died = alive & ~finite
        if died.any():
            nxt[died] = states[died]  # freeze at last finite state
            alive &= finite
        min_x[alive] = np.minimum(min_x[alive], nxt[alive, 0])
        success[alive] |= nxt[alive, 0] <= env.success_x
        states = nxt
    success &= alive
    return RolloutResult(successes=success, returns=-min_x)


@dataclass
class RandomActor:
    """Uniform actions over the box; the rollout noise floor."""

    action_dim: int = 2

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(states.shape[0], self.action_dim))


@dataclass
class ScriptedDirectionActor:
    """Constant unit-direction actor, optionally noised; clips into the box."""

    direction: str = "L"
    noise_std: float = 0.0

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a = np.tile(DIRECTION_VECTORS[self.direction], (states.shape[0], 1))
        if self.noise_std > 0:
            a = a + rng.normal(size=a.shape) * self.noise_std
        return np.clip(a, -1.0, 1.0)


def gen_chain(
    N: int, n_trajectories: int, rng: np.random.Generator | None = None
) -> Dataset:
    """Deterministic right-walk chain: states 0, 1/(N-1), ..., 1.

    Every trajectory is the same full sweep with a constant unit action, so
    transition coverage is complete until someone deletes transitions. The
    rng parameter exists for interface symmetry with the other generators;
    the walk itself draws nothing.
    """
    if N < 3:
        raise ValueError("N must be >= 3")
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    base = (np.arange(N, dtype=np.float64) / (N - 1))[:, None]
    trajectories = [
        Trajectory(id=0, states=base.copy(), actions=np.ones((N, 1)),
                   source_tag="chain-walk")
        for _ in range(n_trajectories)
    ]
    return new_dataset("task_agnostic", trajectories, state_dim=1,
                       action_dim=1)
