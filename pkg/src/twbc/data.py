"""Dataset containers, JSON-Lines persistence, and batch sampling.

Two dataset kinds flow through the pipeline. ``task_agnostic`` data carries a
(state, action) pair for every step of every trajectory. ``task_specific``
data holds success examples and is state-only: actions are stripped when the
examples are extracted. States live in float64 matrices of shape (n, d); a
single state is one row.

Every consumer standardizes inputs with the task-agnostic dataset's
normalization statistics so that discriminators, value nets, and the policy
all see the same input scale.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

DATASET_KINDS = ("task_agnostic", "task_specific")


class DatasetFormatError(ValueError):
    """Raised when a dataset file or in-memory dataset violates the format."""


@dataclass(slots=True)
class Trajectory:
    """One recorded trajectory: states (n, d), optional actions (n, k)."""

    id: int
    states: np.ndarray
    actions: np.ndarray | None = None
    source_tag: str = ""

    def __len__(self) -> int:
        return int(self.states.shape[0])


@dataclass(slots=True)
class NormStats:
    """Per-dimension standardization statistics (population std)."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(slots=True)
class Dataset:
    kind: str
    trajectories: list[Trajectory]
    state_dim: int
    action_dim: int
    norm_stats: NormStats

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_states(self) -> int:
        return sum(len(t) for t in self.trajectories)


# Zero-variance dimensions get std 1 so normalization never divides by zero.
_STD_FLOOR = 1e-12


def compute_norm_stats(trajectories: list[Trajectory], state_dim: int) -> NormStats:
    if not trajectories:
        return NormStats(mean=np.zeros(state_dim), std=np.ones(state_dim))
    stacked = np.concatenate([t.states for t in trajectories], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return NormStats(mean=mean, std=std)


def new_dataset(
    kind: str,
    trajectories: list[Trajectory],
    state_dim: int | None = None,
    action_dim: int | None = None,
) -> Dataset:
    """Validate trajectories, assign sequential ids, compute norm stats.

    Trajectory ids are positional (0..n-1 in storage order) everywhere in this
    package; whatever ids the caller put on the inputs are overwritten.
    """
    if kind not in DATASET_KINDS:
        raise DatasetFormatError(f"unknown dataset kind {kind!r}")
    if state_dim is None:
        if not trajectories:
            raise DatasetFormatError("state_dim required for an empty dataset")
        state_dim = int(trajectories[0].states.shape[1])
    if action_dim is None:
        action_dim = 0
        for t in trajectories:
            if t.actions is not None:
                action_dim = int(t.actions.shape[1])
                break
    out: list[Trajectory] = []
    for i, t in enumerate(trajectories):
        states = np.asarray(t.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != state_dim:
            raise DatasetFormatError(
                f"trajectory {i}: states have shape {states.shape}, "
                f"expected (n, {state_dim})"
            )
        if states.shape[0] < 1:
            raise DatasetFormatError(f"trajectory {i}: empty state sequence")
        if not np.all(np.isfinite(states)):
            raise DatasetFormatError(f"trajectory {i}: non-finite state entries")
        actions = None
        if t.actions is not None:
            actions = np.asarray(t.actions, dtype=np.float64)
            if actions.shape != (states.shape[0], action_dim):
                raise DatasetFormatError(
                    f"trajectory {i}: actions have shape {actions.shape}, "
                    f"expected ({states.shape[0]}, {action_dim})"
                )
            if not np.all(np.isfinite(actions)):
                raise DatasetFormatError(f"trajectory {i}: non-finite action entries")
            if np.any(np.abs(actions) > 1.0):
                raise DatasetFormatError(
                    f"trajectory {i}: actions outside [-1, 1]"
                )
        elif kind == "task_agnostic":
            raise DatasetFormatError(
                f"trajectory {i}: task_agnostic trajectories must carry actions"
            )
        out.append(Trajectory(id=i, states=states, actions=actions,
                              source_tag=t.source_tag))
    return Dataset(
        kind=kind,
        trajectories=out,
        state_dim=state_dim,
        action_dim=action_dim,
        norm_stats=compute_norm_stats(out, state_dim),
    )


def _fmt_real(x: float) -> str:
    # 17 significant digits round-trips any float64 exactly.
    return format(float(x), ".17g")


def _fmt_matrix(m: np.ndarray) -> str:
    rows = ("[" + ",".join(_fmt_real(v) for v in row) + "]" for row in m)
    return "[" + ",".join(rows) + "]"


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as JSON Lines with deterministic bytes."""
    path = Path(path)
    lines = [
        json.dumps(
            {
                "kind": dataset.kind,
                "state_dim": dataset.state_dim,
                "action_dim": dataset.action_dim,
                "count": len(dataset.trajectories),
            },
            separators=(",", ":"),
        )
    ]
    for t in dataset.trajectories:
        parts = [
            f'"id":{t.id}',
            f'"source_tag":{json.dumps(t.source_tag)}',
            f'"states":{_fmt_matrix(t.states)}',
        ]
        if t.actions is not None:
            parts.append(f'"actions":{_fmt_matrix(t.actions)}')
        lines.append("{" + ",".join(parts) + "}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_dataset(path: str | Path, expected_kind: str | None = None) -> Dataset:
    """Load a JSON-Lines dataset file; norm stats are recomputed on load."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        raw_lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not raw_lines:
        raise DatasetFormatError(f"{path}: empty file, header line required")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header: {exc}") from exc
    for key in ("kind", "state_dim", "action_dim", "count"):
        if key not in header:
            raise DatasetFormatError(f"{path}: line 1: header missing {key!r}")
    kind = header["kind"]
    if kind not in DATASET_KINDS:
        raise DatasetFormatError(f"{path}: line 1: unknown dataset kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise DatasetFormatError(
            f"{path}: dataset kind is {kind!r}, expected {expected_kind!r}"
        )
    state_dim = int(header["state_dim"])
    action_dim = int(header["action_dim"])
    count = int(header["count"])
    if count != len(raw_lines) - 1:
        raise DatasetFormatError(
            f"{path}: header count {count} != {len(raw_lines) - 1} trajectory lines"
        )
    trajectories: list[Trajectory] = []
    for lineno, raw in enumerate(raw_lines[1:], start=2):
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"{path}: line {lineno}: malformed trajectory record: {exc}"
            ) from exc
        if "states" not in obj:
            raise DatasetFormatError(f"{path}: line {lineno}: missing 'states'")
        states = np.asarray(obj["states"], dtype=np.float64)
        actions = None
        if "actions" in obj and obj["actions"] is not None:
            actions = np.asarray(obj["actions"], dtype=np.float64)
        trajectories.append(
            Trajectory(
                id=len(trajectories),
                states=states,
                actions=actions,
                source_tag=str(obj.get("source_tag", "")),
            )
        )
    try:
        return new_dataset(kind, trajectories, state_dim, action_dim)
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def normalize_state(s: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize a state row or a batch of state rows."""
    return (np.asarray(s, dtype=np.float64) - stats.mean) / stats.std


def flatten_pairs(
    dataset: Dataset,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, np.ndarray]:
    """Concatenate all steps: states, actions (or None), traj ids, step indices."""
    if not dataset.trajectories:
        raise DatasetFormatError("cannot flatten an empty dataset")
    states = np.concatenate([t.states for t in dataset.trajectories], axis=0)
    actions = None
    if all(t.actions is not None for t in dataset.trajectories):
        actions = np.concatenate([t.actions for t in dataset.trajectories], axis=0)
    traj_ids = np.concatenate(
        [np.full(len(t), t.id, dtype=np.int64) for t in dataset.trajectories]
    )
    steps = np.concatenate(
        [np.arange(len(t), dtype=np.int64) for t in dataset.trajectories]
    )
    return states, actions, traj_ids, steps


def minibatch_iter(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Endless uniform sampling with replacement over all flattened steps."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    states, actions, _, _ = flatten_pairs(dataset)
    n = states.shape[0]
    while True:
        idx = rng.integers(0, n, size=batch_size)
        yield states[idx], (None if actions is None else actions[idx])


@dataclass
class RunConfig:
    """Hyperparameters for one experiment run.

    Defaults are the desk-scale settings used by the synthetic suite; the
    full-scale values (units of 256, tens of thousands of discriminator steps,
    1M cloning steps, batch 8192) stay reachable through a config file.
    """

    # Weighting and discriminator mixing.
    alpha: float = 1.25              # reward temperature in exp(alpha * R)
    beta1: float = 0.8               # fraction of trajectories kept as safe negatives
    beta2: float = 0.0               # 1.0 only when expert embodiment mismatches
    eta_p: float = 0.2               # assumed positive-class prior in unlabeled data
    gamma: float = 0.998             # weight propagation discount; 0.98 short-horizon
    loss_variant: str = "nnpu"       # "nnpu" or "paper-literal" clamp orientation
    normalize_weights: bool = True

    # Discriminator training.
    lr_disc: float = 3e-4
    steps_pretrain: int = 2000
    steps_formal: int = 5000
    batch_disc: int = 512
    grad_penalty_coef: float = 10.0
    logit_clamp: float = 10.0

    # Weighted behavior cloning.
    lr_policy: float = 1e-4
    weight_decay_policy: float = 1e-5
    steps_bc: int = 20000
    batch_bc: int = 1024

    # Network shape shared by discriminators, value net, and policy trunk.
    hidden_size: int = 64
    n_hidden: int = 2

    # Occupancy-matching value baseline.
    gamma_v: float = 0.99
    lr_value: float = 3e-4
    weight_decay_value: float = 1e-4
    steps_value: int = 8000
    batch_value: int = 512
    steps_disc_ce: int = 1000        # cross-entropy discriminator for the baseline

    # Evaluation cadence.
    eval_interval: int = 1000
    eval_episodes: int = 100

    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.beta1 < 1.0):
            raise ValueError(f"beta1 must be in (0, 1), got {self.beta1}")
        if self.beta2 not in (0.0, 1.0):
            raise ValueError(f"beta2 must be 0 or 1, got {self.beta2}")
        if not (0.0 <= self.eta_p <= 1.0):
            raise ValueError(f"eta_p must be in [0, 1], got {self.eta_p}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not (0.0 <= self.gamma_v < 1.0):
            raise ValueError(f"gamma_v must be in [0, 1), got {self.gamma_v}")
        if self.loss_variant not in ("nnpu", "paper-literal"):
            raise ValueError(f"unknown loss_variant {self.loss_variant!r}")
        for name in ("alpha", "lr_disc", "lr_policy", "lr_value", "logit_clamp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "batch_disc", "batch_bc", "batch_value", "hidden_size", "n_hidden",
            "eval_interval", "eval_episodes",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in (
            "steps_pretrain", "steps_formal", "steps_bc", "steps_value",
            "steps_disc_ce", "weight_decay_policy", "weight_decay_value",
            "grad_penalty_coef",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def replace(self, **kwargs) -> "RunConfig":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**mapping)
        cfg.validate()
        return cfg
