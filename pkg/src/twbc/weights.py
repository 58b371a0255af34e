"""Discounted trajectory weights from per-state scores.

Each step's weight aggregates the exponentiated scores of its own state and
every later state in the trajectory, discounted by gamma per step, with the
final state's term repeated forever past the end (last-state padding):

    W_i = sum_{j>=0} gamma^j * e_{min(i+j, n-1)},   e_i = exp(alpha * R_i)

computed in closed form by a reverse scan: the padded tail telescopes into
e_{n-1} / (1 - gamma) and every earlier step is e_i + gamma * W_{i+1}. A
truncated direct summation is kept alongside as the reference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from twbc.data import Dataset, RunConfig
from twbc.discriminator import RewardField

WEIGHT_TERMS = ("exp_alpha_r", "scaled_prob")


def _check_gamma(gamma: float) -> None:
    if not (0.0 <= gamma < 1.0):
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")


def compute_weights_from_terms(terms: np.ndarray, gamma: float) -> np.ndarray:
    """Reverse-scan closed form over arbitrary positive per-step terms."""
    _check_gamma(gamma)
    e = np.asarray(terms, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("terms must be a non-empty vector")
    n = e.size
    w = np.empty(n)
    w[n - 1] = e[n - 1] / (1.0 - gamma)
    for i in range(n - 2, -1, -1):
        w[i] = e[i] + gamma * w[i + 1]
    return w


def compute_weights(rewards: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """W_i for one trajectory from its per-state scores."""
    r = np.asarray(rewards, dtype=np.float64)
    return compute_weights_from_terms(np.exp(alpha * r), gamma)


def brute_force_weights(
    rewards: np.ndarray,
    alpha: float,
    gamma: float,
    horizon: int,
) -> np.ndarray:
    """Direct truncated summation W_i = sum_{j=0}^{horizon} gamma^j e_{min(i+j, n-1)}.

    The oracle for compute_weights; pick horizon so gamma^horizon times the
    largest term is below the comparison tolerance.
    """
    _check_gamma(gamma)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a non-empty vector")
    e = np.exp(alpha * r)
    n = e.size
    ext = np.concatenate([e, np.full(horizon, e[-1])])
    powers = gamma ** np.arange(horizon + 1, dtype=np.float64)
    # Sliding dot products: out[i] = sum_j ext[i + j] * powers[j].
    return np.correlate(ext, powers, mode="valid")


def horizon_for(gamma: float, max_term: float, tol: float = 1e-12) -> int:
    """Smallest horizon whose truncated tail is below tol for the oracle."""
    _check_gamma(gamma)
    if gamma == 0.0:
        return 1
    h = int(np.ceil(np.log(tol / max(max_term, tol)) / np.log(gamma)))
    return max(h, 1)


@dataclass
class WeightTable:
    """Per-(trajectory, step) cloning weights, optionally mean-normalized."""

    raw: dict[int, np.ndarray]
    z: float                   # mean raw weight over every step in the table
    normalized: bool

    def weights_for(self, traj_id: int) -> np.ndarray:
        if traj_id not in self.raw:
            raise KeyError(f"no weights for trajectory {traj_id}")
        w = self.raw[traj_id]
        return w / self.z if self.normalized else w

    def flat_weights(self, dataset: Dataset) -> np.ndarray:
        """Weights aligned with the dataset's flattened step order."""
        parts = []
        for t in dataset.trajectories:
            w = self.weights_for(t.id)
            if len(w) != len(t):
                raise ValueError(
                    f"trajectory {t.id}: {len(w)} weights for {len(t)} steps"
                )
            parts.append(w)
        return np.concatenate(parts)

    def to_csv(self, path: str | Path) -> None:
        lines = ["trajectory_id,step,raw_W,normalized_W"]
        for tid in sorted(self.raw):
            raw = self.raw[tid]
            for step, w in enumerate(raw):
                lines.append(
                    f"{tid},{step},{format(w, '.17g')},"
                    f"{format(w / self.z, '.17g')}"
                )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_weight_table(
    field: RewardField,
    ta: Dataset,
    config: RunConfig,
    term: str = "exp_alpha_r",
    normalize: bool | None = None,
) -> WeightTable:
    """Weights for every task-agnostic step from the score field.

    ``term`` selects the per-step base: exp(alpha * R_i) for the main method,
    or 10 * c(s_i) (ten times the classifier probability) for the ablation
    variants. Z is the mean raw weight over all steps; the normalized flag
    defaults to config.normalize_weights.
    """
    if term not in WEIGHT_TERMS:
        raise ValueError(f"unknown weight term {term!r}")
    if normalize is None:
        normalize = config.normalize_weights
    raw: dict[int, np.ndarray] = {}
    total = 0.0
    count = 0
    for t in ta.trajectories:
        try:
            r = field.for_trajectory(t.id)
        except KeyError as exc:
            raise KeyError(
                f"reward field missing trajectory {t.id}"
            ) from exc
        if len(r) != len(t):
            raise ValueError(
                f"trajectory {t.id}: reward field has {len(r)} steps, "
                f"dataset has {len(t)}"
            )
        if term == "exp_alpha_r":
            e = np.exp(config.alpha * r)
        else:
            e = 10.0 / (1.0 + np.exp(-r))
        w = compute_weights_from_terms(e, config.gamma)
        raw[t.id] = w
        total += w.sum()
        count += len(w)
    if count == 0:
        raise ValueError("dataset has no steps to weight")
    z = total / count
    return WeightTable(raw=raw, z=z, normalized=bool(normalize))
