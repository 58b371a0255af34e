"""Occupancy-matching dual baseline (KL form) with divergence instrumentation.

The value function is trained on the dual objective

    min_V (1 - gamma_v) * E_{s0}[V(s0)]
          + log E_{(s,s')}[ exp(R(s) + gamma_v * V(s') - V(s)) ]

with the log-mean-exp stabilized by max subtraction. The objective is only
grounded when states appearing inside the exponent as next-states also appear
as current states: a state s whose incoming transition survived but whose
outgoing transition is missing contributes only +gamma_v * V(s), so the
objective is monotone in V(s) and the minimizer runs away. A monitor records
max |V| over the dataset so this failure mode is observable; dropping every
x-th transition from each trajectory reproduces it on demand.

Final states of each trajectory have no outgoing transition; left alone they
sit only on the +gamma_v side and drift exactly like a missing-transition
state, so training absorbs them with terminal self-loops. Interior coverage
is then what separates bounded from divergent runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from twbc.data import Dataset, RunConfig, normalize_state
from twbc.discriminator import RewardField
from twbc.nn import Mlp, adam_step, backward, forward, init_adam, init_mlp
from twbc.weights import WeightTable

log = logging.getLogger(__name__)

MONITOR_INTERVAL = 1000
ADVANTAGE_CLAMP = 50.0  # exp argument bound when extracting weights


@dataclass
class Transitions:
    """Flattened (s, s') pairs plus the initial-state pool."""

    s0: np.ndarray
    s: np.ndarray
    sp: np.ndarray
    traj_ids: np.ndarray   # trajectory of each transition
    steps: np.ndarray      # step index of the current state s

    @property
    def n(self) -> int:
        return int(self.s.shape[0])


def build_transitions(
    ta: Dataset,
    drop_every: int | None = None,
    absorb_final: bool = False,
) -> Transitions:
    """Consecutive (s_t, s_{t+1}) pairs within each trajectory.

    ``drop_every=x`` removes transition indices x-1, 2x-1, ... inside each
    trajectory (same arithmetic as the pair-removal corruption, applied to
    transitions instead of states). Initial states stay the true trajectory
    heads regardless of dropping.

    ``absorb_final`` appends a self-loop (s_last, s_last) per trajectory.
    Without it every final state appears only as a next-state, so the dual
    objective is monotone in V(s_last) and even complete data drifts at the
    boundary; the self-loop is the usual absorbing-state anchor and leaves
    the interior coverage (the thing dropping breaks) untouched.
    """
    if drop_every is not None and drop_every < 2:
        raise ValueError("drop_every must be >= 2")
    s_rows = []
    sp_rows = []
    tid_rows = []
    step_rows = []
    s0_rows = []
    for t in ta.trajectories:
        s0_rows.append(t.states[0])
        n = len(t)
        if n >= 2:
            keep = np.ones(n - 1, dtype=bool)
            if drop_every is not None:
                keep[drop_every - 1:: drop_every] = False
            idx = np.nonzero(keep)[0]
            s_rows.append(t.states[idx])
            sp_rows.append(t.states[idx + 1])
            tid_rows.append(np.full(idx.size, t.id, dtype=np.int64))
            step_rows.append(idx.astype(np.int64))
        if absorb_final:
            s_rows.append(t.states[n - 1: n])
            sp_rows.append(t.states[n - 1: n])
            tid_rows.append(np.array([t.id], dtype=np.int64))
            step_rows.append(np.array([n - 1], dtype=np.int64))
    if not s_rows:
        raise ValueError("dataset contains no transitions")
    return Transitions(
        s0=np.stack(s0_rows),
        s=np.concatenate(s_rows),
        sp=np.concatenate(sp_rows),
        traj_ids=np.concatenate(tid_rows),
        steps=np.concatenate(step_rows),
    )


def smodice_kl_loss_grads(
    v_s0: np.ndarray,
    v_s: np.ndarray,
    v_sp: np.ndarray,
    r: np.ndarray,
    gamma_v: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Dual objective value and gradients w.r.t. the three V batches."""
    v0 = np.asarray(v_s0, dtype=np.float64)
    vs = np.asarray(v_s, dtype=np.float64)
    vp = np.asarray(v_sp, dtype=np.float64)
    q = np.asarray(r, dtype=np.float64) + gamma_v * vp - vs
    m = np.max(q)
    if not np.isfinite(m):
        raise FloatingPointError("non-finite exponent in dual objective")
    shifted = np.exp(q - m)
    mean_shifted = shifted.mean()
    loss = float((1.0 - gamma_v) * v0.mean() + m + np.log(mean_shifted))
    omega = shifted / (shifted.sum())
    g0 = np.full(v0.shape, (1.0 - gamma_v) / v0.size)
    gs = -omega
    gsp = gamma_v * omega
    return loss, g0, gs, gsp


def smodice_kl_loss(v_s0, v_s, v_sp, r, gamma_v: float) -> float:
    return smodice_kl_loss_grads(v_s0, v_s, v_sp, r, gamma_v)[0]


@dataclass
class ValueMonitor:
    """max |V| over all dataset states, sampled every 1000 steps and at the
    final step (a zero-step run records its single entry at step 0)."""

    steps: list[int] = field(default_factory=list)
    max_abs_v: list[float] = field(default_factory=list)
    min_v: list[float] = field(default_factory=list)
    max_v: list[float] = field(default_factory=list)
    diverged_at: int | None = None

    def record(self, step: int, values: np.ndarray) -> None:
        self.steps.append(step)
        self.max_abs_v.append(float(np.max(np.abs(values))))
        self.min_v.append(float(np.min(values)))
        self.max_v.append(float(np.max(values)))

    def to_csv(self, path) -> None:
        from pathlib import Path

        lines = ["step,max_abs_V,min_V,max_V"]
        for s, ma, lo, hi in zip(self.steps, self.max_abs_v, self.min_v,
                                 self.max_v):
            lines.append(
                f"{s},{format(ma, '.17g')},{format(lo, '.17g')},"
                f"{format(hi, '.17g')}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ValueTrainResult:
    net: Mlp
    monitor: ValueMonitor


def train_value(
    ta: Dataset,
    reward: RewardField,
    config: RunConfig,
    rng: np.random.Generator,
    drop_every: int | None = None,
) -> ValueTrainResult:
    """Fit V on the dual objective, recording the divergence monitor.

    A non-finite loss is recorded as a divergence event (step index in the
    monitor) and training stops there; the partial result is still returned
    so reports can show the blow-up. Trajectory ends are absorbed (terminal
    self-loops) so boundary drift does not masquerade as the
    missing-transition failure mode.
    """
    trans = build_transitions(ta, drop_every=drop_every, absorb_final=True)
    r_all = reward.lookup(trans.traj_ids, trans.steps)
    stats = ta.norm_stats
    s0 = normalize_state(trans.s0, stats)
    s = normalize_state(trans.s, stats)
    sp = normalize_state(trans.sp, stats)
    all_states = normalize_state(
        np.concatenate([t.states for t in ta.trajectories]), stats
    )
    d = ta.state_dim
    sizes = [d] + [config.hidden_size] * config.n_hidden + [1]
    net = init_mlp(sizes, "relu", "scalar_value", rng)
    adam = init_adam(net.params())
    names = net.param_names()
    monitor = ValueMonitor()

    def sample_monitor(step: int) -> None:
        values, _ = forward(net, all_states)
        monitor.record(step, values[:, 0])

    if config.steps_value == 0:
        sample_monitor(0)
    b = config.batch_value
    n0 = s0.shape[0]
    nt = trans.n
    for step in range(1, config.steps_value + 1):
        idx0 = rng.integers(0, n0, size=b)
        idxt = rng.integers(0, nt, size=b)
        stacked = np.concatenate([s0[idx0], s[idxt], sp[idxt]], axis=0)
        values, cache = forward(net, stacked)
        v = values[:, 0]
        try:
            loss, g0, gs, gsp = smodice_kl_loss_grads(
                v[:b], v[b: 2 * b], v[2 * b:], r_all[idxt], config.gamma_v
            )
        except FloatingPointError:
            loss = np.nan
        if not np.isfinite(loss):
            monitor.diverged_at = step
            log.warning("dual objective non-finite at step %d; stopping", step)
            sample_monitor(step)
            return ValueTrainResult(net=net, monitor=monitor)
        upstream = np.concatenate([g0, gs, gsp])[:, None]
        grads, _ = backward(net, cache, upstream)
        adam_step(net.params(), grads, adam, lr=config.lr_value,
                  weight_decay=config.weight_decay_value, names=names)
        if step % MONITOR_INTERVAL == 0 or step == config.steps_value:
            sample_monitor(step)
    return ValueTrainResult(net=net, monitor=monitor)


def extract_dice_weights(
    net: Mlp,
    ta: Dataset,
    reward: RewardField,
    gamma_v: float,
) -> tuple[WeightTable, int]:
    """Per-step weights exp(R(s_t) + gamma_v V(s_{t+1}) - V(s_t)), normalized.

    The final state of each trajectory reuses the trajectory's last computable
    weight (a single-state trajectory falls back to exp(R)). Exponents are
    clamped at ADVANTAGE_CLAMP; the clamp count is returned so callers can
    flag runs whose weights overflowed.
    """
    raw: dict[int, np.ndarray] = {}
    total = 0.0
    count = 0
    clamped = 0
    stats = ta.norm_stats
    for t in ta.trajectories:
        r = reward.for_trajectory(t.id)
        if len(r) != len(t):
            raise ValueError(
                f"trajectory {t.id}: reward field length {len(r)} != {len(t)}"
            )
        values, _ = forward(net, normalize_state(t.states, stats))
        v = values[:, 0]
        n = len(t)
        if n == 1:
            adv = np.array([r[0]])
        else:
            adv = np.empty(n)
            adv[: n - 1] = r[: n - 1] + gamma_v * v[1:] - v[: n - 1]
            adv[n - 1] = adv[n - 2]
        clamped += int(np.sum(adv > ADVANTAGE_CLAMP))
        w = np.exp(np.minimum(adv, ADVANTAGE_CLAMP))
        raw[t.id] = w
        total += w.sum()
        count += n
    if clamped:
        log.warning("%d advantage terms clamped at exp(%g)", clamped,
                    ADVANTAGE_CLAMP)
    z = total / count
    return WeightTable(raw=raw, z=z, normalized=True), clamped
