"""Multi-seed experiment pipelines and the on-disk artifact layout.

Each (method, seed) pair runs an independent pipeline and produces a learning
curve plus the method's intermediate artifacts. The six methods:

  bc          plain behavior cloning, unit weights, no discriminator
  tailo       two-step screened discriminator -> exp(alpha * R) weights
  ours_v1     two-step discriminator, 10 * c(s) weight term
  ours_v2     one-step unclamped discriminator, exp(alpha * R) weights
  ours_v3     one-step unclamped discriminator, 10 * c(s) weight term
  smodice_kl  cross-entropy discriminator -> dual value fit -> advantage
              weights (the occupancy-matching baseline)

Abort convention: when any stage diverges, the run keeps its evaluation grid
and reports success 0 from the abort onward, so aggregate curves stay
comparable across seeds. All randomness flows from per-run seed sequences;
reruns with the same seed are bitwise identical.

Layout under an output directory:

  manifest.json                resolved config, seeds, dataset checksums
  <method>/curves.csv          step,seed,success_rate,loss for all seeds
  <method>/seed<k>/policy.json       final policy checkpoint
  <method>/seed<k>/rewards.csv       discriminator scores (when present)
  <method>/seed<k>/weights.csv       per-step cloning weights (when present)
  <method>/seed<k>/vmonitor.csv      value-monitor trace (smodice_kl only)
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twbc import __version__
from twbc.data import Dataset, RunConfig
from twbc.dice import (
    ValueMonitor,
    ValueTrainResult,
    extract_dice_weights,
    train_value,
)
from twbc.discriminator import (
    RewardField,
    TrainingDivergedError,
    pretrain_discriminator,
    reward_field,
    select_safe_negatives,
    train_cross_entropy_discriminator,
    train_final_discriminator,
    train_one_step_discriminator,
)
from twbc.envs import PointmazeEnv, rollout
from twbc.nn import GradientError
from twbc.policy import Policy, PolicyDivergedError, save_policy, train_policy
from twbc.weights import WeightTable, build_weight_table

log = logging.getLogger(__name__)

METHOD_NAMES = ("bc", "tailo", "ours_v1", "ours_v2", "ours_v3", "smodice_kl")

_TWO_STEP = {"tailo": "exp_alpha_r", "ours_v1": "scaled_prob"}
_ONE_STEP = {"ours_v2": "exp_alpha_r", "ours_v3": "scaled_prob"}


def eval_grid(config: RunConfig) -> list[int]:
    """Checkpoint steps train_policy will fire on: every interval + final."""
    steps = list(range(config.eval_interval, config.steps_bc + 1,
                       config.eval_interval))
    if config.steps_bc > 0 and (not steps or steps[-1] != config.steps_bc):
        steps.append(config.steps_bc)
    return steps


@dataclass
class MethodRun:
    """In-memory result of one (method, seed) pipeline."""

    method: str
    seed: int
    steps: list[int]
    success: list[float]
    loss: list[float]
    aborted_stage: str | None = None
    aborted_detail: str = ""
    policy: Policy | None = None
    reward: RewardField | None = None
    weights: WeightTable | None = None
    monitor: ValueMonitor | None = None
    safe_ids: list[int] = field(default_factory=list)
    dice_clamped: int = 0


def _rngs_for(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence([int(seed)]).spawn(4)
    names = ("disc", "value", "policy", "eval")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def run_single(
    method: str,
    ts: Dataset | None,
    ta: Dataset,
    config: RunConfig,
    seed: int,
    env: PointmazeEnv | None = None,
) -> MethodRun:
    """One full pipeline; never raises on training divergence (records it)."""
    if method not in METHOD_NAMES:
        raise ValueError(f"unknown method {method!r}; use one of {METHOD_NAMES}")
    if method != "bc" and ts is None:
        raise ValueError(f"method {method} needs a task-specific dataset")
    env = env if env is not None else PointmazeEnv()
    rngs = _rngs_for(seed)
    run = MethodRun(method=method, seed=seed, steps=eval_grid(config),
                    success=[], loss=[])

    flat = None
    try:
        if method in _TWO_STEP:
            screen = pretrain_discriminator(ts, ta, config, rngs["disc"])
            run.safe_ids = select_safe_negatives(
                screen, ta, config.beta1, config.logit_clamp
            )
            net = train_final_discriminator(
                ts, ta, run.safe_ids, config, rngs["disc"]
            )
            run.reward = reward_field(net, ta, config.logit_clamp)
            run.weights = build_weight_table(
                run.reward, ta, config, term=_TWO_STEP[method]
            )
        elif method in _ONE_STEP:
            net = train_one_step_discriminator(ts, ta, config, rngs["disc"])
            run.reward = reward_field(net, ta, config.logit_clamp)
            run.weights = build_weight_table(
                run.reward, ta, config, term=_ONE_STEP[method]
            )
        elif method == "smodice_kl":
            net = train_cross_entropy_discriminator(ts, ta, config,
                                                    rngs["disc"])
            run.reward = reward_field(net, ta, config.logit_clamp)
            vres = train_value(ta, run.reward, config, rngs["value"])
            run.monitor = vres.monitor
            if vres.monitor.diverged_at is not None:
                raise TrainingDivergedError(
                    f"value fit diverged at step {vres.monitor.diverged_at}"
                )
            run.weights, run.dice_clamped = extract_dice_weights(
                vres.net, ta, run.reward, config.gamma_v
            )
        if run.weights is not None:
            flat = run.weights.flat_weights(ta)
    except (TrainingDivergedError, GradientError, FloatingPointError) as e:
        run.aborted_stage = "weighting"
        run.aborted_detail = str(e)
        log.warning("%s seed %d aborted during weighting: %s", method, seed, e)

    if run.aborted_stage is None:
        losses: list[tuple[int, float]] = []

        def on_checkpoint(step, policy):
            res = rollout(policy, env, config.eval_episodes, rngs["eval"])
            run.success.append(res.success_rate)
            run.loss.append(losses[-1][1])

        try:
            run.policy = train_policy(
                ta, flat, config, rngs["policy"],
                on_checkpoint=on_checkpoint, history=losses,
            )
        except (PolicyDivergedError, GradientError) as e:
            run.aborted_stage = "cloning"
            run.aborted_detail = str(e)
            log.warning("%s seed %d aborted during cloning: %s",
                        method, seed, e)

    # zero-fill the tail of the grid so aborted runs stay plottable
    while len(run.success) < len(run.steps):
        run.success.append(0.0)
        run.loss.append(0.0)
    return run


def chain_demo_config() -> RunConfig:
    """Settings for the chain-walk value-divergence demo.

    The runaway direction on the thinned chain is an oscillation across the
    20-state grid (kept/removed transitions alternate), so the value net
    needs dense first-layer coverage before the drift self-amplifies; at the
    desk-default width of 64 only the occasional lucky seed takes off within
    the step budget. Width 256 makes all three demo seeds separate cleanly
    (thinned runs grow >=16x from the first checkpoint by step 5000, intact
    runs stay within 2%) while six runs finish in under four minutes.
    """
    return RunConfig(hidden_size=256, batch_value=256, steps_value=5000)


def run_chain_divergence(
    ta: Dataset,
    config: RunConfig,
    seed: int,
    drop_every: int | None = None,
) -> ValueTrainResult:
    """Dual value fit with a zero reward field (isolates the recursion).

    With intact transition coverage the fit stays bounded; dropping every
    x-th transition leaves states that appear on only one side of the
    exponent and the value estimate runs away. The monitor trace is the
    artifact of interest; no policy is extracted.
    """
    zero = RewardField(
        rewards={t.id: np.zeros(len(t)) for t in ta.trajectories},
        clamp=config.logit_clamp,
    )
    rng = _rngs_for(seed)["value"]
    return train_value(ta, zero, config, rng, drop_every=drop_every)


def curves_csv_text(runs: list[MethodRun]) -> str:
    """All seeds of one method, seeds in run order, steps ascending."""
    lines = ["step,seed,success_rate,loss"]
    for r in runs:
        for s, sr, lo in zip(r.steps, r.success, r.loss):
            lines.append(
                f"{s},{r.seed},{format(sr, '.17g')},{format(lo, '.17g')}"
            )
    return "\n".join(lines) + "\n"


def write_run_artifacts(run: MethodRun, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if run.policy is not None:
        save_policy(run.policy, out / "policy.json")
    if run.reward is not None:
        run.reward.to_csv(out / "rewards.csv")
    if run.weights is not None:
        run.weights.to_csv(out / "weights.csv")
    if run.monitor is not None:
        run.monitor.to_csv(out / "vmonitor.csv")
    if run.aborted_stage is not None:
        (out / "aborted.json").write_text(
            json.dumps({"stage": run.aborted_stage,
                        "detail": run.aborted_detail}, indent=2) + "\n",
            encoding="utf-8",
        )


def sha256_of(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(
    out_dir: str | Path,
    config: RunConfig,
    methods: list[str],
    seeds: list[int],
    dataset_paths: dict[str, str | Path] | None = None,
    extra: dict | None = None,
) -> Path:
    entry: dict = {
        "tool": "twbc",
        "version": __version__,
        "config": config.to_dict(),
        "methods": list(methods),
        "seeds": [int(s) for s in seeds],
    }
    if dataset_paths:
        entry["datasets"] = {
            name: {"path": str(p), "sha256": sha256_of(p)}
            for name, p in dataset_paths.items()
        }
    if extra:
        entry.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def run_experiment(
    ts: Dataset | None,
    ta: Dataset,
    config: RunConfig,
    methods: list[str],
    seeds: list[int],
    out_dir: str | Path,
    env: PointmazeEnv | None = None,
    dataset_paths: dict[str, str | Path] | None = None,
) -> list[MethodRun]:
    """Cross product of methods and seeds, written to `out_dir`."""
    if not seeds:
        raise ValueError("need at least one seed")
    for m in methods:
        if m not in METHOD_NAMES:
            raise ValueError(f"unknown method {m!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, config, methods, seeds, dataset_paths)
    all_runs = []
    for method in methods:
        method_runs = []
        for seed in seeds:
            log.info("running %s seed %d", method, seed)
            run = run_single(method, ts, ta, config, seed, env=env)
            write_run_artifacts(run, out / method / f"seed{seed}")
            method_runs.append(run)
        (out / method / "curves.csv").write_text(
            curves_csv_text(method_runs), encoding="utf-8"
        )
        all_runs.extend(method_runs)
    return all_runs
