"""Reduce experiment artifacts to summary CSVs and SVG figures.

The reducer is file-based and single-threaded: it reads the curves/weights/
monitor CSVs an experiment wrote, aggregates across seeds (population
statistics, ddof=0), and renders matplotlib figures next to the delimited
output. Rendering is pinned to the Agg backend and the SVG hash salt and
date metadata are fixed so repeated reports are byte-stable.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "twbc"

_SVG_META = {"Date": None}  # drop the creation timestamp

SUMMARY_HEADER = ("method,step,mean_success_rate,std_success_rate,"
                  "mean_loss,std_loss")


def read_curves(path: str | Path) -> dict[int, dict[str, np.ndarray]]:
    """curves.csv -> {seed: {"steps": ..., "success": ..., "loss": ...}}."""
    rows_by_seed: dict[int, list[tuple[int, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"step", "seed", "success_rate", "loss"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise ValueError(
                f"{path}: expected columns {sorted(expected)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            seed = int(row["seed"])
            rows_by_seed.setdefault(seed, []).append(
                (int(row["step"]), float(row["success_rate"]),
                 float(row["loss"]))
            )
    out = {}
    for seed, rows in rows_by_seed.items():
        rows.sort(key=lambda r: r[0])
        arr = np.array(rows, dtype=np.float64)
        out[seed] = {
            "steps": arr[:, 0].astype(np.int64),
            "success": arr[:, 1],
            "loss": arr[:, 2],
        }
    return out


def resample_onto(grid: np.ndarray, steps: np.ndarray,
                  values: np.ndarray) -> np.ndarray:
    return np.interp(grid, steps, values)


def aggregate_series(
    series: list[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Mean/std across (steps, values) pairs.

    Matching grids are stacked directly; mismatched grids are interpolated
    onto the coarsest one (fewest points) and the caller is told via the
    returned flag so it can surface a note.
    """
    if not series:
        raise ValueError("nothing to aggregate")
    grids = [s for s, _ in series]
    same = all(g.shape == grids[0].shape and np.array_equal(g, grids[0])
               for g in grids)
    if same:
        grid = grids[0]
        stacked = np.stack([v for _, v in series])
        resampled = False
    else:
        grid = min(grids, key=lambda g: g.size)
        stacked = np.stack([resample_onto(grid, s, v) for s, v in series])
        resampled = True
    return grid, stacked.mean(axis=0), stacked.std(axis=0), resampled


@dataclass
class MethodSummary:
    label: str
    steps: np.ndarray
    mean_success: np.ndarray
    std_success: np.ndarray
    mean_loss: np.ndarray
    std_loss: np.ndarray
    resampled: bool = False


def summarize_curves(path: str | Path, label: str) -> MethodSummary:
    by_seed = read_curves(path)
    if not by_seed:
        raise ValueError(f"{path}: no curve rows")
    seeds = sorted(by_seed)
    succ = [(by_seed[s]["steps"], by_seed[s]["success"]) for s in seeds]
    loss = [(by_seed[s]["steps"], by_seed[s]["loss"]) for s in seeds]
    grid, ms, ss, res_a = aggregate_series(succ)
    _, ml, sl, res_b = aggregate_series(loss)
    if res_a or res_b:
        log.warning("%s: seeds disagree on eval grids; "
                    "resampled to the coarsest grid", path)
    return MethodSummary(label=label, steps=grid, mean_success=ms,
                         std_success=ss, mean_loss=ml, std_loss=sl,
                         resampled=res_a or res_b)


def write_summary_csv(summaries: list[MethodSummary],
                      path: str | Path) -> None:
    lines = [SUMMARY_HEADER]
    for s in sorted(summaries, key=lambda s: s.label):
        for i, step in enumerate(s.steps):
            lines.append(
                f"{s.label},{int(step)},"
                f"{format(s.mean_success[i], '.17g')},"
                f"{format(s.std_success[i], '.17g')},"
                f"{format(s.mean_loss[i], '.17g')},"
                f"{format(s.std_loss[i], '.17g')}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_report(summaries: list[MethodSummary], path: str | Path) -> None:
    """Success-rate curves with a shaded one-std band per method."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for s in sorted(summaries, key=lambda s: s.label):
        ax.plot(s.steps, s.mean_success, label=s.label, linewidth=1.6)
        ax.fill_between(s.steps, s.mean_success - s.std_success,
                        s.mean_success + s.std_success, alpha=0.22)
    ax.set_xlabel("gradient steps")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.04, 1.04)
    ax.legend(loc="best", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)


def _read_keyed_csv(path: str | Path, value_cols: list[str]):
    """trajectory-keyed CSV -> {traj_id: {col: array}} (rows step-ordered)."""
    rows: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tid = int(row["trajectory_id"])
            rows.setdefault(tid, []).append(
                (int(row["step"]), *(float(row[c]) for c in value_cols))
            )
    out = {}
    for tid, rr in rows.items():
        rr.sort(key=lambda r: r[0])
        arr = np.array(rr, dtype=np.float64)
        out[tid] = {"step": arr[:, 0]}
        for j, c in enumerate(value_cols):
            out[tid][c] = arr[:, j + 1]
    return out


def render_weight_figure(
    rewards_csv: str | Path,
    weights_csv: str | Path,
    path: str | Path,
    max_trajectories: int = 20,
) -> None:
    """Per-trajectory discriminator scores over weights, stacked axes.

    A handful of trajectories is enough to show the propagation effect;
    the lowest-id `max_trajectories` are drawn (deterministic subset).
    """
    rew = _read_keyed_csv(rewards_csv, ["R"])
    wts = _read_keyed_csv(weights_csv, ["raw_W", "normalized_W"])
    tids = sorted(set(rew) & set(wts))[:max_trajectories]
    fig, (ax_r, ax_w) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True)
    for tid in tids:
        ax_r.plot(rew[tid]["step"], rew[tid]["R"], linewidth=0.9, alpha=0.7)
        ax_w.plot(wts[tid]["step"], wts[tid]["normalized_W"],
                  linewidth=0.9, alpha=0.7)
    ax_r.set_ylabel("state score R")
    ax_w.set_yscale("log")
    ax_w.set_ylabel("normalized weight")
    ax_w.set_xlabel("trajectory step")
    ax_r.grid(alpha=0.3)
    ax_w.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)


def render_vmonitor_figure(
    traces: dict[str, str | Path], path: str | Path
) -> None:
    """max |V| against training step, one line per labeled trace, log y."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label in sorted(traces):
        steps, max_abs = [], []
        with open(traces[label], newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                steps.append(int(row["step"]))
                max_abs.append(float(row["max_abs_V"]))
        ax.plot(steps, max_abs, label=label, linewidth=1.4)
    ax.set_yscale("log")
    ax.set_xlabel("value training step")
    ax.set_ylabel("max |V| over dataset states")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


def build_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict:
    """Reduce one or more run directories into out_dir.

    Writes summary.csv and report.svg, plus a weight figure per method whose
    first seed produced weight/reward tables, and a value-monitor figure per
    method that traced one. Returns the written paths keyed by artifact.
    """
    dirs = [Path(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    multi = len(dirs) > 1
    summaries = []
    written: dict[str, object] = {}
    notes = []
    figures = []
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"run directory {d} does not exist")
        found_any = False
        for md in sorted(p for p in d.iterdir() if p.is_dir()):
            label = f"{d.name}/{md.name}" if multi else md.name
            seed_dirs = sorted(p for p in md.iterdir() if p.is_dir())
            has_curves = (md / "curves.csv").exists()
            traces = {p.name: p / "vmonitor.csv" for p in seed_dirs
                      if (p / "vmonitor.csv").exists()}
            if not has_curves and not traces:
                continue
            found_any = True
            if has_curves:
                s = summarize_curves(md / "curves.csv", label)
                if s.resampled:
                    notes.append(f"{label}: eval grids resampled to coarsest")
                summaries.append(s)
                with_tables = [p for p in seed_dirs
                               if (p / "weights.csv").exists()
                               and (p / "rewards.csv").exists()]
                if with_tables:
                    fig_path = out / f"weights_{_safe_name(label)}.svg"
                    render_weight_figure(with_tables[0] / "rewards.csv",
                                         with_tables[0] / "weights.csv",
                                         fig_path)
                    figures.append(fig_path)
            if traces:
                fig_path = out / f"vmonitor_{_safe_name(label)}.svg"
                render_vmonitor_figure(traces, fig_path)
                figures.append(fig_path)
        if not found_any:
            raise ValueError(f"{d}: no method directories with "
                             "curves.csv or vmonitor traces")

    summary_path = out / "summary.csv"
    write_summary_csv(summaries, summary_path)
    written["summary"] = summary_path
    if summaries:
        report_path = out / "report.svg"
        render_report(summaries, report_path)
        written["report"] = report_path
    written["figures"] = figures
    if notes:
        notes_path = out / "report_notes.txt"
        notes_path.write_text("\n".join(notes) + "\n", encoding="utf-8")
        written["notes"] = notes_path
    return written
