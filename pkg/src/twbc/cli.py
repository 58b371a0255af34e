"""Command-line front end.

Subcommands mirror the experiment lifecycle: generate datasets, corrupt or
truncate them, run multi-seed method comparisons, sweep hyperparameter
grids, and reduce result directories into CSV summaries and SVG figures.
Every output gets a manifest recording the resolved parameters and content
checksums, and any existing output is refused without --force.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from twbc import __version__
from twbc.data import DatasetFormatError, RunConfig, load_dataset, save_dataset
from twbc.discriminator import LOSS_VARIANTS
from twbc.envs import (
    PointmazeEnv,
    corrupt_remove_every_x,
    gen_chain,
    gen_pointmaze,
    make_task_specific_examples,
    truncate_head_tail,
)
from twbc.experiment import (
    METHOD_NAMES,
    run_chain_divergence,
    run_experiment,
    sha256_of,
    write_manifest,
)
from twbc.report import build_report

log = logging.getLogger(__name__)


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


def _parse_ints(text: str) -> list[int]:
    try:
        items = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}")
    if not items:
        raise CliError(f"empty integer list {text!r}")
    return items


def _parse_methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise CliError("empty method list")
    for m in methods:
        if m not in METHOD_NAMES:
            raise CliError(
                f"unknown method {m!r}; choose from {', '.join(METHOD_NAMES)}"
            )
    return methods


def _guard_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError(f"{path} already exists (use --force to overwrite)")


def _guard_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(
            f"{path} exists and is not empty (use --force to overwrite)"
        )


def _load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values.update(tomllib.load(fh))
        except FileNotFoundError:
            raise CliError(f"config file {path} not found")
        except tomllib.TOMLDecodeError as e:
            raise CliError(f"config file {path}: {e}")
    values.update(overrides)
    try:
        return RunConfig.from_mapping(values)
    except (ValueError, TypeError) as e:
        raise CliError(f"bad configuration: {e}")


def _config_overrides(args) -> dict:
    overrides: dict = {}
    if getattr(args, "loss_variant", None):
        overrides["loss_variant"] = args.loss_variant
    if getattr(args, "no_normalize_weights", False):
        overrides["normalize_weights"] = False
    return overrides


def _write_sidecar(out_path: Path, command: str, params: dict) -> None:
    manifest = {
        "tool": "twbc",
        "version": __version__,
        "command": command,
        "params": params,
        "output": out_path.name,
        "sha256": sha256_of(out_path),
    }
    side = out_path.with_name(out_path.name + ".manifest.json")
    side.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _guard_file(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    if args.generator == "pointmaze":
        ds = gen_pointmaze(args.per_direction, args.noise_std, rng)
        params = {"generator": "pointmaze", "per_direction": args.per_direction,
                  "noise_std": args.noise_std, "seed": args.seed}
    elif args.generator == "chain":
        ds = gen_chain(args.n, args.trajectories, rng)
        params = {"generator": "chain", "n": args.n,
                  "trajectories": args.trajectories, "seed": args.seed}
    else:  # examples
        src = load_dataset(args.source)
        ds = make_task_specific_examples(src, args.tag, mode=args.mode)
        params = {"generator": "examples", "source": str(args.source),
                  "source_sha256": sha256_of(args.source),
                  "tag": args.tag, "mode": args.mode}
    save_dataset(ds, out)
    _write_sidecar(out, "gen-data", params)
    print(f"wrote {out} ({len(ds.trajectories)} trajectories)")
    return 0


def cmd_corrupt(args) -> int:
    out = Path(args.out)
    _guard_file(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    src = load_dataset(args.dataset)
    before = len(src.trajectories)
    ds = corrupt_remove_every_x(src, args.x)
    save_dataset(ds, out)
    _write_sidecar(out, "corrupt", {
        "input": str(args.dataset), "input_sha256": sha256_of(args.dataset),
        "x": args.x, "trajectories_dropped": before - len(ds.trajectories),
    })
    kept = sum(len(t) for t in ds.trajectories)
    print(f"wrote {out} ({kept} pairs kept)")
    return 0


def cmd_truncate(args) -> int:
    out = Path(args.out)
    _guard_file(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    src = load_dataset(args.dataset)
    ds = truncate_head_tail(src, args.head, args.tail)
    save_dataset(ds, out)
    _write_sidecar(out, "truncate", {
        "input": str(args.dataset), "input_sha256": sha256_of(args.dataset),
        "head": args.head, "tail": args.tail,
    })
    print(f"wrote {out} ({len(ds.trajectories)} trajectories)")
    return 0


def cmd_run(args) -> int:
    out = Path(args.out)
    _guard_dir(out, args.force)
    config = _load_config(args.config, _config_overrides(args))
    seeds = _parse_ints(args.seed)
    methods = _parse_methods(args.method)
    ta = load_dataset(args.ta, expected_kind="task_agnostic")
    dataset_paths: dict = {"ta": args.ta}

    if args.ts is None:
        # Value-divergence demonstration: dual value fit only, no policy.
        if methods != ["smodice_kl"]:
            raise CliError(
                "without --ts only `--method smodice_kl` is meaningful "
                "(value-fit demonstration); other methods need examples"
            )
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, config, methods, seeds, dataset_paths,
                       extra={"mode": "value_divergence_demo",
                              "drop_transitions": args.drop_transitions})
        for seed in seeds:
            res = run_chain_divergence(ta, config, seed,
                                       drop_every=args.drop_transitions)
            seed_dir = out / "smodice_kl" / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            res.monitor.to_csv(seed_dir / "vmonitor.csv")
            tag = (f"diverged at step {res.monitor.diverged_at}"
                   if res.monitor.diverged_at is not None else "bounded")
            print(f"seed {seed}: max|V| {res.monitor.max_abs_v[-1]:.3g} "
                  f"({tag})")
        return 0

    ts = load_dataset(args.ts, expected_kind="task_specific")
    dataset_paths["ts"] = args.ts
    if args.x is not None:
        ta = corrupt_remove_every_x(ta, args.x)
    if args.head is not None or args.tail is not None:
        ts = truncate_head_tail(ts, args.head or 0, args.tail or 0)
    if ta.state_dim != PointmazeEnv.state_dim:
        raise CliError(
            "run evaluates policies on the pointmass environment; the "
            f"task-agnostic dataset has state_dim {ta.state_dim}, expected "
            f"{PointmazeEnv.state_dim}"
        )
    extra = {}
    if args.x is not None:
        extra["removal_x"] = args.x
    if args.head is not None or args.tail is not None:
        extra["ts_head"] = args.head or 0
        extra["ts_tail"] = args.tail or 0
    runs = run_experiment(ts, ta, config, methods, seeds, out,
                          dataset_paths=dataset_paths)
    write_manifest(out, config, methods, seeds, dataset_paths, extra=extra)
    for r in runs:
        final = r.success[-1] if r.success else float("nan")
        status = (f"aborted in {r.aborted_stage}" if r.aborted_stage
                  else f"final success {final:.2f}")
        print(f"{r.method} seed {r.seed}: {status}")
    return 0


def _parse_grid(entries: list[str]) -> list[tuple[str, list]]:
    grid = []
    for entry in entries:
        if "=" not in entry:
            raise CliError(f"grid entry {entry!r} is not name=v1,v2,...")
        name, _, raw = entry.partition("=")
        name = name.strip()
        values: list = []
        for tok in raw.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                values.append(int(tok))
            except ValueError:
                try:
                    values.append(float(tok))
                except ValueError:
                    values.append(tok)
        if not name or not values:
            raise CliError(f"grid entry {entry!r} has no values")
        grid.append((name, values))
    if not grid:
        raise CliError("empty parameter grid")
    return grid


def _cell_name(named_values: list[tuple[str, object]]) -> str:
    parts = []
    for name, value in named_values:
        v = format(value, "g") if isinstance(value, float) else str(value)
        parts.append(f"{name}{v}")
    return "_".join(parts)


def cmd_ablate(args) -> int:
    out = Path(args.out)
    _guard_dir(out, args.force)
    base = _load_config(args.config, _config_overrides(args))
    seeds = _parse_ints(args.seed)
    methods = _parse_methods(args.method)
    grid = _parse_grid(args.grid)
    ta = load_dataset(args.ta, expected_kind="task_agnostic")
    ts = load_dataset(args.ts, expected_kind="task_specific")
    names = [name for name, _ in grid]
    rows = []
    for combo in itertools.product(*(values for _, values in grid)):
        named = list(zip(names, combo))
        cell = _cell_name(named)
        try:
            config = base.replace(**dict(named))
        except (ValueError, TypeError) as e:
            raise CliError(f"grid cell {cell}: {e}")
        log.info("ablation cell %s", cell)
        runs = run_experiment(ts, ta, config, methods, seeds, out / cell,
                              dataset_paths={"ta": args.ta, "ts": args.ts})
        for method in methods:
            finals = [r.success[-1] if r.success else 0.0
                      for r in runs if r.method == method]
            rows.append((named, method,
                         float(np.mean(finals)), float(np.std(finals))))
    header = ",".join(names) + (",method,mean_final_success_rate,"
                                "std_final_success_rate")
    lines = [header]
    for named, method, mean, std in rows:
        vals = ",".join(
            format(v, "g") if isinstance(v, float) else str(v)
            for _, v in named
        )
        lines.append(f"{vals},{method},{format(mean, '.17g')},"
                     f"{format(std, '.17g')}")
    (out / "grid_summary.csv").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8")
    print(f"wrote {out / 'grid_summary.csv'} ({len(rows)} rows)")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    _guard_dir(out, args.force)
    written = build_report(args.run_dirs, out)
    for key in ("summary", "report"):
        if key in written:
            print(f"wrote {written[key]}")
    for fig in written.get("figures", []):
        print(f"wrote {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twbc",
        description=("Trajectory-weighted behavior cloning laboratory: "
                     "dataset generation, corruption, multi-seed method "
                     "comparisons, and CSV/SVG reporting."),
    )
    parser.add_argument("--version", action="version",
                        version=f"twbc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gg = g.add_subparsers(dest="generator", required=True)
    gp = gg.add_parser("pointmaze", help="four-direction pointmass corpus")
    gp.add_argument("--per-direction", type=int, default=150)
    gp.add_argument("--noise-std", type=float, default=0.1)
    gc = gg.add_parser("chain", help="deterministic chain walks")
    gc.add_argument("--n", type=int, default=20, help="number of chain states")
    gc.add_argument("--trajectories", type=int, default=50)
    ge = gg.add_parser("examples",
                       help="task-specific examples from tagged trajectories")
    ge.add_argument("--source", required=True, help="task-agnostic dataset")
    ge.add_argument("--tag", required=True,
                    help="source tag (or bare direction letter)")
    ge.add_argument("--mode", choices=("final_state", "full"),
                    default="final_state")
    for p in (gp, gc, ge):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true")
        p.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("corrupt", help="remove every x-th pair per trajectory")
    c.add_argument("dataset")
    c.add_argument("--x", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("truncate",
                       help="keep each trajectory's first head/last tail states")
    t.add_argument("dataset")
    t.add_argument("--head", type=int, default=0)
    t.add_argument("--tail", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_truncate)

    r = sub.add_parser("run", help="train and evaluate methods across seeds")
    r.add_argument("--ta", required=True, help="task-agnostic dataset path")
    r.add_argument("--ts", help="task-specific dataset path (omit for the "
                               "value-divergence demonstration)")
    r.add_argument("--method", default="tailo,bc",
                   help=f"comma list from {{{','.join(METHOD_NAMES)}}}")
    r.add_argument("--seed", default="0", help="comma-separated seeds")
    r.add_argument("--config", help="TOML file with run parameters")
    r.add_argument("--loss-variant", choices=LOSS_VARIANTS)
    r.add_argument("--no-normalize-weights", action="store_true")
    r.add_argument("--x", type=int,
                   help="remove every x-th pair from the task-agnostic data")
    r.add_argument("--head", type=int,
                   help="truncate task-specific trajectories: first HEAD states")
    r.add_argument("--tail", type=int,
                   help="truncate task-specific trajectories: last TAIL states")
    r.add_argument("--drop-transitions", type=int,
                   help="value-divergence demo: drop every x-th transition")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="Cartesian hyperparameter sweep")
    a.add_argument("--ta", required=True)
    a.add_argument("--ts", required=True)
    a.add_argument("--grid", action="append", required=True,
                   help="name=v1,v2,... (repeatable; cells are the product)")
    a.add_argument("--method", default="tailo")
    a.add_argument("--seed", default="0")
    a.add_argument("--config")
    a.add_argument("--loss-variant", choices=LOSS_VARIANTS)
    a.add_argument("--no-normalize-weights", action="store_true")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    rep = sub.add_parser("report",
                         help="summarize run directories into CSV + SVG")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", required=True)
    rep.add_argument("--force", action="store_true")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DatasetFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
