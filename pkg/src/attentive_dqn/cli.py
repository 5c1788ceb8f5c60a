"""Command-line front end: ``attentive-dqn {train,sweep-batch,verify,describe,plot}``.

Configuration is resolved in this order, later sources winning: preset
defaults, ``--config FILE`` (flat ``key = value`` lines, ``#`` comments),
``ADQN_SET_<KEY>`` environment variables, then repeated ``--set key=value``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing
import os
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .qnetworks import MODEL_KINDS, describe, make_qnet
from .replay_env import ENVIRONMENTS, make_env
from .tensor_compute import ConfigError
from .trainer import PRESETS, MetricsLog, TrainerConfig, aggregate_seeds, preset, run

log = logging.getLogger("attentive_dqn")

ENV_PREFIX = "ADQN_SET_"
SWEEP_BATCH_SIZES = (32, 64, 128, 256)


@dataclass
class ExperimentSpec:
    env: str
    model_kind: str
    preset: str = "desk"
    overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] | None = None
    out_dir: Path = Path("runs")

    def resolve(self) -> TrainerConfig:
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env!r}; registered: {sorted(ENVIRONMENTS)}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}; expected one of {MODEL_KINDS}")
        cfg = apply_overrides(preset(self.preset), self.overrides)
        if self.seeds is not None:
            cfg.seeds = tuple(self.seeds)
        cfg.validate()
        return cfg


def _parse_value(name: str, annotation: str, raw: str):
    raw = raw.strip()
    if "None" in annotation and raw.lower() in ("none", "null", ""):
        return None
    if annotation.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if annotation.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if annotation.startswith("int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if annotation.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {annotation}") from None
    return raw


def apply_overrides(cfg: TrainerConfig, overrides: dict) -> TrainerConfig:
    """Return a copy of ``cfg`` with string-valued overrides parsed per field type."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainerConfig)}
    updates = {}
    for key, raw in overrides.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, str(fields[key]), raw) if isinstance(raw, str) else raw
    return dataclasses.replace(cfg, **updates)


def read_config_file(path: str | Path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX)}


def parse_set(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value
    return out


def spec_from_args(args, model_kind: str | None = None) -> ExperimentSpec:
    overrides = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    overrides.update(env_overrides())
    overrides.update(parse_set(args.set))
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    return ExperimentSpec(args.env, model_kind or args.model, args.preset, overrides, seeds, Path(args.out))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _run_seed(job):
    cfg, env, model, seed, seed_dir = job
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    try:
        metrics = run(cfg, env, model, seed, seed_dir)
    except Exception:
        (seed_dir / "error.txt").write_text(traceback.format_exc())
        return seed, False
    metrics.write_csv(seed_dir / "metrics.csv", cfg.smoothing_window)
    (seed_dir / "timing.json").write_text(json.dumps({"seconds_per_1k_steps": metrics.seconds_per_1k}))
    return seed, True


def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def write_summary(out: Path, seeds, window: int, title: str = "") -> "RunSummary":
    from .plots import plot_run

    logs = [MetricsLog.read_csv(seed_dir(out, s) / "metrics.csv") for s in seeds]
    summary = aggregate_seeds(logs, window, seeds)
    summary.write_json(out / "summary.json")
    plot_run(summary, out / "curves.png", title)
    return summary


def train_spec(spec: ExperimentSpec, workers: int = 1) -> int:
    cfg = spec.resolve()
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"env": spec.env, "model": spec.model_kind, "preset": spec.preset,
                "batch_size_resolved": cfg.batch_for(spec.model_kind), **cfg.to_dict()}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    jobs = [(cfg, spec.env, spec.model_kind, s, seed_dir(out, s)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("fork").Pool(min(workers, len(jobs))) as pool:
            results = pool.map(_run_seed, jobs)
    else:
        results = [_run_seed(j) for j in jobs]
    done = [s for s, ok in results if ok]
    failed = [s for s, ok in results if not ok]
    if done:
        write_summary(out, done, cfg.smoothing_window, f"{spec.model_kind} / {spec.env}")
    if failed:
        print(f"error: seeds {failed} failed; see {out}/seed_*/error.txt", file=sys.stderr)
        return 1
    print(f"wrote {len(done)} seed runs to {out}")
    return 0


def cmd_train(args) -> int:
    return train_spec(spec_from_args(args), args.workers)


# ---------------------------------------------------------------------------
# sweep-batch
# ---------------------------------------------------------------------------

def sweep_dir(out: Path, model: str, batch: int) -> Path:
    return out / f"{model}_bs{batch}"


def write_sweep_plots(out: Path, models, batch_sizes) -> None:
    from .plots import overlay_table, plot_overlay, plot_sweep_grid
    from .trainer import RunSummary, PhaseSummary

    rows = {}
    for model in models:
        summaries = {}
        for b in batch_sizes:
            data = json.loads((sweep_dir(out, model, b) / "summary.json").read_text())
            summaries[f"batch {b}"] = RunSummary(
                {k: PhaseSummary(*(np.asarray(v[f]) for f in ("steps", "per_seed", "mean", "min", "max")))
                 for k, v in data["phases"].items()}, data["seeds"])
        rows[model] = summaries
        plot_overlay(summaries, out / f"sweep_{model}.png", model)
        for phase in ("train", "eval"):
            grid, cols = overlay_table(summaries, phase)
            with open(out / f"sweep_{model}_{phase}.csv", "w") as fh:
                fh.write(",".join(["step"] + list(cols)) + "\n")
                for i, step in enumerate(grid):
                    fh.write(",".join([str(int(step))] + [repr(float(c[i])) for c in cols.values()]) + "\n")
    plot_sweep_grid(rows, out / "sweep_grid.png")


def cmd_sweep_batch(args) -> int:
    batch_sizes = [int(b) for b in args.batch_sizes.split(",")]
    models = args.models.split(",")
    status = 0
    for model in models:
        for b in batch_sizes:
            spec = spec_from_args(args, model)
            spec.overrides["batch_size"] = str(b)
            spec.out_dir = sweep_dir(Path(args.out), model, b)
            status |= train_spec(spec, args.workers)
    if status == 0:
        write_sweep_plots(Path(args.out), models, batch_sizes)
    return status


# ---------------------------------------------------------------------------
# verify / describe / plot
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(corrupt_conv_grad=args.corrupt_conv_grad)
    if args.json:
        print(json.dumps([dataclasses.asdict(r) for r in results], indent=1))
    else:
        width = max(len(r.name) for r in results)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def cmd_describe(args) -> int:
    if args.model not in MODEL_KINDS:
        print(f"error: unknown model kind {args.model!r}; expected one of {MODEL_KINDS}", file=sys.stderr)
        return 2
    info = describe(make_qnet(args.model, args.n_actions))
    if args.json:
        print(json.dumps(info, indent=1))
        return 0
    print(f"model: {info['model']}  actions: {info['n_actions']}")
    print(f"pipeline: {info['pipeline']}")
    for p in info["parameters"]:
        shape = "×".join(map(str, p["shape"]))
        print(f"  {p['name']:<40} {shape:>14} {p['count']:>10,}")
    print(f"total parameters: {info['total_parameters']:,}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.run)
    seeds = sorted(int(p.name.split("_")[1]) for p in out.glob("seed_*") if (p / "metrics.csv").exists())
    if not seeds:
        print(f"error: no seed_*/metrics.csv under {out}", file=sys.stderr)
        return 1
    write_summary(out, seeds, args.window)
    print(f"regenerated {out}/summary.json and {out}/curves.png")
    return 0


def _add_run_args(p, with_model=True):
    p.add_argument("--env", default="catch", help=f"one of {sorted(ENVIRONMENTS)}")
    if with_model:
        p.add_argument("--model", default="attentive", help=f"one of {MODEL_KINDS}")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--seeds", help="comma-separated seed list (default: the preset's seeds)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--config", help="flat key = value override file")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--workers", type=int, default=1, help="parallel seed processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attentive-dqn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model kind over all seeds")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-batch", help="train both model kinds across mini-batch sizes")
    _add_run_args(p, with_model=False)
    p.add_argument("--batch-sizes", default=",".join(map(str, SWEEP_BATCH_SIZES)))
    p.add_argument("--models", default=",".join(("attentive", "baseline")))
    p.set_defaults(func=cmd_sweep_batch)

    p = sub.add_parser("verify", help="run the gradient, shape and invariance property checks")
    p.add_argument("--json", action="store_true")
    p.add_argument("--corrupt-conv-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("describe", help="print layer shapes and parameter counts")
    p.add_argument("--model", default="attentive")
    p.add_argument("--n-actions", type=int, default=6)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("plot", help="regenerate summary and plots from a run's CSVs")
    p.add_argument("run", help="run directory containing seed_*/metrics.csv")
    p.add_argument("--window", type=int, default=10)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
