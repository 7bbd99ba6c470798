"""``pushgrid`` command line: train, finetune, eval, replay.

Exit codes: 0 ok, 2 usage or configuration error, 3 checkpoint/architecture
mismatch, 4 runtime fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch
import yaml

from pushgrid import evalbench, ppo, scene
from pushgrid.env import derive_seed
from pushgrid.errors import (
    CheckpointMismatchError,
    InvalidInputError,
    PushGridError,
    ScenarioInfeasibleError,
    SimulationFault,
    TrainingFault,
)
from pushgrid.nn.extractors import KINDS
from pushgrid.scenarios import EVAL_SUITE, SCENARIOS, resolve_scenario

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_FAULT = 0, 2, 3, 4
OUT_ENV = "PUSHGRID_OUT_DIR"
RUN_KEYS = {"scenario", "noise", "randomize", "out_dir"}

log = logging.getLogger("pushgrid")


class UsageError(Exception):
    pass


# -- configuration ----------------------------------------------------------------


def load_run_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {p} must be a mapping")
    known = RUN_KEYS | {f.name for f in dataclasses.fields(ppo.TrainConfig)}
    for key in doc:
        if key not in known:
            raise UsageError(f"config {p}: unknown key {key!r}")
    return doc


def build_run(doc: dict, args) -> tuple[ppo.TrainConfig, object, dict]:
    """Merge file config with CLI overrides; returns (train config, scenario spec, snapshot)."""
    doc = dict(doc)
    for flag, key in (("seed", "seed"), ("extractor", "extractor"), ("max_env_steps", "max_env_steps"),
                      ("scenario", "scenario")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    train_keys = {f.name for f in dataclasses.fields(ppo.TrainConfig)}
    try:
        cfg = ppo.TrainConfig.from_dict({k: v for k, v in doc.items() if k in train_keys})
    except TypeError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    spec = resolve_scenario(doc.get("scenario", "training"))
    for toggle in ("noise", "randomize"):
        if toggle in doc:
            spec = dataclasses.replace(spec, **{toggle: bool(doc[toggle])})
    snapshot = {**cfg.to_dict(), "scenario": spec.to_dict()}
    return cfg, spec, snapshot


def output_dir(args, default_name: str, config_root=None) -> Path:
    """``--out`` if given, else a fresh directory under $PUSHGRID_OUT_DIR,
    the config's ``out_dir``, or ./runs (in that order)."""
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV) or config_root or "runs")
    path = root / default_name
    n = 1
    while path.exists():
        path = root / f"{default_name}-{n}"
        n += 1
    return path


def write_snapshot(out: Path, snapshot: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))


def parse_scenarios(value: str) -> list[str]:
    if value.strip() == "all":
        return list(EVAL_SUITE)
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = [n for n in names if n not in SCENARIOS and not Path(n).is_file()]
    if unknown or not names:
        raise UsageError(f"unknown scenario(s) {', '.join(unknown) or value!r}; known: {', '.join(SCENARIOS)}")
    return names


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    cfg, spec, snapshot = build_run(doc, args)
    out = output_dir(args, f"train-{spec.name}-{cfg.extractor}-s{cfg.seed}", doc.get("out_dir"))
    write_snapshot(out, snapshot)
    paths = ppo.train(cfg, spec, out)
    print(f"training finished (budget {cfg.max_env_steps} env steps); {len(paths)} checkpoint(s) in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ckpt = _existing(args.checkpoint)
    saved = ppo.load_checkpoint(ckpt)
    if args.extractor is not None and args.extractor != saved["extractor"]:
        raise CheckpointMismatchError(
            f"checkpoint holds a {saved['extractor']!r} extractor, requested {args.extractor!r}")
    spec = resolve_scenario(args.scenario)
    seed = args.seed if args.seed is not None else saved["config"]["seed"]
    out = output_dir(args, f"finetune-{spec.name}-s{seed}")
    write_snapshot(out, {**saved["config"], "seed": seed, "scenario": spec.to_dict()})
    (out / "source.txt").write_text(f"checkpoint: {ckpt}\nsteps: {args.steps}\n")
    path = ppo.fine_tune(ckpt, spec, args.steps, out, seed=args.seed)
    print(f"fine-tuned checkpoint written to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint)
    names = parse_scenarios(args.scenarios)
    model = ppo.load_policy(ckpt, args.extractor)
    out = output_dir(args, f"eval-s{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    report = evalbench.run_suite(model, names, args.episodes, args.seed, args.deterministic)
    report.write_csv(out / "report.csv")
    for k, name in enumerate(names):
        for i in range(args.export):
            seed = derive_seed(args.seed, k, i)
            outcome = evalbench.run_episode(model, name, seed, args.deterministic)
            stem = f"{evalbench.evaluation_scenario(name).name}_{i:04d}"
            evalbench.export_trajectory(outcome, out / f"{stem}.ndjson")
            evalbench.export_trajectory(outcome, out / f"{stem}.csv")
    print(report.format_table())
    print(f"report written to {out / 'report.csv'}")
    return EXIT_OK


def cmd_replay(args) -> int:
    src = _existing(args.trajectory)
    result = evalbench.replay(src)
    out = Path(args.out) if args.out else src.parent / f"{src.stem}_replay"
    out.mkdir(parents=True, exist_ok=True)
    env = result.env
    grid = scene.rasterize([(o.shape, o.pose) for o in env.initial_state.obstacles], env.workspace)
    scene.write_pgm(out / "grid.pgm", grid)
    final = evalbench.EpisodeOutcome(result.outcome, result.steps, 0.0, 0.0, trajectory=env.trajectory)
    evalbench.export_trajectory(final, out / "trajectory.csv")
    print(f"replayed {result.steps} steps, outcome {result.outcome}")
    print(f"max pose divergence: {result.max_pose_divergence:.3e} m")
    print(f"max angle divergence: {result.max_angle_divergence:.3e} rad")
    print(f"max reward divergence: {result.max_reward_divergence:.3e}")
    print(f"wrote {out / 'grid.pgm'} and {out / 'trajectory.csv'}")
    return EXIT_OK


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushgrid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, extractor=True):
        p.add_argument("--workers", type=int, default=None, help="torch threads (default: all cores)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")
        if extractor:
            p.add_argument("--extractor", choices=KINDS, default=None)

    p = sub.add_parser("train", help="train a policy from scratch")
    p.add_argument("--config", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--max-env-steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on another scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default="dual")
    p.add_argument("--steps", "--max-env-steps", dest="steps", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scenario suites")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", default="all", help="comma-separated names or 'all'")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--export", type=int, default=0, metavar="K", help="also export K trajectories per scenario")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-simulate an exported NDJSON trajectory")
    p.add_argument("trajectory")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "seed", 0) is None and args.command == "eval":
        args.seed = 0
    if getattr(args, "episodes", 1) < 1:
        print("error: --episodes must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.workers or os.cpu_count() or 1)
    try:
        return args.func(args)
    except (UsageError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TrainingFault, SimulationFault, ScenarioInfeasibleError, PushGridError, OSError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
