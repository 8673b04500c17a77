"""Command-line front end.

Every subcommand reads the same configuration (defaults, then ``--config``,
then ``--set key=value`` overrides) and works inside one output directory,
where it also maintains ``manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from . import pipeline as pl
from .barrier import load_barrier, save_barrier
from .config import ConfigError, config_hash, dump_config, load_config
from .datasets import load_bundle, load_demos, save_bundle, save_demos
from .learning import TrainingDiverged
from .sim import CollectionFailed, RocbfController, SimulationDiverged, save_grid

log = logging.getLogger("rocbf")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_VIOLATIONS = 5
EXIT_VERIFICATION = 6
EXIT_SIMULATION = 7
EXIT_EVALUATION = 8

DEMOS = "demos.txt"
BUNDLE = "bundle.json"
BARRIER = "barrier.txt"
TRAIN_REPORT = "train_report.json"
VERIFICATION = "verification.json"
EVALUATION = "evaluation.json"
GRID = "compare_grid.txt"
CONFIG = "config.yaml"
MANIFEST = "manifest.json"


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


# ---------------------------------------------------------------------------
# manifest


def _seeds(cfg: dict) -> dict:
    base = cfg["seed"] * 10
    return dict(base=cfg["seed"], demos=base + pl.SEED_DEMOS, datasets=base + pl.SEED_DATA,
                features=base + pl.SEED_FEATURES, training=base + pl.SEED_TRAIN,
                verification=base + pl.SEED_VERIFY, evaluation=base + pl.SEED_EVAL)


def write_manifest(out: Path, cfg: dict, artifacts: dict, command: str, status: dict) -> Path:
    """Merge ``artifacts`` into the directory manifest; drops entries whose
    file no longer exists so every listed path is present."""
    path = out / MANIFEST
    old = {}
    if path.is_file():
        try:
            old = json.loads(path.read_text())
        except json.JSONDecodeError:
            old = {}
    arts = dict(old.get("artifacts", {})) if old.get("config_hash") == config_hash(cfg) else {}
    arts.update(artifacts)
    arts = {k: v for k, v in sorted(arts.items()) if (out / v).exists()}
    manifest = dict(
        format="rocbf-manifest v1",
        version=__version__,
        config_hash=config_hash(cfg),
        seeds=_seeds(cfg),
        command=command,
        status=status,
        artifacts=arts,
    )
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# stages with error translation


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.is_file():
        raise StageError(stage, f"{what} {path} not found", EXIT_DATA)
    return path


def do_collect(cfg, env, out: Path) -> dict:
    try:
        records, info = pl.stage_collect(cfg, env)
    except CollectionFailed as e:
        raise StageError("collect", str(e), EXIT_DATA) from e
    except SimulationDiverged as e:
        raise StageError("collect", str(e), EXIT_SIMULATION) from e
    save_demos(out / DEMOS, records)
    log.info("collect: wrote %d records to %s (%d rollouts rejected)", len(records), out / DEMOS,
             len(info["rejected"]))
    return {"demos": DEMOS}


def do_datasets(cfg, env, out: Path, demos: Optional[Path] = None) -> dict:
    src = _require(demos or out / DEMOS, "datasets", "demo file")
    try:
        records = load_demos(src)
        bundle = pl.stage_datasets(cfg, env, records)
    except ValueError as e:
        raise StageError("datasets", str(e), EXIT_DATA) from e
    save_bundle(out / BUNDLE, bundle)
    return {"bundle": BUNDLE}


def do_train(cfg, env, out: Path):
    src = _require(out / BUNDLE, "train", "dataset bundle")
    try:
        bundle = load_bundle(src)
    except ValueError as e:
        raise StageError("train", str(e), EXIT_DATA) from e
    try:
        bar, consts, report = pl.stage_train(cfg, env, bundle)
    except TrainingDiverged as e:
        raise StageError("train", f"training diverged: {e}", EXIT_TRAINING) from e
    save_barrier(out / BARRIER, bar, consts)
    (out / TRAIN_REPORT).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    arts = {"barrier": BARRIER, "train_report": TRAIN_REPORT}
    limit = cfg["thresholds"]["max_violation_fraction"]
    frac = report.violation_fraction
    log.info("train: violation fraction %.4f (limit %.4f), violations %s", frac, limit, report.violations)
    if frac > limit:
        fams = ", ".join(f"{f}: {report.violations[f]}/{report.sizes[f]}" for f in report.violations)
        raise StageError("train", f"constraint violation fraction {frac:.4f} exceeds {limit} ({fams})",
                         EXIT_VIOLATIONS)
    return arts


def _load_barrier(out: Path, stage: str, path: Optional[Path] = None):
    src = _require(path or out / BARRIER, stage, "barrier file")
    try:
        return load_barrier(src)
    except ValueError as e:
        raise StageError(stage, str(e), EXIT_DATA) from e


def do_verify(cfg, env, out: Path):
    bar, consts = _load_barrier(out, "verify")
    try:
        bundle = load_bundle(_require(out / BUNDLE, "verify", "dataset bundle"))
    except ValueError as e:
        raise StageError("verify", str(e), EXIT_DATA) from e
    report = pl.stage_verify(cfg, env, bar, consts, bundle)
    report.save(out / VERIFICATION)
    print(report.table())
    return report, {"verification": VERIFICATION}


def do_evaluate(cfg, env, out: Path, barrier: Optional[Path] = None) -> tuple[pl.Evaluation, dict]:
    bar, consts = _load_barrier(out, "rollout", barrier)
    keep = int(cfg["evaluation"]["save_traces"])
    try:
        ev, traces = pl.stage_evaluate(cfg, env, bar, consts, keep_traces=keep)
    except SimulationDiverged as e:
        e.trace.save(out / "trace_diverged.txt")
        raise StageError("rollout", str(e), EXIT_SIMULATION) from e
    arts = {}
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for i, tr in enumerate(traces):
        name = f"traces/trace_{i:03d}.txt"
        tr.save(out / name)
        arts[f"trace_{i:03d}"] = name
    (out / EVALUATION).write_text(json.dumps(ev.to_dict(), indent=2, sort_keys=True) + "\n")
    arts["evaluation"] = EVALUATION
    print(f"rollout: {ev.successes}/{ev.n} safe (rate {ev.success_rate:.3f})")
    return ev, arts


# ---------------------------------------------------------------------------
# commands


def cmd_collect(args, cfg, env, out):
    return do_collect(cfg, env, out), {}


def cmd_datasets(args, cfg, env, out):
    return do_datasets(cfg, env, out, Path(args.demos) if args.demos else None), {}


def cmd_train(args, cfg, env, out):
    return do_train(cfg, env, out), {}


def cmd_verify(args, cfg, env, out):
    report, arts = do_verify(cfg, env, out)
    if not report.overall:
        raise StageError("verify", "validity conditions not met: " + ", ".join(
            c.name for c in report.conditions if not c.passed), EXIT_VERIFICATION)
    return arts, {}


def cmd_rollout(args, cfg, env, out):
    if args.ce0 is None and args.theta0 is None:
        ev, arts = do_evaluate(cfg, env, out, Path(args.barrier) if args.barrier else None)
        need = cfg["thresholds"]["min_success_rate"]
        if ev.success_rate < need:
            raise StageError("rollout", f"success rate {ev.success_rate:.3f} below {need}", EXIT_EVALUATION)
        return arts, {}
    bar, consts = _load_barrier(out, "rollout", Path(args.barrier) if args.barrier else None)
    ce0 = args.ce0 or 0.0
    th0 = args.theta0 or 0.0
    try:
        if args.controller == "expert":
            tr = pl.expert_trace(cfg, env, ce0, th0, barrier=(bar, consts), seed=cfg["seed"])
        else:
            ctrl = RocbfController(bar, consts, env.sys, env.meas, pl.input_set(env))
            rc = pl._rollout_cfg(cfg, env, ce0=ce0, theta_e0=th0, seed=cfg["seed"])
            tr = pl.rollout(env.track, rc, ctrl, env.sys, env.meas, env.params)
    except SimulationDiverged as e:
        raise StageError("rollout", str(e), EXIT_SIMULATION) from e
    name = f"traces/{args.trace or 'trace.txt'}"
    tr.save(out / name)
    print(json.dumps(tr.summary()))
    return {"trace": name}, {}


def cmd_compare(args, cfg, env, out):
    bar, consts = _load_barrier(out, "compare", Path(args.barrier) if args.barrier else None)
    try:
        rows = pl.stage_compare(cfg, env, bar, consts)
    except SimulationDiverged as e:
        raise StageError("compare", str(e), EXIT_SIMULATION) from e
    save_grid(out / GRID, rows)
    print(f"compare: wrote {len(rows)} rows to {out / GRID}")
    return {"compare_grid": GRID}, {}


def cmd_pipeline(args, cfg, env, out):
    arts = {}
    if args.recollect or not (out / DEMOS).is_file():
        arts.update(do_collect(cfg, env, out))
    else:
        arts["demos"] = DEMOS
    arts.update(do_datasets(cfg, env, out))
    arts.update(do_train(cfg, env, out))
    report, a = do_verify(cfg, env, out)
    arts.update(a)
    if not report.overall:
        failed = ", ".join(c.name for c in report.conditions if not c.passed)
        if cfg["verification"]["require"]:
            raise StageError("verify", f"validity conditions not met: {failed}", EXIT_VERIFICATION)
        log.warning("verify: validity conditions not met (%s); not required by config", failed)
    if not args.skip_rollout:
        ev, a = do_evaluate(cfg, env, out)
        arts.update(a)
        need = cfg["thresholds"]["min_success_rate"]
        if ev.success_rate < need:
            raise StageError("rollout", f"success rate {ev.success_rate:.3f} below {need}", EXIT_EVALUATION)
    if args.compare:
        arts.update(cmd_compare(args, cfg, env, out)[0])
    return arts, {"verification_overall": report.overall}


COMMANDS = {
    "collect": cmd_collect,
    "datasets": cmd_datasets,
    "train": cmd_train,
    "verify": cmd_verify,
    "rollout": cmd_rollout,
    "compare": cmd_compare,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML config file (defaults are built in)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. training.lr=0.01 (repeatable)")
    common.add_argument("--out", "-o", help="output directory (default: config output_dir)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="rocbf", description="Learn, verify and deploy robust output "
                                "control barrier functions on a lane-keeping simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common], help="roll out the expert and write demonstrations")
    s = sub.add_parser("datasets", parents=[common], help="boundary detection, augmentation and buffering")
    s.add_argument("--demos", help="demo file (default: <out>/demos.txt)")
    sub.add_parser("train", parents=[common], help="fit barrier weights on the dataset bundle")
    sub.add_parser("verify", parents=[common], help="check the validity conditions; exit 6 on failure")
    s = sub.add_parser("rollout", parents=[common],
                       help="closed-loop evaluation rollouts, or one rollout with --ce0/--theta0")
    s.add_argument("--barrier", help="barrier file (default: <out>/barrier.txt)")
    s.add_argument("--ce0", type=float, help="initial cross-track error for a single rollout")
    s.add_argument("--theta0", type=float, help="initial heading error for a single rollout")
    s.add_argument("--controller", choices=("rocbf", "expert"), default="rocbf")
    s.add_argument("--trace", help="trace file name under <out>/traces for a single rollout (default: trace.txt)")
    s = sub.add_parser("compare", parents=[common], help="safe controller vs expert over a grid of initial conditions")
    s.add_argument("--barrier", help="barrier file (default: <out>/barrier.txt)")
    s = sub.add_parser("pipeline", parents=[common], help="collect (if needed), datasets, train, verify, rollout")
    s.add_argument("--recollect", action="store_true", help="collect even if demos exist")
    s.add_argument("--skip-rollout", action="store_true", help="stop after verification")
    s.add_argument("--compare", action="store_true", help="also write the comparison grid")
    s.set_defaults(barrier=None)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"rocbf: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command in ("rollout", "pipeline"):
            (out / "traces").mkdir(exist_ok=True)
        dump_config(cfg, out / CONFIG)
    except OSError as e:
        print(f"rocbf: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_DATA
    env = pl.setup(cfg)
    code, status, arts = EXIT_OK, {}, {"config": CONFIG}
    try:
        a, status = COMMANDS[args.command](args, cfg, env, out)
        arts.update(a)
    except StageError as e:
        print(f"rocbf: {e.stage} failed: {e}", file=sys.stderr)
        code, status = e.code, {"failed_stage": e.stage, "message": str(e)}
    except OSError as e:
        print(f"rocbf: {args.command} failed: {e}", file=sys.stderr)
        code, status = EXIT_DATA, {"failed_stage": args.command, "message": str(e)}
    status["exit_code"] = code
    write_manifest(out, cfg, arts, args.command, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
