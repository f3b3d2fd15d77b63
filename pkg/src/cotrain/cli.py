"""Command-line entry point.

Each subcommand runs one pipeline stage against an output directory; the
stage reads the artifacts written by earlier stages. ``run-pipeline`` runs
them all in order.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import harness as H
from . import planner as P

STAGE_COMMANDS = {
    "gen-data": "data",
    "build-ontology": "ontology",
    "expand-plans": "plans",
    "sft": "sft",
    "train": "train",
    "validate": "validate",
    "dpo": "dpo",
    "reprioritize": "reprioritize",
    "eval": "eval",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--stage", help="run-pipeline: stop after this stage")
    common.add_argument("--resume", action="store_true", help="skip stages already completed")
    common.add_argument("--profile", choices=sorted(H.ABLATIONS), help="ablation flag profile")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="cotrain", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if STAGE_COMMANDS[name] in ("train", "validate", "dpo", "reprioritize"):
            p.add_argument("--cycle", type=int, default=1)
    sub.add_parser("run-pipeline", parents=[common])
    p = sub.add_parser("export-rank-table", parents=[common])
    p.add_argument("--checkpoints", nargs="+", type=Path,
                   help="planner checkpoints (default: the run's SFT and DPO checkpoints)")
    p.add_argument("--cycle", type=int, default=1, help="validation cycle supplying the SR column")
    p.add_argument("--csv", type=Path, help="where to write the table")
    sub.add_parser("show-config", parents=[common])
    return ap


def resolve_config(args) -> H.PipelineConfig:
    if args.config is not None:
        cfg = H.load_config(args.config)
    elif (args.out / "config.json").exists():
        cfg = H.load_config(args.out / "config.json")
    else:
        cfg = H.PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.profile:
        cfg = cfg.with_ablation(args.profile)
    return cfg


def _single_stage(cfg: H.PipelineConfig, out: Path, stage: str) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise H.LockedError(f"another process is using {out}") from None
    try:
        run = H.Run(cfg, out)
        H.save_config(run.path("config.json"), cfg)
        return H.run_stage(run, stage)
    finally:
        lock.release()


def _rank_table(cfg: H.PipelineConfig, args) -> H.RankTable:
    run = H.Run(cfg, args.out)
    if args.checkpoints:
        ckpts = [(p.stem, P.load_planner(p)) for p in args.checkpoints]
    else:
        ckpts = [("sft", run.planner(0))] + [
            (f"dpo_c{c}", run.planner(c)) for c in range(1, cfg.cycles + 1)
            if run.path(f"planner_dpo_c{c}.json").exists()]
    table = H.export_rank_table(ckpts, run.pool(args.cycle - 1), run.goal_plans(), run.report(args.cycle))
    table.save_csv(args.csv or run.path("rank_table.csv"))
    return table


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        elif args.command == "run-pipeline":
            done = H.run_pipeline(cfg, args.out, resume=args.resume, stop_after=args.stage)
            print(f"completed {len(done)} stages in {args.out}")
            metrics = args.out / "metrics.json"
            if metrics.exists():
                print(metrics.read_text().rstrip())
        elif args.command == "export-rank-table":
            table = _rank_table(cfg, args)
            for name, rho in table.spearman.items():
                print(f"{name}\tspearman={rho:.4f}")
        else:
            stage = STAGE_COMMANDS[args.command]
            if hasattr(args, "cycle"):
                stage = f"{stage}-c{args.cycle}"
            arts = _single_stage(cfg, args.out, stage)
            print("\n".join(str(args.out / a) for a in arts))
    except (H.StageError, H.LockedError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
