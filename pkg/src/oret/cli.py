"""Command-line entry point: ``oret {train,eval,gradcheck,oracle,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunConfig, preset

log = logging.getLogger("oret")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _apply_threads() -> None:
    n = os.environ.get("OMNIRET_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"OMNIRET_THREADS must be an integer, got {n!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat dotted-key JSON config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oret", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-stage schedule")
    _common(p)

    p = sub.add_parser("eval", help="Recall@k report from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="defaults to OUT/final.ckpt")
    p.add_argument("--k", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference suite")
    _common(p)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("oracle", help="sort-matching vs brute-force assignment")
    _common(p)
    p.add_argument("--s-max", type=int, default=7)
    p.add_argument("--trials", type=int, default=500)

    p = sub.add_parser("ablate", help="desk-scale ablation matrix")
    _common(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per variant")
    p.add_argument("--variants", nargs="+", help="subset of variants to run")
    p.add_argument("--k", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config is not None:
        cfg = RunConfig.load(args.config, base=cfg)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    if getattr(args, "k", None) is not None:
        over["train.eval_k"] = args.k
    return cfg.replace(**over) if over else cfg


def cmd_train(args) -> int:
    from .bench.train import train_run

    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.jsonl").unlink(missing_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=1, sort_keys=True))
    result = train_run(cfg, out)
    for task, r in result.recalls.items():
        print(f"{task}\trecall@{cfg.train.eval_k}\t{r:.4f}")
    print(f"checkpoint\t{out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench.data import TASKS
    from .bench.train import Bench, load_model

    path = args.checkpoint
    if path is None:
        base = args.out if args.out is not None else Path(resolve_config(args).out)
        path = Path(base) / "final.ckpt"
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = read_checkpoint(path)
    cfg = RunConfig.from_json(ckpt.config_json)
    if args.k is not None:
        cfg = cfg.replace(**{"train.eval_k": args.k})
    _, model = load_model(ckpt, cfg)
    model.eval()
    bench = Bench(cfg, model)
    for name in cfg.train.eval_tasks:
        print(f"{name}\trecall@{cfg.train.eval_k}\t{bench.evaluate(TASKS[name]):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed, repeats=args.repeats)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}\t{r.name}\t{r.error:.3e}\t(tol {r.tol:.0e})")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def cmd_oracle(args) -> int:
    from .oracle import monge_sweep

    if not 2 <= args.s_max <= 8:
        raise UsageError("--s-max must lie in [2, 8]")
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    seed = args.seed if args.seed is not None else 0
    rows = monge_sweep(args.s_max, args.trials, seed)
    for r in rows:
        print(f"S={r.size}\t{r.exact}/{r.trials} exact\tmax gap {r.worst_gap:.1e}")
    total = sum(r.exact for r in rows)
    count = sum(r.trials for r in rows)
    print(f"total\t{total}/{count} exact")
    return EXIT_OK if total == count else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .bench.ablate import VARIANTS, format_table, run_matrix

    cfg = resolve_config(args)
    names = args.variants or list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; known: {list(VARIANTS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    out = Path(cfg.out)
    summary = run_matrix(cfg, names, [cfg.seed + i for i in range(args.seeds)], out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(summary, indent=1))
    print(format_table(summary))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        _apply_threads()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"oret {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"oret {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
