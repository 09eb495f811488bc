"""Command line entry point.

Subcommands: gen-mazes, train, eval, oracle-eval, trace, selfcheck.
Exit codes: 0 ok, 1 check or run failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import harness, training
from . import numerics as nx
from .config import TrainConfig


def _fail(msg: str, code: int = 2) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _collect_mazes(path: str) -> list[Path]:
    root = Path(path)
    if root.is_file():
        return [root]
    sets = harness.list_maze_set(root)
    return [p for size in sorted(sets) for p in sets[size]]


def _print_stats(stats) -> None:
    print(f"{'size':>6} {'episodes':>9} {'found%':>8} {'steps':>10} {'steps(no rot)':>14}")
    for size in sorted(stats):
        st = stats[size]
        print(f"{size:>6} {st.episodes:>9} {st.targets_found_pct:>8.1f} "
              f"{st.mean_steps:>10.1f} {st.mean_steps_no_rot:>14.1f}")


def cmd_gen_mazes(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    for size in sizes:
        if size % 2 == 0 or not 5 <= size <= 63:
            return _fail(f"maze size must be odd in [5, 63], got {size}")
    written = harness.generate_testset(args.out, sizes, args.count, args.seed or 0)
    print(f"wrote {len(written)} mazes under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)

    def progress(worker, used):
        row = worker.episode_rows[-1] if worker.episode_rows else None
        if row:
            print(f"steps {used:>10}  worker {row[0]}  size {row[1]}  "
                  f"episode {row[2]}  len {row[3]}  success {row[4]}")

    ckpt = training.train(cfg, out, resume_from=args.resume,
                          progress=progress if args.verbose else None)
    _, meta = nx.ParamStore.load(ckpt)
    print(f"checkpoint: {ckpt} (converged={meta.get('converged')}, steps={meta.get('steps')})")
    return 0 if meta.get("converged") or not args.require_converged else 1


def cmd_eval(args, oracle_mode: str | None = None) -> int:
    params, cfg, _ = harness.load_checkpoint(args.checkpoint) if args.checkpoint \
        else (None, _load_config(args), {})
    if params is None:
        if oracle_mode != "both":
            return _fail("--checkpoint is required unless oracle mode is 'both'")
        params = {k: nx.Tensor(v) for k, v in training.init_all_params(cfg).items()}
    mazes = _collect_mazes(args.mazes)
    if not mazes:
        return _fail(f"no .maze files under {args.mazes}")
    policy = "greedy" if args.greedy else args.policy
    if oracle_mode is None:
        stats, rows = harness.evaluate(params, cfg, mazes, cap=args.cap,
                                       seed=args.seed or 0, policy=policy, jobs=args.jobs)
    else:
        stats, rows = harness.oracle_eval(params, cfg, mazes, mode=oracle_mode,
                                          cap=args.cap, seed=args.seed or 0,
                                          policy=policy, jobs=args.jobs)
    _print_stats(stats)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["maze", "size", "success", "steps", "steps_no_rot"])
            writer.writerows(rows)
        print(f"per-episode results: {out}")
    return 0


def cmd_oracle_eval(args) -> int:
    return cmd_eval(args, oracle_mode=args.mode)


def cmd_trace(args) -> int:
    params, cfg, _ = harness.load_checkpoint(args.checkpoint)
    summary = harness.export_trace(params, cfg, args.maze, args.seed or 0, args.out,
                                   cap=args.cap, policy=args.policy)
    print(f"trace: {args.out} success={summary['success']} steps={summary['steps']}")
    return 0


def cmd_selfcheck(args) -> int:
    results = harness.selfcheck(quick=args.quick)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mazenav",
                                     description="Map-reading maze navigation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mazes", help="generate a maze-set directory")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="5,7,9,11,13,15,17,19,21")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_mazes)

    p = sub.add_parser("train", help="run curriculum training")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="train_state.pkl from a previous single-worker run")
    p.add_argument("--require-converged", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("oracle-eval", cmd_oracle_eval)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a maze set")
        p.add_argument("--checkpoint")
        p.add_argument("--mazes", required=True)
        p.add_argument("--cap", type=int, default=4500)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--policy", choices=("sample", "greedy", "scripted"),
                       default="sample")
        p.add_argument("--greedy", action="store_true", help="shorthand for --policy greedy")
        p.add_argument("--jobs", type=int, default=4)
        p.add_argument("--out", help="write per-episode CSV here")
        if name == "oracle-eval":
            p.add_argument("--mode", choices=("perfect_position", "perfect_sttd", "both"),
                           default="both")
        p.set_defaults(func=fn)

    p = sub.add_parser("trace", help="export a per-step episode trace (JSON lines)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maze", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=4500)
    p.add_argument("--policy", choices=("sample", "greedy", "scripted"), default="sample")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("selfcheck", help="gradient/planner/localization self tests")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
