"""Command-line entry point: ``fedgen {gen-envs,train,eval,sweep-learners,verify}``.

Exit codes: 0 success, 1 run error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from fedgen import rng as rngmod
from fedgen.config import PRESETS, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERIFY = 2

logger = logging.getLogger("fedgen")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=PRESETS, help="built-in configuration to start from")
    p.add_argument("--config", type=Path, help="INI file applied after the preset")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _resolve(args):
    overrides = list(args.overrides)
    if getattr(args, "resample_each_round", False):
        overrides.append("motion.resample_each_round=true")
    if getattr(args, "seed", None) is not None and args.command == "train":
        overrides.append(f"run.seed={args.seed}")
    return load_config(args.preset, args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-envs", help="write a corpus of random environments")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument(
        "--purpose",
        choices=("train", "eval"),
        default="train",
        help="random stream the corpus is drawn from; train and eval streams never overlap",
    )
    _config_args(p)

    p = sub.add_parser("train", help="run the federated training loop")
    p.add_argument("--out", type=Path, help="run directory (default: run.out from the config)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=...")
    p.add_argument("--resample-each-round", action="store_true", help="redraw training environments every round")
    p.add_argument(
        "--sigma-probe-repeats",
        type=int,
        default=0,
        help="estimate gradient noise at the initial parameters with this many samples and check q and r",
    )
    _config_args(p)

    p = sub.add_parser("eval", help="evaluate policy checkpoints on unseen environments")
    p.add_argument("checkpoints", nargs="+", type=Path)
    p.add_argument("--M", type=int, help="number of evaluation environments")
    p.add_argument("--seed", type=int, help="evaluation seed (default run.eval_seed)")
    p.add_argument("--corpus", type=Path, help="evaluate on a stored corpus instead of fresh draws")
    p.add_argument("--out", type=Path, help="directory for eval.csv and eval_episodes.csv")
    _config_args(p)

    p = sub.add_parser("sweep-learners", help="train and evaluate for several learner counts")
    p.add_argument("--counts", default="1,4", help="comma-separated learner counts")
    p.add_argument("--blocks", type=int, default=1, help="seed blocks per count")
    p.add_argument("--out", type=Path, help="output directory for sweep.csv and per-block runs")
    _config_args(p)

    p = sub.add_parser("verify", help="run a fixed-seed property suite")
    p.add_argument("suite", choices=("bounds", "optimizer", "nes", "sensor", "all"))
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_envs(args) -> int:
    from fedgen.envgen import generate_environments, write_corpus

    cfg = _resolve(args)
    domain = rngmod.TRAIN_ENVS if args.purpose == "train" else rngmod.EVAL_ENVS
    # key (seed, domain, 9, l) is not used by any training learner or eval draw
    envs = generate_environments(args.count, args.seed, domain, 9, disturbance=cfg.disturbance)
    paths = write_corpus(args.out, envs)
    print(f"wrote {len(paths)} environments to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from fedgen.harness import cmd_train as train

    cfg = _resolve(args)
    out = args.out or Path(cfg.run.out)
    t0 = time.perf_counter()
    tr = train(cfg, out, sigma_probe_repeats=args.sigma_probe_repeats)
    res = tr.result
    print(f"trained {cfg.run.learners} learner(s) for {cfg.run.rounds} rounds in {time.perf_counter() - t0:.1f}s")
    print(f"all stopped since round: {res.converged_at}")
    for st in res.learners:
        final = tr.snapshots[(st.id, "final")].y
        print(f"  learner {st.id}: first stop {st.k_fs}, adoptions {st.adopt_events}, final y {final:.4f}")
    for w in tr.warnings:
        print(f"warning: {w}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from fedgen.envgen import read_corpus
    from fedgen.harness import build_eval_set, cmd_eval as evaluate

    cfg = _resolve(args)
    M = args.M or cfg.run.eval_size
    seed = cfg.run.eval_seed if args.seed is None else args.seed
    corpus = read_corpus(args.corpus) if args.corpus else None
    eval_set = build_eval_set(M, seed, cfg, corpus)
    reports = evaluate(args.checkpoints, cfg, M, seed, args.out, eval_set)
    print(f"{'label':<24}{'mean_J':>9}{'rate':>8}{'±':>7}{'cost_ub':>9}{'arr_lb':>9}")
    for r in reports:
        print(f"{r.label:<24}{r.mean_J:9.4f}{r.rate:8.4f}{r.rate_ci:7.4f}{r.cost_upper:9.4f}{r.arrival_lower:9.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from fedgen.harness import SWEEP_COLUMNS, cmd_sweep_learners

    cfg = _resolve(args)
    counts = [int(c) for c in args.counts.split(",") if c.strip()]

    def progress(blk):
        rates = ", ".join(f"{r.rate:.3f}" for r in blk.phase("final"))
        print(f"|V|={blk.learners} block {blk.block}: final rates {rates}", flush=True)

    rows, _ = cmd_sweep_learners(cfg, counts, args.blocks, args.out, on_block=progress)
    print(",".join(SWEEP_COLUMNS))
    for row in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    return EXIT_OK


def cmd_verify(args) -> int:
    from fedgen.checks import SUITES, run_suite

    suites = sorted(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in suites:
        for res in run_suite(name, args.seed):
            print(res.line())
            for failure in res.failures:
                print(f"    {failure}")
            ok &= res.passed
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "gen-envs": cmd_gen_envs,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-learners": cmd_sweep,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # report and map to the run-error exit code
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
