"""Simulation command line.

    replikv-sim run scenario.scn --seed 7 [--trace]
    replikv-sim fuzz scenario.scn --seeds 0..99 [--workers 4] [--shrink]

`run` executes one seed and prints its report; `fuzz` sweeps a seed
range in parallel and reports any failing seeds, optionally shrinking
the first failure's injected events.
"""

from __future__ import annotations

import argparse
import pathlib
import sys
from concurrent.futures import ProcessPoolExecutor

from .scenario import Scenario, parse_scenario
from .shrink import shrink
from .world import World, run_world


def load(path: str) -> Scenario:
    return parse_scenario(pathlib.Path(path).read_text())


def _fuzz_one(args: tuple[str, str]) -> tuple[str, bool, str]:
    path, seed = args
    report = run_world(load(path), seed)
    return seed, report.passed, "" if report.passed else report.text()


def cmd_run(args) -> int:
    sc = load(args.scenario)
    report = run_world(sc, args.seed)
    if args.trace or not report.passed:
        sys.stdout.write(report.text())
    else:
        for key in sorted(report.counters):
            print(f"{key} {report.counters[key]}")
        print("result PASS")
    return 0 if report.passed else 1


def cmd_fuzz(args) -> int:
    lo, _, hi = args.seeds.partition("..")
    seeds = [str(s) for s in range(int(lo), int(hi or lo) + 1)]
    jobs = [(args.scenario, seed) for seed in seeds]
    failures: list[tuple[str, str]] = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_fuzz_one, jobs))
    else:
        results = [_fuzz_one(job) for job in jobs]
    for seed, passed, text in results:
        if not passed:
            failures.append((seed, text))
    print(f"{len(seeds) - len(failures)}/{len(seeds)} seeds passed")
    if not failures:
        return 0
    for seed, text in failures:
        print(f"--- seed {seed}")
        sys.stdout.write(text)
    if args.shrink:
        sc = load(args.scenario)
        seed = failures[0][0]
        events = World(sc, seed).injected
        small = shrink(sc, seed, events)
        print(f"shrunk seed {seed} to {len(small)} injected events:")
        for t, action, eargs in small:
            print(f"  at {t} {action} {eargs}")
    return 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="replikv-sim", description=(
        "deterministic cluster simulation"))
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run one seed")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", default="0")
    p_run.add_argument("--trace", action="store_true",
                       help="print the full event trace")
    p_run.set_defaults(fn=cmd_run)
    p_fuzz = sub.add_parser("fuzz", help="sweep a seed range")
    p_fuzz.add_argument("scenario")
    p_fuzz.add_argument("--seeds", default="0..19",
                        help="inclusive range, e.g. 0..99")
    p_fuzz.add_argument("--workers", type=int, default=1)
    p_fuzz.add_argument("--shrink", action="store_true",
                        help="minimize the first failure's chaos events")
    p_fuzz.set_defaults(fn=cmd_fuzz)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
