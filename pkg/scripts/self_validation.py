"""Run one sweep twice and test whether the two runs differ (Welch's t-test per metric)."""

import argparse
from pathlib import Path

from tailharness import runner, stats
from tailharness.scenario import parse_sweep

SCEN = Path(__file__).resolve().parent.parent / "scenarios"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sweep", default=str(SCEN / "selfcheck.sweep"))
    ap.add_argument("--out", default="results/selfcheck")
    ap.add_argument("--repetitions", type=int)
    args = ap.parse_args()
    sweep = parse_sweep(args.sweep)
    if args.repetitions:
        sweep.repetitions = args.repetitions
    out = Path(args.out)
    a = runner.run_sweep(sweep, out / "a", seed=0)
    b = runner.run_sweep(sweep, out / "b", seed=7)
    results = runner.compare_runs(a, b)
    print(runner.format_ttest_table(results))
    stats.write_ttest_csv(out / "ttest.csv", results)


if __name__ == "__main__":
    main()
