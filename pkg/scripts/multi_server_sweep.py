"""Sweep one vs two single-worker servers over the same QPS grid and tabulate p99."""

import argparse
from pathlib import Path

from tailharness import runner
from tailharness.scenario import parse_sweep

SCEN = Path(__file__).resolve().parent.parent / "scenarios"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/multi")
    ap.add_argument("--repetitions", type=int)
    args = ap.parse_args()
    curves = {}
    for label in ("1server", "2server"):
        sweep = parse_sweep(SCEN / f"sweep_{label}.sweep")
        if args.repetitions:
            sweep.repetitions = args.repetitions
        rp = runner.run_sweep(sweep, Path(args.out) / label)
        curves[label] = {m: rp.curve(m) for m in runner.METRICS}
    print("qps/client  metric   1 server   2 servers   (ms)")
    for q in sorted(curves["1server"]["p99"]):
        for m in runner.METRICS:
            print(f"{q:10g}  {m:6s} {curves['1server'][m][q]:10.3f} {curves['2server'][m][q]:11.3f}")


if __name__ == "__main__":
    main()
