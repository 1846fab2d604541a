"""Run the three case-study scenarios and print the numbers behind each figure.

    python scripts/case_studies.py --out results/cases
"""

import argparse
import dataclasses
from pathlib import Path

from tailharness import runner, stats
from tailharness.scenario import parse_scenario

SCEN = Path(__file__).resolve().parent.parent / "scenarios"


def windowed_p99(rp, client, width=1.0):
    samples = rp.samples(client)
    return [(lo, s.p99_ms if s else None) for lo, _, s in stats.windows(samples, width)]


def case1(out: Path) -> None:
    rp = runner.run_scenario(parse_scenario(SCEN / "case1.scenario"), out / "case1")
    print(f"case1: {rp.status}")
    for n in ("c1", "c2", "c3"):
        print(f"  {n}: lifetime {rp.lifetime_s(n):.2f} s")
    solo1 = stats.summarize(rp.samples("c1"), (0, 15))
    solo3 = stats.summarize(rp.samples("c3"), (50, 60))
    print(f"  solo-phase p99: client 1 {solo1.p99_ms:.3f} ms, client 3 {solo3.p99_ms:.3f} ms")


def case2(out: Path, name: str) -> None:
    rp = runner.run_scenario(parse_scenario(SCEN / f"{name}.scenario"), out / name)
    print(f"{name}: {rp.status}")
    for lo in range(0, 60, 10):
        s = stats.summarize(rp.samples(), (lo, lo + 10))
        print(f"  [{lo:2d},{lo + 10:2d}) s  n={s.n:5d}  mean {s.mean_ms:7.3f}  p99 {s.p99_ms:7.3f} ms")


def case3(out: Path) -> None:
    base = parse_scenario(SCEN / "case3.scenario")
    for policy in ("round_robin", "load_aware"):
        spec = dataclasses.replace(base, balancer=dataclasses.replace(base.balancer, policy=policy))
        rp = runner.run_scenario(spec, out / f"case3-{policy}")
        print(f"case3 {policy}: {rp.status}")
        for n in ("c1", "c2", "c3"):
            samples = rp.samples(n)
            s = stats.summarize(samples)
            where = sorted({x.server_id for x in samples})
            print(f"  {n}: server {where}  mean {s.mean_ms:.2f}  p99 {s.p99_ms:.2f} ms")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/cases")
    ap.add_argument("--only", choices=("case1", "case2", "case2_light", "case3"))
    args = ap.parse_args()
    out = Path(args.out)
    jobs = {"case1": lambda: case1(out), "case2": lambda: case2(out, "case2"),
            "case2_light": lambda: case2(out, "case2_light"), "case3": lambda: case3(out)}
    for name, job in jobs.items():
        if args.only in (None, name):
            job()


if __name__ == "__main__":
    main()
