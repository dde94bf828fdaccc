"""Run the full desk experiment and print its headline numbers.

    python scripts/run_desk.py runs/desk [--set key=value ...]

Stages already on disk are skipped, so the command can be re-issued after
an interruption.  Results land in <root>/summary.json.
"""

import argparse
import json
import logging

from cnpoison.harness import desk


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--sweeps", default=",".join(desk.SWEEP_AXES), help="comma-separated sweep axes")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    sweeps = tuple(a for a in args.sweeps.split(",") if a)
    s = desk.run_desk(args.root, args.set, sweeps)
    for name in ("p05", "p01", "clean"):
        print(name, json.dumps(s[name], sort_keys=True))
    for axis, rows in s["sweeps"].items():
        print(axis, " ".join(f"{r['value']:g}:{r['asr']:.2f}" for r in rows))
    print(f"end-to-end (5% branch): {s['end_to_end_seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
