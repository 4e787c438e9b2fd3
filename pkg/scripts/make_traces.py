"""Write synthetic one-minute price traces for every catalog instance as raw csv."""

import argparse
from pathlib import Path

import numpy as np

from spottune.market import CATALOG, synthetic_trace, write_traces

START = 1493164800  # 2017-04-26 00:00 UTC


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--days", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--instances", nargs="*", default=sorted(CATALOG))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(args.instances):
        rng = np.random.default_rng([args.seed, i])
        tr = synthetic_trace(CATALOG[name], START, int(args.days * 86400), rng)
        write_traces([tr], args.out / f"{name}.csv")
        print(f"{name}: {len(tr)} points, mean {tr.prices.mean():.4f}")


if __name__ == "__main__":
    main()
