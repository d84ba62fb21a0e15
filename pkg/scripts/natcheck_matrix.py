"""Run the NAT probe against every behavioral config and compare with ground truth.

Prints one line per config that disagrees, then a summary.
"""
import argparse
import time

from holepunch.natbox import NatConfig
from holepunch.natcheck import config_grid, expected_profile, mismatches, run_natcheck
from holepunch.scenario import build, natcheck_bed


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    start = time.perf_counter()
    grid = config_grid()
    bad = 0
    for config in grid:
        doc = natcheck_bed(config, seed=args.seed)
        expected = expected_profile(NatConfig.from_dict(doc["nats"][0]["config"]))
        diff = mismatches(run_natcheck(build(doc)), expected)
        if diff:
            bad += 1
            print(config, diff)
    print(f"{len(grid)} configs, {bad} mismatches, {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
