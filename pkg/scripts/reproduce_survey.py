"""Probe the synthetic survey fleet and print the support table.

    python scripts/reproduce_survey.py --workers 4 --out survey.json
"""
import argparse
import logging
from pathlib import Path

from holepunch.report import aggregate, render_report, sweep, survey_fleet


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", type=Path, help="also write the JSON report here")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    fleet = survey_fleet()
    logging.info("probing %d NATs in %d groups", fleet.size, len(fleet.entries))
    text, doc = render_report(aggregate(sweep(fleet, seed=args.seed, workers=args.workers)))
    print(text, end="")
    if args.out:
        args.out.write_text(doc)


if __name__ == "__main__":
    main()
