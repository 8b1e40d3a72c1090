"""Fill the results/ cache for the acceptance checks.

Usage: python3 scripts/run_suites.py [suite ...] [--hstar]

Suites run one cell at a time (a reversal run peaks near 2.5 GB); cells
already on disk are skipped, so the script can be restarted freely.
"""

import argparse
import logging

from frictionlab import suites


def main():
    p = argparse.ArgumentParser()
    p.add_argument("suites", nargs="*", default=list(suites.SUITES))
    p.add_argument("--hstar", action="store_true", help="also run the H* search")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.suites:
        for cell in suites.SUITES[name]():
            suites.run_cell(cell)
    if args.hstar:
        for m in suites.METHODS:
            for s in range(3):
                res = suites.run_hstar(m, s)
                logging.info("H* %s seed %d = %d", m, s, res.per_seed[s])


if __name__ == "__main__":
    main()
