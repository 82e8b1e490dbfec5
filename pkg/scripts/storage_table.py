"""Chain growth for a range of user counts and block intervals, as CSV."""

import argparse
import csv
import sys

from covichain.bench import StorageModel, estimate_storage, measured_tx_sizes


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--users", type=int, nargs="+", default=[10**5, 10**6, 10**7])
    p.add_argument("--intervals", type=float, nargs="+", default=[15, 600])
    p.add_argument("--own-encoding", action="store_true",
                   help="use this package's measured transaction sizes instead of the defaults")
    args = p.parse_args(argv)

    sizes = {}
    if args.own_encoding:
        m = measured_tx_sizes()
        sizes = {k: m[k] for k in ("empty_block_bytes", "iris_tx_bytes", "record_tx_bytes")}

    writer = csv.writer(sys.stdout)
    writer.writerow(["num_users", "block_interval_s", "blocks_per_day", "baseline_GB_per_year",
                     "users_GB", "total_GB"])
    for interval in args.intervals:
        for users in args.users:
            est = estimate_storage(StorageModel(num_users=users, block_interval_s=interval, **sizes))
            writer.writerow([users, interval, est["blocks_per_day"],
                             f"{est['baseline_bytes_per_year'] / 1e9:.5f}",
                             f"{est['user_bytes'] / 1e9:.5f}", f"{est['total_year_bytes'] / 1e9:.5f}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
