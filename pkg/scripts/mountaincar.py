"""Compression of MountainCar into 20 abstract states plus a partition image.

    python3 scripts/mountaincar.py --out runs/mountaincar
"""
import argparse

from partition_hrl.harness import make_config, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    print(run_experiment(make_config("mountaincar", seeds=tuple(args.seeds)), args.out))


if __name__ == "__main__":
    main()
