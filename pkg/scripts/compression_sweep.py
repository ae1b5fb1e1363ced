"""Partition error of the learned compression function against replay size.

    python3 scripts/compression_sweep.py --out runs/sweep --sizes 50 200 1000 --seeds 0 1 2
"""
import argparse

from partition_hrl.harness import make_config, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--env", default="NineRooms0")
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 500, 1000])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-abstract", type=int, default=9)
    ap.add_argument("--iters", type=int, default=4000)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    cfg = make_config(env=args.env, phase="sweep", seeds=tuple(args.seeds), sweep_sizes=tuple(args.sizes),
                      **{"compression.n_abstract": args.n_abstract, "compression.iters": args.iters})
    print(run_experiment(cfg, args.out))


if __name__ == "__main__":
    main()
