"""Abstract graph discovered on NineRooms0 with the room labeler, compared with
the true room adjacency.

    python3 scripts/smdp_discovery.py --out runs/discovery --budget 50000
"""
import argparse
from pathlib import Path

from partition_hrl.compression import ground_truth_labeler
from partition_hrl.envs import make_env
from partition_hrl.manager import ManagerConfig, run_manager


def adjacency(spec):
    free = set(spec.free_cells)
    return {(spec.room_of(x, y), spec.room_of(x + dx, y + dy))
            for x, y in free for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0))
            if (x + dx, y + dy) in free and spec.room_of(x + dx, y + dy) != spec.room_of(x, y)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--env", default="NineRooms0")
    ap.add_argument("--budget", type=int, default=50_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        env = make_env(args.env, seed=seed)
        truth = adjacency(env.spec)
        m = run_manager(env, ground_truth_labeler(env), args.budget, seed, ManagerConfig(learn_options=False))
        m.graph.save(out / f"graph_seed{seed}.txt")
        found = m.graph.edge_set()
        print(f"seed {seed}: {len(m.graph.nodes)} nodes, {len(found & truth)}/{len(truth)} true edges, "
              f"{len(found - truth)} false edges")


if __name__ == "__main__":
    main()
