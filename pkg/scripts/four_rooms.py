"""HRL, HRL with transferred options, and flat DQN-PER on the 9x9 four-rooms task.

Runs the whole pipeline through the harness (pretrain, compress, hrl, transfer,
baseline) and aggregates the per-seed reward curves.

    python3 scripts/four_rooms.py --out runs/four_rooms --budget 30000 --seeds 0 1 2
"""
import argparse
import json
from pathlib import Path

from partition_hrl.harness import make_config, read_csv, run_experiment


def first_success(path):
    header, rows = read_csv(path)
    r, t, e = header.index("reward"), header.index("total_steps"), header.index("episode")
    for row in rows:
        if float(row[r]) > 0:
            return int(row[t]), int(row[e]) + 1
    return None, None


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--budget", type=int, default=30_000)
    ap.add_argument("--pretrain-budget", type=int, default=30_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    out = Path(args.out)
    common = {"seeds": tuple(args.seeds), "compression.n_abstract": 4}
    for phase in ("pretrain", "compress"):
        run_experiment(make_config(env="FourRooms0", phase=phase, **common), out)
    task = dict(common, env="FourRooms", budget=args.budget, pretrain_env="FourRooms0",
                pretrain_budget=args.pretrain_budget)
    for phase in ("hrl", "transfer", "baseline"):
        run_experiment(make_config(phase=phase, **task), out)
    summary = {}
    for stem in ("hrl", "transfer", "baseline"):
        files = [str(out / f"{stem}_seed{s}.csv") for s in args.seeds]
        run_experiment(make_config(phase="aggregate", **common), out / f"curve_{stem}", files)
        summary[stem] = {s: first_success(f) for s, f in zip(args.seeds, files)}
    (out / "first_success.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
