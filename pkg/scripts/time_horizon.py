"""Train the overfit set at several integration horizons T and print a comparison table."""

import argparse
import json
import logging

from cdrode import experiments as ex
from cdrode.ode import SolverConfig
from cdrode.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", type=float, nargs="+", default=[10.0, 50.0, 200.0])
    ap.add_argument("--steps", type=int, default=40, help="fixed Heun steps per solve")
    ap.add_argument("--max-steps", type=int, default=300, help="optimizer step budget per horizon")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional JSON path for the per-horizon records")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("cdrode.training").setLevel(logging.WARNING)

    graphs = ex.overfit_graphs()
    base = TrainConfig(seed=args.seed, batch_size=len(graphs), solver=SolverConfig(steps=args.steps))
    records = ex.horizon_sweep(graphs, args.horizons, base, max_steps=args.max_steps)
    print(ex.sweep_table(records))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump([r.__dict__ for r in records], f, indent=1)


if __name__ == "__main__":
    main()
