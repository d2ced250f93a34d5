"""Overfit five synthetic complexes and report training AAR / worst CA RMSD over time."""

import argparse
import json
import logging

from cdrode import experiments as ex
from cdrode.ode import SolverConfig
from cdrode.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t-end", type=float, default=200.0)
    ap.add_argument("--steps", type=int, default=40, help="fixed Heun steps per solve")
    ap.add_argument("--max-steps", type=int, default=2000, help="optimizer step budget")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=10)
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("cdrode.training").setLevel(logging.WARNING)

    graphs = ex.overfit_graphs()
    cfg = TrainConfig(seed=args.seed, lr=args.lr, batch_size=len(graphs), solver=SolverConfig(t_end=args.t_end, steps=args.steps))
    _, history, rec = ex.overfit(graphs, cfg, max_steps=args.max_steps, eval_every=args.eval_every)
    print(ex.sweep_table([rec]))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"record": rec.__dict__, "history": history.to_dict()}, f, indent=1)


if __name__ == "__main__":
    main()
