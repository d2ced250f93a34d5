"""Write the bundled toy corpus: 5 synthetic antibody-antigen structures plus task files."""

import argparse
import json
from pathlib import Path

import numpy as np

from cdrode import data_io, synthetic

HEAVY_LEN = 30
CDR_START = 10  # 0-based index of the first CDR residue
CDR_LEN = 8
ANTIGEN_LEN = 6


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "corpus"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    tasks = []
    for k in range(5):
        hs, h, ags, ag = synthetic.toy_complex(rng, HEAVY_LEN, CDR_START, CDR_LEN, ANTIGEN_LEN)
        name = f"toy{k + 1}"
        data_io.write_pdb(out / f"{name}.pdb", {"H": (hs, h), "A": (ags, ag)})
        task = {
            "name": name,
            "structure": f"{name}.pdb",
            "antibody_chain": "H",
            "cdr_range": [CDR_START + 1, CDR_START + CDR_LEN],
            "antigen_chains": ["A"],
            "mode": "conditional",
        }
        (out / f"{name}.task.json").write_text(json.dumps(task, indent=1) + "\n", encoding="utf-8")
        tasks.append(task)
    (out / "tasks.json").write_text(json.dumps(tasks, indent=1) + "\n", encoding="utf-8")
    run = {"seed": 0, "epochs": 20, "batch_size": 5, "checkpoint_every": 0}
    (out / "run.json").write_text(json.dumps(run, indent=1) + "\n", encoding="utf-8")
    print(f"wrote corpus to {out}")


if __name__ == "__main__":
    main()
