"""Desk-scale harnesses: the five-complex overfit run and the time-horizon sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph as gr
from . import metrics, synthetic
from .ode import SolverConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

OVERFIT_CDR_LEN = 8
OVERFIT_ANTIGEN_LEN = 6


def overfit_graphs(n: int = 5, seed: int = 7, cdr_len: int = OVERFIT_CDR_LEN, antigen_len: int = OVERFIT_ANTIGEN_LEN) -> list:
    """Conditional graphs for ``n`` synthetic complexes (the same generator as the bundled corpus)."""
    rng = np.random.default_rng(seed)
    start = 10
    out = []
    for _ in range(n):
        hs, h, ags, ag = synthetic.toy_complex(rng, 30, start, cdr_len, antigen_len)
        anchors = gr.Anchors(h[start - 3 : start].copy(), h[start + cdr_len].copy())
        out.append(
            gr.build_graph(
                cdr_len,
                ags,
                ag,
                anchors,
                positions=np.arange(start, start + cdr_len),
                labels=hs[start : start + cdr_len],
                true_coords=h[start : start + cdr_len],
            )
        )
    return out


def training_fit(graphs, params, solver: SolverConfig) -> tuple[float, float]:
    """(AAR in %, worst Cα RMSD in Å) of the decoded designs against the training truth."""
    designs = metrics.generate_many(graphs, params, solver)
    aars = [metrics.aar(d.sequence, "".join(gr.ALPHABET[i] for i in g.labels)) for d, g in zip(designs, graphs)]
    rms = [metrics.rmsd_eval(d.coords, g.true_coords) for d, g in zip(designs, graphs)]
    return float(np.mean(aars)), float(np.max(rms))


@dataclass
class FitRecord:
    t_end: float
    steps_taken: int = 0
    seconds: float = 0.0
    aar: float = 0.0
    rmsd: float = float("inf")
    final_loss: float = float("nan")
    reached: bool = False
    trace: list = field(default_factory=list)  # (optimizer steps, aar, rmsd)

    def row(self) -> str:
        return (
            f"{self.t_end:>7g} {self.steps_taken:>6d} {self.seconds:>8.1f} "
            f"{self.aar:>7.1f} {self.rmsd:>8.3f} {self.final_loss:>10.4f} {'yes' if self.reached else 'no':>7s}"
        )


TABLE_HEADER = f"{'T':>7s} {'steps':>6s} {'secs':>8s} {'AAR%':>7s} {'RMSD':>8s} {'loss':>10s} {'target':>7s}"


def overfit(
    graphs,
    config: TrainConfig | None = None,
    max_steps: int = 2000,
    eval_every: int = 10,
    aar_target: float = 100.0,
    rmsd_target: float = 0.5,
) -> tuple:
    """Train until the decoded training set hits both targets or ``max_steps`` optimizer steps pass.

    Returns (params, history, FitRecord).
    """
    cfg = config or TrainConfig(batch_size=len(graphs))
    per_epoch = -(-len(graphs) // cfg.batch_size)
    cfg = replace(cfg, epochs=-(-max_steps // per_epoch))
    rec = FitRecord(cfg.solver.t_end)
    start = time.perf_counter()

    def callback(epoch, params, history):
        rec.steps_taken = epoch * per_epoch
        rec.final_loss = history.epochs[-1]["total"]
        if not np.isfinite(rec.final_loss):
            return True
        if epoch % eval_every and rec.steps_taken < max_steps:
            return False
        rec.aar, rec.rmsd = training_fit(graphs, params, cfg.solver)
        rec.trace.append((rec.steps_taken, rec.aar, rec.rmsd))
        log.info("T=%g step %d aar %.1f rmsd %.3f", cfg.solver.t_end, rec.steps_taken, rec.aar, rec.rmsd)
        rec.reached = rec.aar >= aar_target and rec.rmsd < rmsd_target
        return rec.reached or rec.steps_taken >= max_steps

    params, history = train(graphs, cfg, callback=callback)
    rec.seconds = time.perf_counter() - start
    return params, history, rec


def horizon_sweep(graphs, horizons=(10.0, 50.0, 200.0), base: TrainConfig | None = None, max_steps: int = 2000, **kw) -> list:
    """One overfit run per integration horizon T, other settings held fixed."""
    base = base or TrainConfig(batch_size=len(graphs))
    records = []
    for T in horizons:
        cfg = replace(base, solver=replace(base.solver, t_end=float(T)))
        _, _, rec = overfit(graphs, cfg, max_steps=max_steps, **kw)
        records.append(rec)
    return records


def sweep_table(records) -> str:
    return "\n".join([TABLE_HEADER, "-" * len(TABLE_HEADER)] + [r.row() for r in records])
