"""Command-line entry point: featurize, train, generate, evaluate.

Exit codes: 0 success, 1 fatal error, 2 partial success (featurize only).
Logs go to standard error; data goes to files and standard output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("cdrode")


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# run config


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in fields(cls)}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path=None, overrides: dict | None = None):
    """TrainConfig from a JSON document with optional ``solver``/``loss``/``model`` sections.

    Unknown keys at any level are rejected before anything runs.
    """
    from .dynamics import ModelConfig
    from .objectives import LossConfig
    from .ode import SolverConfig
    from .training import TrainConfig, TrainingError

    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    top = {f.name for f in fields(TrainConfig)}
    extra = set(raw) - top
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    solver = _section(SolverConfig, raw.pop("solver", None), "solver")
    loss = _section(LossConfig, raw.pop("loss", None), "loss")
    model = _section(ModelConfig, raw.pop("model", None), "model")
    try:
        return TrainConfig(**raw, solver=solver, loss=loss, model=model)
    except (TypeError, ValueError, TrainingError) as exc:
        raise ConfigError(str(exc)) from None


def train_config_from_dict(d: dict):
    from .dynamics import ModelConfig
    from .objectives import LossConfig
    from .ode import SolverConfig
    from .training import TrainConfig

    d = dict(d)
    return TrainConfig(
        **{k: v for k, v in d.items() if k not in ("solver", "loss", "model")},
        solver=SolverConfig(**d["solver"]),
        loss=LossConfig(**d["loss"]),
        model=ModelConfig(**d["model"]),
    )


# ----------------------------------------------------------------------------
# commands


def cmd_featurize(args) -> int:
    from . import data_io

    try:
        tasks = data_io.load_tasks(args.task)
    except data_io.DataError as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    if args.pdb is not None:
        for t in tasks:
            t.structure = str(args.pdb)
    ok, failed = [], []
    for t in tasks:
        try:
            chains = data_io.parse_structure(t.structure)
            cx = data_io.extract_complex(chains, t)
        except data_io.DataError as exc:
            failed.append((t, str(exc)))
            log.error("task %s: %s", t.name or t.structure, exc)
            continue
        ok.append(cx)
        print(
            f"{cx.name}\tantibody={t.antibody_chain}\tantigen={','.join(t.antigen_chains) or '-'}"
            f"\tcdr_len={len(cx.cdr_sequence)}\tantigen_size={len(cx.antigen_sequence)}"
        )
    if not ok:
        return EXIT_FATAL
    data_io.append_dataset(args.out, ok) if args.append else data_io.write_dataset(args.out, ok)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_train(args) -> int:
    from . import data_io
    from .training import TrainingError, train

    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "mode": args.mode,
        "mask_antigen": args.mask_antigen,
        "batch_size": args.batch_size,
        "framework_conditioning": None if args.framework_conditioning is None else args.framework_conditioning == "on",
    }
    try:
        cfg = load_run_config(args.config, overrides)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_FATAL
    try:
        data = data_io.read_dataset(args.data)
    except (OSError, data_io.DataError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    out = Path(args.out)
    header = {"train": cfg.to_dict(), "seed": cfg.seed}

    def checkpoint(epoch, params):
        data_io.save_model(out.with_name(f"{out.stem}.epoch{epoch}{out.suffix}"), params, header)

    try:
        params, history = train(data, cfg, checkpoint=checkpoint)
    except (TrainingError, ValueError, FloatingPointError) as exc:
        log.error("training failed: %s", exc)
        return EXIT_FATAL
    data_io.save_model(out, params, header)
    hist_path = history_path(out)
    hist_path.write_text(json.dumps(history.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %s and %s (%.1fs total)", out, hist_path, sum(history.wall_clock))
    return EXIT_OK


def history_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".history.json")


def cmd_generate(args) -> int:
    from . import data_io, metrics
    from .ode import SolverConfig
    from .training import TrainingError, build_training_graph

    try:
        params, header = data_io.load_model(args.model)
        data = data_io.read_dataset(args.data)
    except (OSError, data_io.DataError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    train_cfg = train_config_from_dict(header["train"]) if "train" in header else None
    mode = args.mode or (train_cfg.mode if train_cfg else "conditional")
    solver = train_cfg.solver if train_cfg else SolverConfig()
    if args.method is not None:
        solver = SolverConfig(**{**solver.to_dict(), "method": args.method})
    framework = params.config.framework_conditioning
    lines = []
    for cx in data:
        try:
            g = build_training_graph(cx, mode, framework, params.config.knn)
            res = metrics.generate(g, params, solver)
        except (TrainingError, ValueError, FloatingPointError, RuntimeError) as exc:
            log.error("sample %s: %s", cx.name, exc)
            return EXIT_FATAL
        lines.append(json.dumps({"name": cx.name, **res.to_json()}, separators=(",", ":")))
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return EXIT_OK


def _read_designs(path):
    from .metrics import DesignResult

    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
                out.append((d.get("name", str(lineno)), DesignResult.from_json(d)))
    return out


def cmd_evaluate(args) -> int:
    from . import data_io, metrics

    try:
        designs = _read_designs(args.pred)
        truth = data_io.read_dataset(args.truth)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    if len(designs) != len(truth):
        log.error("%d predictions for %d reference samples", len(designs), len(truth))
        return EXIT_FATAL
    refs = []
    for (name, d), cx in zip(designs, truth):
        seq, xyz = cx.cdr_sequence, cx.cdr_coords
        if len(d.sequence) == len(cx.chain_sequence) and len(d.sequence) != len(seq) and cx.mode == "fixed_backbone":
            seq, xyz = cx.chain_sequence, cx.chain_coords
        if len(d.sequence) != len(seq):
            log.error("sample %s: predicted length %d but reference has %d", name, len(d.sequence), len(seq))
            return EXIT_FATAL
        refs.append((seq, xyz))
    try:
        report = metrics.evaluate([d for _, d in designs], refs)
    except metrics.MetricError as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdrode", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads (fallback: ABODE_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("featurize", help="parse structures and extract complexes into a JSON-Lines dataset")
    f.add_argument("--task", required=True, help="task JSON (one object or a list)")
    f.add_argument("--pdb", default=None, help="structure file overriding the task's path")
    f.add_argument("--out", required=True, help="output dataset (.jsonl)")
    f.add_argument("--append", action="store_true", help="append to an existing dataset")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train the vector field")
    t.add_argument("--data", required=True, help="featurized dataset (.jsonl)")
    t.add_argument("--config", default=None, help="run config JSON; unknown keys are rejected")
    t.add_argument("--out", required=True, help="model container path; history is written next to it")
    t.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    t.add_argument("--epochs", type=int, default=None, help="number of epochs (overrides config)")
    t.add_argument("--batch-size", type=int, default=None, help="complexes per optimizer step")
    t.add_argument("--mode", choices=["unconditional", "conditional", "fixed_backbone"], default=None)
    t.add_argument("--mask-antigen", type=float, default=None, metavar="FRACTION", help="fraction of antigen residues masked per epoch")
    t.add_argument("--framework-conditioning", choices=["on", "off"], default=None, help="condition on the framework prefix")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="design CDRs with a trained model")
    g.add_argument("--model", required=True, help="model container")
    g.add_argument("--data", required=True, help="featurized dataset (.jsonl)")
    g.add_argument("--out", required=True, help="output designs (.jsonl, one result per complex)")
    g.add_argument("--mode", choices=["unconditional", "conditional", "fixed_backbone"], default=None, help="defaults to the training mode")
    g.add_argument("--method", choices=["heun_fixed", "rk4_fixed", "heun_adaptive"], default=None, help="solver override")
    g.add_argument("--seed", type=int, default=None, help="accepted for symmetry; decoding is deterministic")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score designs against references")
    e.add_argument("--pred", required=True, help="designs from generate")
    e.add_argument("--truth", required=True, help="reference dataset (.jsonl)")
    e.add_argument("--out", required=True, help="report JSON")
    e.set_defaults(func=cmd_evaluate)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("ABODE_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _set_threads(args.threads)
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
