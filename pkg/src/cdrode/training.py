"""Adam training of the vector field on featurized complexes."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .dynamics import ModelConfig, ModelParams, batch_conditioning, f_psi, param_shapes
from .objectives import LossBreakdown, LossConfig, Truth, loss_terms
from .ode import SolverConfig, integrate_tensor

log = logging.getLogger(__name__)

TRAIN_MODES = ("unconditional", "conditional", "fixed_backbone")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    clip_norm: float = 5.0
    mode: str = "conditional"
    framework_conditioning: bool = False
    mask_antigen: float = 0.0
    checkpoint_every: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch size must be at least 1")
        if not self.lr > 0:
            raise TrainingError("learning rate must be positive")
        if self.epochs < 0:
            raise TrainingError("epochs must be non-negative")
        if self.mode not in TRAIN_MODES:
            raise TrainingError(f"unknown mode {self.mode!r}; choose from {TRAIN_MODES}")
        if not 0.0 <= self.mask_antigen <= 1.0:
            raise TrainingError("mask fraction must lie in [0, 1]")
        if not self.solver.fixed:
            raise TrainingError("training needs a fixed-step solver")
        if self.model.framework_conditioning != self.framework_conditioning:
            self.model = ModelConfig(**{**self.model.to_dict(), "framework_conditioning": self.framework_conditioning})

    @property
    def loss_mode(self) -> str:
        return "sequence_only" if self.mode == "fixed_backbone" else "codesign"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # per-epoch mean LossBreakdown as dicts
    grad_norms: list = field(default_factory=list)  # per-epoch mean pre-clip global norm
    wall_clock: list = field(default_factory=list)  # seconds per epoch; not serialized

    def __len__(self) -> int:
        return len(self.epochs)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "grad_norms": self.grad_norms}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_params(config: ModelConfig | None = None, seed: int = 0) -> ModelParams:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn in a fixed name order.

    The output projection starts at zero so that z(T) = z(0) before training;
    see the project notes on stability of the fixed-step solver.
    """
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        bound = 1.0 / np.sqrt(shape[0])
        w = rng.uniform(-bound, bound, size=shape)
        arrays[name] = np.zeros(shape) if name == OUTPUT_MATRIX else w
    return ModelParams(cfg, arrays)


OUTPUT_MATRIX = "out.W"


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    c = max_norm / norm
    return {k: g * c for k, g in grads.items()}, norm


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """Bias-corrected Adam after global-norm clipping. Returns new dicts; inputs are untouched."""
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise TrainingError(f"gradient {k} does not match the parameters")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {k}")
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k, np.zeros_like(p))
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p[k] = p - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# ----------------------------------------------------------------------------
# graphs for each training mode


def build_training_graph(cx, mode: str, framework_conditioning: bool = False, knn: int = 5) -> gr.ComplexGraph:
    has_antigen = len(cx.antigen_sequence) > 0
    if mode == "conditional":
        if not has_antigen:
            raise TrainingError(f"conditional mode needs an antigen ({cx.name})")
        g = gr.graph_from_complex(cx, conditional=True)
    elif mode == "unconditional":
        # any antigen in the record is ignored, so one dataset serves every mode
        g = gr.graph_from_complex(cx, conditional=False)
    elif mode == "fixed_backbone":
        g = gr.fixed_backbone_graph(cx.chain_sequence, cx.chain_coords)
    else:
        raise TrainingError(f"unknown mode {mode!r}")
    if framework_conditioning:
        g = gr.attach_framework(g, cx.framework_sequence, cx.framework_coords, k=knn)
    return g


def batch_loss(params: dict, graphs: list, config: TrainConfig, tape: ad.Tape | None = None):
    """Loss tensors for one block-diagonal batch; leaves are created on ``tape`` if given."""
    batch = gr.GraphBatch(graphs)
    truth = Truth.from_graphs(graphs)
    z0 = np.concatenate([gr.init_state(g) for g in graphs])
    h = batch_conditioning(batch, params, config.model.heads)
    T = config.solver.t_end

    def f(t, z):
        return f_psi(t, z, batch, params, h=h, t_end=T, config=config.model)

    traj = integrate_tensor(f, z0, config.solver)
    return loss_terms(traj.final, truth, config.loss, config.loss_mode), traj


def loss_and_grad(params: dict, graphs: list, config: TrainConfig):
    tape = ad.Tape()
    names = list(params)
    leaves = {k: tape.leaf(params[k], k) for k in names}
    (total, seq, angle, radius), _ = batch_loss(leaves, graphs, config)
    bd = LossBreakdown(
        total=float(seq.value) + config.loss.lam * (float(angle.value) + float(radius.value)),
        seq=float(seq.value),
        angle=float(angle.value),
        radius=float(radius.value),
    )
    if not total.tracked:
        return bd, {k: np.zeros_like(v) for k, v in params.items()}
    grads = ad.backward(tape, total, [leaves[k] for k in names])
    return bd, dict(zip(names, grads))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle of sample indices for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    dataset,
    config: TrainConfig,
    params: ModelParams | None = None,
    checkpoint: Callable | None = None,
    callback: Callable | None = None,
):
    """Optimize the vector field on ``dataset`` (FeaturizedComplex records or prebuilt graphs).

    ``checkpoint(epoch, params)`` runs every ``config.checkpoint_every`` epochs.
    ``callback(epoch, params, history)`` runs after every epoch and may return
    True to stop; it exists for harnesses and is never used by the CLI.
    """
    data = list(dataset)
    if not data:
        raise TrainingError("empty dataset")
    graphs = [
        d if isinstance(d, gr.ComplexGraph) else build_training_graph(d, config.mode, config.framework_conditioning, config.model.knn)
        for d in data
    ]
    if config.mode == "conditional" and any(not g.conditional for g in graphs):
        raise TrainingError("conditional mode needs antigen in every sample")
    if config.mask_antigen > 0 and config.mode != "conditional":
        raise TrainingError("antigen masking needs conditional mode")
    model = params.copy() if params is not None else init_params(config.model, config.seed)
    p = model.arrays
    state = AdamState()
    history = TrainHistory()
    n = len(graphs)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = epoch_order(n, config.seed, epoch)
        sums = np.zeros(4)
        norms = []
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            batch = [graphs[i] for i in idx]
            if config.mask_antigen > 0:
                batch = [gr.mask_antigen(g, config.mask_antigen, [config.seed, epoch, int(i)]) for g, i in zip(batch, idx)]
            bd, grads = loss_and_grad(p, batch, config)
            norms.append(global_norm(grads))
            p, state = adam_step(p, grads, state, config)
            sums += len(idx) * np.array([bd.total, bd.seq, bd.angle, bd.radius])
        mean = sums / n
        history.epochs.append(LossBreakdown(*map(float, mean)).to_dict())
        history.grad_norms.append(float(np.mean(norms)))
        history.wall_clock.append(time.perf_counter() - start)
        log.info("epoch %d loss %.6f seq %.4f (%.2fs)", epoch + 1, mean[0], mean[1], history.wall_clock[-1])
        model = ModelParams(model.config, p)
        if checkpoint is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint(epoch + 1, model)
        if callback is not None and callback(epoch + 1, model, history):
            break
    return ModelParams(model.config, p), history
