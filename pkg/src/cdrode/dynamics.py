"""Attention-based vector field over the antibody-antigen graph and the framework encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import EDGE_DIM, INTERNAL, N_AA, STATE_DIM, ComplexGraph, GraphBatch, edge_feature_tensor

COND_DIM = 16
LAYER_MATRICES = ("W1", "W2", "W3", "W4", "W6", "Wo")


@dataclass
class ModelConfig:
    widths: tuple = (128, 256, 64)
    heads: int = 4
    encoder_widths: tuple = (64, 16)
    knn: int = 5
    framework_conditioning: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        for w in self.widths + self.encoder_widths:
            if w % self.heads:
                raise ValueError(f"width {w} not divisible by {self.heads} heads")
        if self.encoder_widths[-1] != COND_DIM:
            raise ValueError(f"encoder must end at width {COND_DIM}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @property
    def input_dim(self) -> int:
        return STATE_DIM + 1 + COND_DIM


@dataclass
class ModelParams:
    """Named weight matrices, stored as (fan_in, fan_out) for row-vector inputs.

    Layer ``l`` of the vector field owns ``f{l}.W1`` (skip), ``W2`` (values),
    ``W3`` (queries), ``W4`` (keys), ``W6`` (edge projection) and ``Wo`` (head
    mixing); ``out.W`` maps the last width to the 29-d state derivative.
    ``W5`` is never allocated. Encoder layers use the prefix ``enc{l}``.
    """

    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def shapes(self) -> dict:
        return {k: list(v.shape) for k, v in self.arrays.items()}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes = {}
    d_in = config.input_dim
    for l, w in enumerate(config.widths):
        for name in ("W1", "W2", "W3", "W4"):
            shapes[f"f{l}.{name}"] = (d_in, w)
        shapes[f"f{l}.W6"] = (EDGE_DIM, w)
        shapes[f"f{l}.Wo"] = (w, w)
        d_in = w
    shapes["out.W"] = (d_in, STATE_DIM)
    if config.framework_conditioning:
        d_in = STATE_DIM
        for l, w in enumerate(config.encoder_widths):
            for name in ("W1", "W2", "W3", "W4"):
                shapes[f"enc{l}.{name}"] = (d_in, w)
            shapes[f"enc{l}.W6"] = (EDGE_DIM, w)
            shapes[f"enc{l}.Wo"] = (w, w)
            d_in = w
    return shapes


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})


# ----------------------------------------------------------------------------
# attention layer


def _segments(ids, n):
    return ids if isinstance(ids, ad.Segments) else ad.Segments(ids, n)


def _project(X, e, p, prefix):
    W = {k: p[f"{prefix}.{k}"] for k in LAYER_MATRICES}
    return W, ad.matmul(X, W["W3"]), ad.matmul(X, W["W4"]), ad.matmul(X, W["W2"]), ad.matmul(e, W["W6"])


def _alpha(Q, K, Ep, src, dst, num_nodes, heads):
    E = len(src)
    w = Q.shape[1]
    d = w // heads
    q = ad.reshape(ad.take_rows(Q, dst), (E, heads, d))
    k = ad.reshape(ad.take_rows(K, src) + Ep, (E, heads, d))
    logits = ad.scale(ad.sum_(q * k, axis=-1), 1.0 / np.sqrt(d))
    return ad.segment_softmax(logits, dst, num_nodes)


def _messages(Q, K, V, Ep, src, dst, num_nodes, heads):
    E = len(src)
    w = Q.shape[1]
    d = w // heads
    alpha = _alpha(Q, K, Ep, src, dst, num_nodes, heads)
    val = ad.reshape(ad.take_rows(V, src) + Ep, (E, heads, d))
    a = ad.broadcast_to(ad.reshape(alpha, (E, heads, 1)), (E, heads, d))
    return ad.reshape(a * val, (E, w))


def attention_coefficients(p, prefix: str, X, e, src, dst, num_nodes: int, heads: int) -> ad.Tensor:
    """Per-edge, per-head attention weights (E, H), normalized over each receiver's incoming edges."""
    _, Q, K, _, Ep = _project(X, e, p, prefix)
    return _alpha(Q, K, Ep, src, dst, num_nodes, heads)


def edge_messages(p, prefix: str, X, e, src, dst, num_nodes: int, heads: int) -> ad.Tensor:
    """Per-edge messages alpha_ij (W2 x_j + W6 e_ij), heads concatenated, (E, width)."""
    _, Q, K, V, Ep = _project(X, e, p, prefix)
    return _messages(Q, K, V, Ep, src, dst, num_nodes, heads)


def layer_forward_reference(p, prefix: str, X, e, src, dst, num_nodes: int, heads: int) -> ad.Tensor:
    """Attention layer composed from tape primitives; the fused version is checked against it."""
    W, Q, K, V, Ep = _project(X, e, p, prefix)
    msg = _messages(Q, K, V, Ep, src, dst, num_nodes, heads)
    agg = ad.segment_sum(msg, dst, num_nodes)
    return ad.matmul(X, W["W1"]) + ad.matmul(agg, W["Wo"])


def aggregate(msg: np.ndarray, dst_s: ad.Segments, parts=None) -> np.ndarray:
    """Sum edge rows into receivers; with ``parts`` the sum is taken part by part (internal, then external)."""
    if not parts:
        return dst_s.sum(msg)
    out = parts[0].sum(msg)
    for part in parts[1:]:
        out = out + part.sum(msg)
    return out


def layer_forward(p, prefix: str, X, e, src, dst, num_nodes: int, heads: int, parts=None) -> ad.Tensor:
    """W1 x_i + Wo sum_j alpha_ij (W2 x_j + W6 e_ij), before the nonlinearity.

    One fused tape entry with a hand-written backward pass. ``parts`` are
    row-masked receiver segments partitioning the edges; the message sum is
    then formed as the sum of the per-part sums.
    """
    X, e = ad.as_tensor(X), ad.as_tensor(e)
    Ws = [ad.as_tensor(p[f"{prefix}.{k}"]) for k in LAYER_MATRICES]
    W1, W2, W3, W4, W6, Wo = (w.value for w in Ws)
    src_s, dst_s = _segments(src, num_nodes), _segments(dst, num_nodes)
    si, di = src_s.ids, dst_s.ids
    E = len(si)
    x, ev = X.value, e.value
    w = W1.shape[1]
    d = w // heads
    scale = 1.0 / np.sqrt(d)

    Q, K, V = x @ W3, x @ W4, x @ W2
    Ep = ev @ W6
    Kt = K[si] + Ep
    Vt = V[si] + Ep
    Qd = Q[di]
    logits = (Qd * Kt).reshape(E, heads, d).sum(-1) * scale
    mx = np.full((num_nodes, heads), -np.inf)
    np.maximum.at(mx, di, logits)
    ex = np.exp(logits - mx[di]) if E else logits
    alpha = ex / dst_s.sum(ex)[di] if E else ex
    A = np.repeat(alpha, d, axis=1)
    agg = aggregate(A * Vt, dst_s, parts)
    out = x @ W1 + agg @ Wo

    def vjp(G):
        dagg = G @ Wo.T
        dmsg = dagg[di]
        dVt = dmsg * A
        dalpha = (dmsg * Vt).reshape(E, heads, d).sum(-1)
        dlog = alpha * (dalpha - dst_s.sum(alpha * dalpha)[di])
        dl = np.repeat(dlog, d, axis=1) * scale
        dKt = dl * Qd
        dQ = dst_s.sum(dl * Kt)
        dK = src_s.sum(dKt)
        dV = src_s.sum(dVt)
        dEp = dKt + dVt
        dX = G @ W1.T + dQ @ W3.T + dK @ W4.T + dV @ W2.T
        return (
            dX,
            dEp @ W6.T,
            x.T @ G,
            x.T @ dV,
            x.T @ dQ,
            x.T @ dK,
            ev.T @ dEp,
            agg.T @ G,
        )

    return ad.custom_op("attention_layer", out, [X, e] + Ws, vjp)


# ----------------------------------------------------------------------------
# vector field


def as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, ComplexGraph):
        return GraphBatch([graph])
    return GraphBatch(list(graph))


def node_inputs(batch: GraphBatch, z_ab, t: float, t_end: float, h) -> ad.Tensor:
    """First-layer inputs [z_i, t/T, h] for all nodes (antibody first)."""
    N = batch.num_nodes
    z = ad.concat([z_ab, batch.ag_state], axis=0)
    tcol = np.full((N, 1), float(t) / float(t_end))
    if h is None:
        hrows = np.zeros((N, COND_DIM))
    else:
        hrows = ad.take_rows(ad.reshape(h, (-1, COND_DIM)), batch.node_graph)
    return ad.concat([z, tcol, hrows], axis=1)


def f_psi(t: float, states, graph, params, h=None, t_end: float = 200.0, config: ModelConfig | None = None):
    """Time derivative (n_ab, 29) of the antibody node states.

    ``params`` maps names to arrays or tensors; ``h`` is None or one
    conditioning vector per graph, shape (B, 16). Edge features are rebuilt
    from ``states`` (and the structure reconstructed from them) on every call.
    For frozen-backbone graphs the internal-coordinate block of the output is 0.
    """
    batch = as_batch(graph)
    p = params.arrays if isinstance(params, ModelParams) else params
    heads = (config or (params.config if isinstance(params, ModelParams) else ModelConfig())).heads
    z_ab = ad.as_tensor(states)
    e = batch.edge_features(z_ab)
    X = node_inputs(batch, z_ab, t, t_end, h)
    l = 0
    while f"f{l}.W1" in p:
        X = ad.tanh(layer_forward(p, f"f{l}", X, e, batch.src_seg, batch.dst_seg, batch.num_nodes, heads, batch.dst_parts))
        l += 1
    out = ad.matmul(X[: batch.n_ab], p["out.W"])
    if batch.fixed:
        mask = np.zeros((batch.n_ab, STATE_DIM))
        mask[:, :N_AA] = 1.0
        out = out * mask
    return out


def message_split(t: float, states, graph, params, h=None, t_end: float = 200.0, layer: int = 0, heads: int = 4):
    """Aggregated messages of one layer as the layer forms them, and their internal and external parts.

    The parts are accumulated independently with ``np.add.at`` over the edges
    of each type.
    """
    batch = as_batch(graph)
    p = params.arrays if isinstance(params, ModelParams) else params
    z_ab = ad.as_tensor(states)
    e = batch.edge_features(z_ab)
    X = node_inputs(batch, z_ab, t, t_end, h)
    for l in range(layer):
        X = ad.tanh(layer_forward(p, f"f{l}", X, e, batch.src_seg, batch.dst_seg, batch.num_nodes, heads, batch.dst_parts))
    msg = edge_messages(p, f"f{layer}", X, e, batch.src_seg, batch.dst_seg, batch.num_nodes, heads).value
    total = aggregate(msg, batch.dst_seg, batch.dst_parts)
    internal = np.zeros_like(total)
    external = np.zeros_like(total)
    k1 = batch.etype == INTERNAL
    np.add.at(internal, batch.dst[k1], msg[k1])
    np.add.at(external, batch.dst[~k1], msg[~k1])
    return total, internal, external


# ----------------------------------------------------------------------------
# framework encoder


def encode_framework(framework: dict | None, params, heads: int = 4):
    """Mean-pooled 16-d encoding of the non-CDR prefix over its kNN graph.

    Returns ``(h, ok)``; an empty framework gives the zero vector and ok=False.
    """
    p = params.arrays if isinstance(params, ModelParams) else params
    if not framework or len(framework["z"]) == 0:
        return ad.Tensor(np.zeros(COND_DIM)), False
    z = framework["z"]
    Fn = len(z)
    src, dst = framework["src"], framework["dst"]
    etype = np.full(len(src), INTERNAL)
    e = edge_feature_tensor(z, framework["ca"], framework["frames"], src, dst, etype, framework["separation"])
    X = ad.Tensor(z)
    l = 0
    while f"enc{l}.W1" in p:
        X = layer_forward(p, f"enc{l}", X, e, src, dst, Fn, heads)
        if f"enc{l + 1}.W1" in p:
            X = ad.tanh(X)
        l += 1
    h = ad.scale(ad.sum_(X, axis=0), 1.0 / Fn)
    return h, True


def batch_conditioning(batch: GraphBatch, params, heads: int = 4):
    """Stacked (B, 16) conditioning vectors, or None when the model has no encoder."""
    p = params.arrays if isinstance(params, ModelParams) else params
    if "enc0.W1" not in p:
        return None
    hs = [encode_framework(g.meta.get("framework"), p, heads)[0] for g in batch.graphs]
    return ad.stack(hs, axis=0)
