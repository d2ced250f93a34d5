"""Antibody-antigen graph: typed edges, edge features, initial state, antigen masking.

Node order inside a graph is antibody CDR residues first (0..m-1), then antigen
residues (m..m+n-1). Edges run ``src -> dst``; the receiver ``dst`` is always an
antibody node. Internal edges carry type 1, antigen-to-antibody edges type 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {a: i for i, a in enumerate(ALPHABET)}
N_AA = 20
STATE_DIM = 29
N_RBF = 16
RBF_CENTERS = np.linspace(0.0, 20.0, N_RBF)
RBF_SIGMA = RBF_CENTERS[1] - RBF_CENTERS[0]
EDGE_DIM = STATE_DIM + 1 + N_RBF + 3 + 9 + 2
INTERNAL, EXTERNAL = 1, 2
# CA spacing used by the canonical (unconditional) anchors
CANONICAL_STEP = 3.8
DIRECTION_EPS = 1e-12
FRAME_EPS = 1e-6


class GraphError(ValueError):
    pass


@dataclass
class Anchors:
    """Seeds for reconstruction and initial interpolation.

    ``left`` holds three seed residues (3, tracks, xyz) ending with the residue
    right before the CDR; ``right`` the residue right after it (tracks, xyz).
    """

    left: np.ndarray
    right: np.ndarray

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "Anchors":
        return Anchors(self.left @ rot.T + shift, self.right @ rot.T + shift)


def canonical_anchors(m: int) -> Anchors:
    """Seeds at the origin with the identity frame; right flank on the +x axis."""
    s = CANONICAL_STEP
    pts = np.array([[-s, -s, 0.0], [-s, 0.0, 0.0], [0.0, 0.0, 0.0]])
    left = np.repeat(pts[:, None, :], 3, axis=1)
    right = np.tile([s * (m + 1), 0.0, 0.0], (3, 1))
    return Anchors(left, right)


def one_hot_logits(sequence: str) -> np.ndarray:
    out = np.zeros((len(sequence), N_AA))
    for i, a in enumerate(sequence):
        if a not in AA_INDEX:
            raise GraphError(f"residue {a!r} outside the 20-letter alphabet")
        out[i, AA_INDEX[a]] = 1.0
    return out


def encode_labels(sequence: str) -> np.ndarray:
    try:
        return np.array([AA_INDEX[a] for a in sequence], dtype=np.intp)
    except KeyError as exc:
        raise GraphError(f"residue {exc.args[0]!r} outside the 20-letter alphabet") from None


def node_internal_coords(coords) -> np.ndarray:
    """Placement-style internal coords (L, 9) for every residue of a chain.

    Row k describes atom k relative to atoms k-1, k-2, k-3; entries that need
    missing predecessors are zero.
    """
    x = np.asarray(coords, dtype=np.float64)
    L = len(x)
    out = np.zeros((L, 3, 3))
    if L < 2:
        return out.reshape(L, 9)
    f = geo.spatial_features(x).values.reshape(L, 3, 3)
    out[1:, :, geo.R] = f[:-1, :, geo.R]
    if L >= 3:
        out[2:, :, geo.ALPHA] = f[1:-1, :, geo.ALPHA]
    if L >= 4:
        out[3:, :, geo.GAMMA] = f[1:-2, :, geo.GAMMA]
    return out.reshape(L, 9)


def chain_frames(coords, positions=None) -> np.ndarray:
    """Frames for each residue of a (possibly gapped) chain.

    CA-neighbour frames where both sequence neighbours are present and the
    neighbourhood is not collinear; otherwise the residue's own N-CA-C frame;
    identity as the last resort.
    """
    x = np.asarray(coords, dtype=np.float64)
    L = len(x)
    pos = np.arange(L) if positions is None else np.asarray(positions)
    frames = np.tile(np.eye(3), (L, 1, 1))
    for i in range(L):
        if 0 < i < L - 1 and pos[i] - pos[i - 1] == 1 and pos[i + 1] - pos[i] == 1:
            try:
                frames[i] = geo.orientation_frames(x[i - 1, geo.CA], x[i, geo.CA], x[i + 1, geo.CA])
                continue
            except geo.FrameError:
                pass
        try:
            frames[i] = geo.orientation_frames(x[i, geo.N], x[i, geo.CA], x[i, geo.C])
        except geo.FrameError:
            pass
    return frames


@dataclass
class ComplexGraph:
    m: int
    positions: np.ndarray  # (m,) chain numbering of CDR residues
    anchors: Anchors
    antigen_state: np.ndarray  # (n, 29)
    antigen_coords: np.ndarray  # (n, 3, 3)
    antigen_frames: np.ndarray  # (n, 3, 3)
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    separation: np.ndarray
    labels: np.ndarray | None = None
    true_internal: np.ndarray | None = None
    true_coords: np.ndarray | None = None
    fixed_coords: np.ndarray | None = None  # frozen backbone (fixed-backbone design)
    conditional: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.antigen_state)

    @property
    def num_nodes(self) -> int:
        return self.m + self.n

    @property
    def fixed(self) -> bool:
        return self.fixed_coords is not None

    def edge_set(self) -> set[tuple[int, int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist(), self.etype.tolist()))


def _edges(m: int, n: int, positions: np.ndarray):
    src, dst, et, sep = [], [], [], []
    for i in range(m):
        for j in range(m):
            if i != j:
                src.append(j)
                dst.append(i)
                et.append(INTERNAL)
                sep.append((positions[i] - positions[j]) / 100.0)
    for k in range(n):
        for i in range(m):
            src.append(m + k)
            dst.append(i)
            et.append(EXTERNAL)
            sep.append(0.0)
    return (
        np.array(src, dtype=np.intp),
        np.array(dst, dtype=np.intp),
        np.array(et, dtype=np.intp),
        np.array(sep, dtype=np.float64),
    )


def build_graph(
    m: int,
    antigen_sequence: str = "",
    antigen_coords=None,
    anchors: Anchors | None = None,
    positions=None,
    antigen_positions=None,
    labels=None,
    true_coords=None,
) -> ComplexGraph:
    """Complete directed graph on m CDR residues plus antigen -> antibody edges.

    Without an antigen the graph is unconditional and canonical anchors are used
    when none are given. With an antigen, anchors are required.
    """
    if m < 1:
        raise GraphError("antibody CDR must have at least one residue")
    n = len(antigen_sequence)
    conditional = n > 0
    if anchors is None:
        if conditional:
            raise GraphError("conditional graphs need flank anchors")
        anchors = canonical_anchors(m)
    positions = np.arange(m) if positions is None else np.asarray(positions)
    if len(positions) != m:
        raise GraphError("positions length differs from CDR length")
    if conditional:
        ag_coords = np.asarray(antigen_coords, dtype=np.float64).reshape(n, 3, 3)
        a = one_hot_logits(antigen_sequence)
        ag_state = np.concatenate([a, node_internal_coords(ag_coords)], axis=1)
        ag_frames = chain_frames(ag_coords, antigen_positions)
    else:
        ag_coords = np.zeros((0, 3, 3))
        ag_state = np.zeros((0, STATE_DIM))
        ag_frames = np.zeros((0, 3, 3))
    src, dst, et, sep = _edges(m, n, positions)
    g = ComplexGraph(
        m=m,
        positions=positions,
        anchors=anchors,
        antigen_state=ag_state,
        antigen_coords=ag_coords,
        antigen_frames=ag_frames,
        src=src,
        dst=dst,
        etype=et,
        separation=sep,
        conditional=conditional,
    )
    if labels is not None:
        g.labels = encode_labels(labels) if isinstance(labels, str) else np.asarray(labels, dtype=np.intp)
    if true_coords is not None:
        tc = np.asarray(true_coords, dtype=np.float64)
        g.true_coords = tc
        chain = np.concatenate([anchors.left, tc], axis=0)
        g.true_internal = geo.placement_coords(chain)
    return g


def graph_from_complex(cx, conditional: bool = True, epitope_cutoff: float | None = None) -> ComplexGraph:
    """Build a co-design graph from a FeaturizedComplex-like record."""
    anchors = Anchors(np.asarray(cx.left_anchor), np.asarray(cx.right_flank))
    ag_seq, ag_xyz, ag_pos = "", None, None
    if conditional and len(cx.antigen_sequence) > 0:
        ag_seq, ag_xyz, ag_pos = cx.antigen_sequence, np.asarray(cx.antigen_coords), cx.antigen_positions
        if epitope_cutoff is not None:
            keep = epitope_mask(ag_xyz, anchors, epitope_cutoff)
            ag_seq = "".join(a for a, k in zip(ag_seq, keep) if k)
            ag_xyz = ag_xyz[keep]
            ag_pos = None if ag_pos is None else np.asarray(ag_pos)[keep]
    true = np.asarray(cx.cdr_coords)
    if not conditional or not ag_seq:
        # the real flanks are unknown without an antigen frame of reference
        g = build_graph(len(cx.cdr_sequence), positions=cx.cdr_positions)
        g.labels = encode_labels(cx.cdr_sequence)
        g.true_coords = true
        g.true_internal = geo.placement_coords(np.concatenate([anchors.left, true], axis=0))
        return g
    return build_graph(
        len(cx.cdr_sequence),
        ag_seq,
        ag_xyz,
        anchors,
        positions=cx.cdr_positions,
        antigen_positions=ag_pos,
        labels=cx.cdr_sequence,
        true_coords=true,
    )


def epitope_mask(antigen_coords, anchors: Anchors, cutoff: float) -> np.ndarray:
    """Antigen residues whose CA lies within ``cutoff`` of either flank CA."""
    ca = np.asarray(antigen_coords)[:, geo.CA]
    flanks = np.stack([anchors.left[2, geo.CA], anchors.right[geo.CA]])
    d = np.linalg.norm(ca[:, None, :] - flanks[None], axis=-1).min(axis=1)
    return d <= cutoff


def without_antigen(g: ComplexGraph) -> ComplexGraph:
    keep = g.etype == INTERNAL
    return replace(
        g,
        antigen_state=g.antigen_state[:0],
        antigen_coords=g.antigen_coords[:0],
        antigen_frames=g.antigen_frames[:0],
        src=g.src[keep],
        dst=g.dst[keep],
        etype=g.etype[keep],
        separation=g.separation[keep],
        conditional=False,
    )


def with_edge_type(g: ComplexGraph, k: int) -> ComplexGraph:
    return replace(g, etype=np.full_like(g.etype, k))


def interpolate_backbone(anchors: Anchors, m: int) -> np.ndarray:
    """Evenly spaced positions between the flanking residues, per atom track."""
    left = anchors.left[2]
    frac = (np.arange(m) + 1.0) / (m + 1.0)
    return left[None] + frac[:, None, None] * (anchors.right - left)[None]


def init_state(g: ComplexGraph) -> np.ndarray:
    """Initial states z(0): zero logits and internal coords of the interpolated backbone."""
    if g.fixed:
        s0 = g.meta["fixed_internal"]
    else:
        coords = interpolate_backbone(g.anchors, g.m)
        s0 = geo.placement_coords(np.concatenate([g.anchors.left, coords], axis=0))
    return np.concatenate([np.zeros((g.m, N_AA)), s0], axis=1)


def masked_count(n: int, fraction: float) -> int:
    if fraction <= 0:
        return 0
    return min(n, max(1, int(np.floor(fraction * n + 0.5))))


def mask_antigen(g: ComplexGraph, fraction: float, rng_seed) -> ComplexGraph:
    """Replace the label block of a random subset of antigen residues with zero logits."""
    if g.n == 0:
        raise GraphError("cannot mask an empty antigen")
    if not 0.0 <= fraction <= 1.0:
        raise GraphError("fraction must lie in [0, 1]")
    k = masked_count(g.n, fraction)
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(g.n, size=k, replace=False)) if k else np.zeros(0, dtype=np.intp)
    state = g.antigen_state.copy()
    state[chosen, :N_AA] = 0.0
    out = replace(g, antigen_state=state, meta=dict(g.meta))
    out.meta["masked"] = chosen
    return out


# ----------------------------------------------------------------------------
# edge features


def rbf(d) -> ad.Tensor:
    """Gaussian bank over distances ``d`` (E, 1) -> (E, 16)."""
    d = ad.as_tensor(d)
    E = d.shape[0]
    diff = ad.broadcast_to(d, (E, N_RBF)) - np.broadcast_to(RBF_CENTERS, (E, N_RBF))
    return ad.exp(ad.scale(diff * diff, -1.0 / RBF_SIGMA**2))


def edge_feature_tensor(z, ca, frames, src, dst, etype, separation) -> ad.Tensor:
    """Features (E, 60) for edges src -> dst from node states, CA positions and frames."""
    E = len(src)
    dz = ad.take_rows(z, src) - ad.take_rows(z, dst)
    rel = ad.take_rows(ca, src) - ad.take_rows(ca, dst)
    d = ad.norm_rows(rel)
    unit = ad.normalize_rows(rel, DIRECTION_EPS)
    Oi = ad.take_rows(frames, dst)
    Oj = ad.take_rows(frames, src)
    OiT = ad.transpose(Oi)
    direction = ad.reshape(ad.matmul(OiT, ad.reshape(unit, (E, 3, 1))), (E, 3))
    orient = ad.reshape(ad.matmul(OiT, Oj), (E, 9))
    onehot = np.zeros((E, 2))
    onehot[np.arange(E), np.asarray(etype) - 1] = 1.0
    sep = np.asarray(separation, dtype=np.float64).reshape(E, 1)
    return ad.concat([dz, sep, rbf(d), direction, orient, onehot], axis=1)


def node_frames_exact(ab_coords, g: ComplexGraph) -> np.ndarray:
    """Exact CA-neighbour frames for the CDR nodes, identity where undefined."""
    ca = np.concatenate([g.anchors.left[2:, geo.CA], ab_coords[:, geo.CA], g.anchors.right[None, geo.CA]])
    frames = np.tile(np.eye(3), (g.m, 1, 1))
    for i in range(g.m):
        try:
            frames[i] = geo.orientation_frames(ca[i], ca[i + 1], ca[i + 2])
        except geo.FrameError:
            pass
    return frames


def edge_features(g: ComplexGraph, i: int, j: int, states, coords) -> np.ndarray:
    """Features of edge j -> i given antibody states (m, 29) and backbone coords (m, 3, 3)."""
    if i == j:
        raise GraphError("self-loops are excluded")
    hit = np.nonzero((g.dst == i) & (g.src == j))[0]
    if len(hit) == 0:
        raise GraphError(f"({j} -> {i}) is not an edge")
    e = hit[0]
    all_z, ca, frames = assemble_nodes(g, np.asarray(states), np.asarray(coords))
    return edge_feature_tensor(
        all_z, ca, frames, g.src[e : e + 1], g.dst[e : e + 1], g.etype[e : e + 1], g.separation[e : e + 1]
    ).value[0]


def assemble_nodes(g: ComplexGraph, states, coords):
    coords = np.asarray(coords, dtype=np.float64)
    z = np.concatenate([np.asarray(states, dtype=np.float64), g.antigen_state], axis=0)
    ca = np.concatenate([coords[:, geo.CA], g.antigen_coords[:, geo.CA]], axis=0)
    frames = np.concatenate([node_frames_exact(coords, g), g.antigen_frames], axis=0)
    return z, ca, frames


def knn_edges(ca, k: int):
    """Directed edges j -> i for the k nearest CA neighbours j of every residue i."""
    ca = np.asarray(ca, dtype=np.float64)
    L = len(ca)
    k = min(k, L - 1)
    if k <= 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    d = np.linalg.norm(ca[:, None] - ca[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    nbr = np.argsort(d, axis=1, kind="stable")[:, :k]
    dst = np.repeat(np.arange(L), k)
    return nbr.reshape(-1).astype(np.intp), dst.astype(np.intp)


def fixed_backbone_graph(sequence: str | None, coords, k: int = 30, positions=None) -> ComplexGraph:
    """Graph over a whole chain with a frozen backbone and k-nearest-neighbour edges (all type 1)."""
    x = np.asarray(coords, dtype=np.float64)
    L = len(x)
    if L < 4:
        raise GraphError("chain too short for backbone features")
    pos = np.arange(L) if positions is None else np.asarray(positions)
    src, dst = knn_edges(x[:, geo.CA], k)
    g = ComplexGraph(
        m=L,
        positions=pos,
        anchors=Anchors(x[:3].copy(), x[-1].copy()),
        antigen_state=np.zeros((0, STATE_DIM)),
        antigen_coords=np.zeros((0, 3, 3)),
        antigen_frames=np.zeros((0, 3, 3)),
        src=src,
        dst=dst,
        etype=np.full(len(src), INTERNAL, dtype=np.intp),
        separation=(pos[dst] - pos[src]) / 100.0,
        true_coords=x,
        fixed_coords=x,
    )
    internal = node_internal_coords(x)
    g.true_internal = internal
    g.meta["fixed_internal"] = internal
    g.meta["fixed_frames"] = chain_frames(x, pos)
    if sequence is not None:
        g.labels = encode_labels(sequence)
    return g


def attach_framework(g: ComplexGraph, sequence: str, coords, k: int = 5) -> ComplexGraph:
    """Store the non-CDR prefix used by the conditioning encoder."""
    x = np.asarray(coords, dtype=np.float64).reshape(-1, 3, 3)
    fw = {}
    if len(x):
        src, dst = knn_edges(x[:, geo.CA], k)
        fw = dict(
            z=np.concatenate([one_hot_logits(sequence), node_internal_coords(x)], axis=1),
            ca=x[:, geo.CA].copy(),
            frames=chain_frames(x),
            src=src,
            dst=dst,
            separation=(dst - src) / 100.0,
        )
    out = replace(g, meta=dict(g.meta))
    out.meta["framework"] = fw
    return out


# reconstruction padding row: (r, alpha, gamma) per track, any non-degenerate value
PAD_INTERNAL = np.tile([CANONICAL_STEP, 1.0, 0.0], 3)[None]


class GraphBatch:
    """Several graphs merged into one block-diagonal graph.

    Antibody nodes of all graphs come first, then antigen nodes.
    """

    def __init__(self, graphs: list[ComplexGraph]):
        if not graphs:
            raise GraphError("empty batch")
        self.graphs = graphs
        B = self.B = len(graphs)
        ms = np.array([g.m for g in graphs])
        ns = np.array([g.n for g in graphs])
        self.ms, self.ns = ms, ns
        self.n_ab = int(ms.sum())
        self.n_ag = int(ns.sum())
        self.num_nodes = self.n_ab + self.n_ag
        ab_off = np.concatenate([[0], np.cumsum(ms)[:-1]])
        ag_off = self.n_ab + np.concatenate([[0], np.cumsum(ns)[:-1]])
        self.ab_offsets = ab_off
        fixed = {g.fixed for g in graphs}
        if len(fixed) > 1:
            raise GraphError("cannot mix fixed-backbone and co-design graphs in one batch")
        self.fixed = fixed.pop()

        def remap(g, idx, b):
            idx = np.asarray(idx)
            return np.where(idx < g.m, idx + ab_off[b], idx - g.m + ag_off[b])

        self.src = np.concatenate([remap(g, g.src, b) for b, g in enumerate(graphs)]).astype(np.intp)
        self.dst = np.concatenate([remap(g, g.dst, b) for b, g in enumerate(graphs)]).astype(np.intp)
        self.etype = np.concatenate([g.etype for g in graphs]).astype(np.intp)
        self.separation = np.concatenate([g.separation for g in graphs])
        self.src_seg = ad.Segments(self.src, self.num_nodes)
        self.dst_seg = ad.Segments(self.dst, self.num_nodes)
        # per-type receivers: the layer aggregates m_int + m_ext
        self.dst_parts = tuple(ad.Segments(self.dst, self.num_nodes, self.etype == k) for k in (INTERNAL, EXTERNAL))
        self.node_graph = np.concatenate([np.repeat(np.arange(B), ms), np.repeat(np.arange(B), ns)])
        self.ab_graph = self.node_graph[: self.n_ab]
        self.ag_state = np.concatenate([g.antigen_state for g in graphs]).reshape(-1, STATE_DIM)
        self.ag_ca = np.concatenate([g.antigen_coords for g in graphs]).reshape(-1, 3, 3)[:, geo.CA]
        self.ag_frames = np.concatenate([g.antigen_frames for g in graphs]).reshape(-1, 3, 3)
        self.anchors_left = np.stack([g.anchors.left for g in graphs])
        self.anchors_right = np.stack([g.anchors.right for g in graphs])

        M = self.m_max = int(ms.max())
        pad = np.full((B, M), self.n_ab, dtype=np.intp)
        for b in range(B):
            pad[b, : ms[b]] = ab_off[b] + np.arange(ms[b])
        self.pad_index = pad.reshape(-1)
        self.unpad_index = np.concatenate([b * M + np.arange(ms[b]) for b in range(B)]).astype(np.intp)
        # CA pool: [antibody CA (n_ab), left flank CA (B), right flank CA (B)]
        prev = np.empty(self.n_ab, dtype=np.intp)
        nxt = np.empty(self.n_ab, dtype=np.intp)
        for b in range(B):
            idx = ab_off[b] + np.arange(ms[b])
            prev[idx] = idx - 1
            nxt[idx] = idx + 1
            prev[idx[0]] = self.n_ab + b
            nxt[idx[-1]] = self.n_ab + B + b
        self.prev_index, self.next_index = prev, nxt
        if self.fixed:
            self.fixed_ca = np.concatenate([g.fixed_coords[:, geo.CA] for g in graphs])
            self.fixed_frames = np.concatenate([g.meta["fixed_frames"] for g in graphs])

    def antibody_coords(self, s_ab) -> ad.Tensor:
        """Reconstruct (n_ab, 3, 3) backbone positions from internal coordinates (n_ab, 9)."""
        pool = ad.concat([s_ab, PAD_INTERNAL], axis=0)
        padded = ad.reshape(ad.take_rows(pool, self.pad_index), (self.B, self.m_max, 9))
        xyz = geo.reconstruct_tensor(padded, self.anchors_left)
        return ad.take_rows(ad.reshape(xyz, (self.B * self.m_max, 3, 3)), self.unpad_index)

    def node_geometry(self, s_ab):
        """CA positions and frames for all nodes (antibody first, then antigen)."""
        if self.fixed:
            ca_ab = self.fixed_ca
            fr_ab = self.fixed_frames
        else:
            xyz = self.antibody_coords(s_ab)
            ca_ab = xyz[:, geo.CA]
            pool = ad.concat(
                [ca_ab, self.anchors_left[:, 2, geo.CA], self.anchors_right[:, geo.CA]], axis=0
            )
            fr_ab = geo.soft_frames(
                ad.take_rows(pool, self.prev_index), ca_ab, ad.take_rows(pool, self.next_index), FRAME_EPS
            )
        ca = ad.concat([ca_ab, self.ag_ca], axis=0)
        frames = ad.concat([fr_ab, self.ag_frames], axis=0)
        return ca, frames

    def edge_features(self, z_ab) -> ad.Tensor:
        z_ab = ad.as_tensor(z_ab)
        s_ab = z_ab[:, N_AA:]
        ca, frames = self.node_geometry(s_ab)
        z = ad.concat([z_ab, self.ag_state], axis=0)
        return edge_feature_tensor(z, ca, frames, self.src_seg, self.dst_seg, self.etype, self.separation)

    def split(self, rows) -> list[np.ndarray]:
        rows = np.asarray(rows)
        return [rows[o : o + m] for o, m in zip(self.ab_offsets, self.ms)]
