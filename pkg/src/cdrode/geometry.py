"""Backbone internal coordinates, local frames, chain reconstruction and Kabsch RMSD.

Coordinates are arrays of shape ``(L, 3, 3)``: residue, atom track (N, CA, C),
xyz in Angstrom. Internal coordinates are laid out as 9 columns,
``track * 3 + kind`` with kinds (r, alpha, gamma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TRACKS = ("N", "CA", "C")
N, CA, C = 0, 1, 2
R, ALPHA, GAMMA = 0, 1, 2
GAMMA_MODES = ("dihedral", "literal")

# reconstruction normalizes with sqrt(|v|^2 + eps) so collinear seeds stay finite
RECON_EPS = 1e-6


class GeometryError(ValueError):
    pass


class FrameError(GeometryError):
    pass


@dataclass
class SpatialFeatures:
    values: np.ndarray  # (L, 9)
    valid: np.ndarray  # (L, 9) bool

    def __len__(self) -> int:
        return len(self.values)


def column(track: int, kind: int) -> int:
    return 3 * track + kind


def _angle(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    cos = (u * v).sum(-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
    return np.arccos(np.clip(cos, -1.0 + ad.ACOS_EPS, 1.0 - ad.ACOS_EPS))


def dihedral(p0, p1, p2, p3) -> np.ndarray:
    """Signed torsion angle about p1->p2, in (-pi, pi]. Degenerate input gives 0."""
    b0 = np.asarray(p1) - np.asarray(p0)
    b1 = np.asarray(p2) - np.asarray(p1)
    b2 = np.asarray(p3) - np.asarray(p2)
    n1 = np.cross(b0, b1)
    n2 = np.cross(b1, b2)
    b1n = b1 / np.maximum(np.linalg.norm(b1, axis=-1, keepdims=True), 1e-300)
    y = (np.cross(n1, n2) * b1n).sum(-1)
    x = (n1 * n2).sum(-1)
    out = np.arctan2(y, x)
    return np.where(out <= -np.pi, np.pi, out)


def spatial_features(coords, gamma_mode: str = "dihedral") -> SpatialFeatures:
    """Per-residue (r, alpha, gamma) for each atom track.

    r_i is the length of u_i = x_{i+1} - x_i, alpha_i the angle between u_i and
    u_{i-1}. gamma_i is the torsion of (x_{i-1}, x_i, x_{i+1}, x_{i+2}) in
    ``dihedral`` mode, or the angle between u_i and u_i x u_{i-1} in ``literal``
    mode (always pi/2). Entries lacking neighbours are 0 and flagged invalid.
    """
    if gamma_mode not in GAMMA_MODES:
        raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (3, 3):
        raise GeometryError(f"expected (L, 3, 3) coordinates, got {x.shape}")
    L = len(x)
    if L < 2:
        raise GeometryError("need at least 2 residues")
    if not np.isfinite(x).all():
        raise GeometryError("non-finite coordinates")
    u = x[1:] - x[:-1]  # (L-1, 3, 3)
    r = np.linalg.norm(u, axis=-1)
    if (r == 0).any():
        i = int(np.argwhere(r == 0)[0, 0])
        raise GeometryError(f"coincident consecutive atoms at residue {i}")

    values = np.zeros((L, 3, 3))
    valid = np.zeros((L, 3, 3), dtype=bool)
    values[: L - 1, :, R] = r
    valid[: L - 1, :, R] = True
    if L >= 3:
        values[1 : L - 1, :, ALPHA] = _angle(u[1:], u[:-1])
        valid[1 : L - 1, :, ALPHA] = True
        if gamma_mode == "literal":
            n = np.cross(u[1:], u[:-1])
            nn = np.linalg.norm(n, axis=-1)
            cos = np.where(nn > 0, (u[1:] * n).sum(-1) / (r[1:] * np.where(nn > 0, nn, 1.0)), 0.0)
            values[1 : L - 1, :, GAMMA] = np.arccos(np.clip(cos, -1.0, 1.0))
            valid[1 : L - 1, :, GAMMA] = True
        elif L >= 4:
            values[1 : L - 2, :, GAMMA] = dihedral(x[: L - 3], x[1 : L - 2], x[2 : L - 1], x[3:])
            valid[1 : L - 2, :, GAMMA] = True
    return SpatialFeatures(values.reshape(L, 9), valid.reshape(L, 9))


def placement_coords(chain) -> np.ndarray:
    """Internal coordinates that place atoms 3.. of each track from their predecessors.

    Row k (for atom k+3) holds bond length |x_{k+3} - x_{k+2}|, the co-angle at
    x_{k+2} and the torsion of (x_k, ..., x_{k+3}); in terms of
    :func:`spatial_features` these are r and alpha of residue k+2 and gamma of
    residue k+1.
    """
    x = np.asarray(chain, dtype=np.float64)
    if len(x) < 4:
        raise GeometryError("need 3 seed residues plus at least one placed residue")
    f = spatial_features(x).values.reshape(len(x), 3, 3)
    out = np.empty((len(x) - 3, 3, 3))
    out[:, :, R] = f[2:-1, :, R]
    out[:, :, ALPHA] = f[2:-1, :, ALPHA]
    out[:, :, GAMMA] = f[1:-2, :, GAMMA]
    return out.reshape(-1, 9)


def orientation_frames(prev, cur, nxt) -> np.ndarray:
    """Frames [b, n, b x n] (as columns) for centre points ``cur`` with chain neighbours.

    b is the normalized negative bisector of (prev - cur, nxt - cur) and n the
    unit normal of the plane they span. Raises FrameError when any
    neighbourhood is collinear.
    """
    prev, cur, nxt = (np.asarray(v, dtype=np.float64) for v in (prev, cur, nxt))
    u1 = cur - prev
    u2 = nxt - cur
    l1 = np.linalg.norm(u1, axis=-1, keepdims=True)
    l2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if (l1 == 0).any() or (l2 == 0).any():
        raise FrameError("coincident neighbour positions")
    u1, u2 = u1 / l1, u2 / l2
    b = u1 - u2
    n = np.cross(u1, u2)
    bl = np.linalg.norm(b, axis=-1, keepdims=True)
    nl = np.linalg.norm(n, axis=-1, keepdims=True)
    if (bl < 1e-9).any() or (nl < 1e-9).any():
        raise FrameError("collinear neighbourhood; frame undefined")
    b, n = b / bl, n / nl
    return np.stack([b, n, np.cross(b, n)], axis=-1)


def orientation_frame(ca, i: int) -> np.ndarray:
    """Frame of residue ``i`` from the CA trace ``ca`` (shape (L, 3))."""
    ca = np.asarray(ca, dtype=np.float64)
    if i < 1 or i >= len(ca) - 1:
        raise FrameError(f"residue {i} lacks a neighbour on both sides")
    return orientation_frames(ca[i - 1], ca[i], ca[i + 1])


def backbone_frames(coords) -> np.ndarray:
    """Frame for every residue of a chain, identity where undefined."""
    x = np.asarray(coords, dtype=np.float64)
    frames = np.tile(np.eye(3), (len(x), 1, 1))
    for i in range(1, len(x) - 1):
        try:
            frames[i] = orientation_frames(x[i - 1, CA], x[i, CA], x[i + 1, CA])
        except FrameError:
            pass
    return frames


def soft_frames(prev, cur, nxt, eps: float = RECON_EPS) -> ad.Tensor:
    """Differentiable frames (rows, 3, 3) with smooth normalization.

    Degenerate neighbourhoods yield near-zero columns instead of failing.
    """
    u1 = ad.normalize_rows(ad.sub(cur, prev), eps)
    u2 = ad.normalize_rows(ad.sub(nxt, cur), eps)
    b = ad.normalize_rows(u1 - u2, eps)
    n = ad.normalize_rows(ad.cross3(u1, u2), eps)
    return ad.stack([b, n, ad.cross3(b, n)], axis=-1)


def local_offsets(internal) -> ad.Tensor:
    """Per-track placement offsets (rows, 3 tracks, 3) in the NeRF local basis."""
    s = ad.reshape(internal, (-1, 3, 3))
    r = s[:, :, R]
    a = s[:, :, ALPHA]
    g = s[:, :, GAMMA]
    ra = r * ad.sin(a)
    return ad.stack([r * ad.cos(a), ra * ad.cos(g), ra * ad.sin(g)], axis=-1)


def nerf_chain(offsets: list, seeds, eps: float = RECON_EPS) -> list:
    """Extend chains one atom per step.

    ``seeds`` is a sequence (A, B, C) of (rows, 3) positions; ``offsets`` a list
    of (rows, 3) local displacements (along C-B, in-plane normal, plane normal).
    Returns one (rows, 3) position per step.
    """
    A, B, Cc = seeds
    out = []
    for d in offsets:
        bc = ad.normalize_rows(ad.sub(Cc, B), eps)
        nrm = ad.normalize_rows(ad.cross3(ad.sub(B, A), bc), eps)
        basis = ad.stack([bc, ad.cross3(nrm, bc), nrm], axis=-1)
        D = ad.add(Cc, ad.reshape(ad.matmul(basis, ad.reshape(d, (-1, 3, 1))), (-1, 3)))
        out.append(D)
        A, B, Cc = B, Cc, D
    return out


def reconstruct_tensor(internal, anchors, eps: float = RECON_EPS) -> ad.Tensor:
    """Differentiable placement of residues (all three tracks) from internal coords.

    ``internal`` is (m, 9) in :func:`placement_coords` layout, or (B, m, 9) for a
    batch of equal-length chains; ``anchors`` is (3 seeds, 3 tracks, 3) or
    (B, 3, 3, 3). Returns (m, 3, 3) or (B, m, 3, 3).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    batched = anchors.ndim == 4
    if not batched:
        anchors = anchors[None]
    if anchors.shape[1:] != (3, 3, 3):
        raise GeometryError(f"anchors must be (3, 3, 3) per chain, got {anchors.shape}")
    B = anchors.shape[0]
    internal = ad.as_tensor(internal)
    m = internal.shape[-2]
    off = ad.reshape(local_offsets(ad.reshape(internal, (B * m, 9))), (B, m, 3, 3))
    steps = [ad.reshape(off[:, j], (B * 3, 3)) for j in range(m)]
    seeds = [anchors[:, k].reshape(B * 3, 3) for k in range(3)]
    placed = ad.stack(nerf_chain(steps, seeds, eps), axis=0)  # (m, B*3, 3)
    out = ad.transpose(ad.reshape(placed, (m, B, 3, 3)), (1, 0, 2, 3))
    return out if batched else ad.reshape(out, (m, 3, 3))


def reconstruct_cartesian(features, anchors, eps: float = 0.0) -> np.ndarray:
    """Rebuild backbone positions from internal coordinates and three seed residues.

    ``features`` is either a (m, 9) placement array or the
    :class:`SpatialFeatures` of a chain whose first three residues are the
    anchors; in the latter case residues 3.. are rebuilt. Returns (m, 3, 3).
    """
    if isinstance(features, SpatialFeatures):
        f = features.values.reshape(-1, 3, 3)
        ok = features.valid.reshape(-1, 3, 3)
        L = len(f)
        if L < 4:
            raise GeometryError("need 3 anchor residues plus at least one to place")
        need_ok = ok[2:-1, :, R].all() and ok[2:-1, :, ALPHA].all() and ok[1:-2, :, GAMMA].all()
        if not need_ok:
            raise GeometryError("invalid-flagged features inside the reconstructed span")
        internal = np.empty((L - 3, 3, 3))
        internal[:, :, R] = f[2:-1, :, R]
        internal[:, :, ALPHA] = f[2:-1, :, ALPHA]
        internal[:, :, GAMMA] = f[1:-2, :, GAMMA]
        internal = internal.reshape(-1, 9)
    else:
        internal = np.asarray(features, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if not np.isfinite(anchors).all():
        raise GeometryError("non-finite anchors")
    return reconstruct_tensor(internal, anchors, eps).value


def kabsch_rotation(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing |R p + t - q| over paired points."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise GeometryError(f"point sets differ in shape: {P.shape} vs {Q.shape}")
    if P.ndim != 2 or P.shape[1] != 3 or len(P) == 0:
        raise GeometryError("need a non-empty (n, 3) point set")
    pc, qc = P.mean(0), Q.mean(0)
    H = (P - pc).T @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    Rm = Vt.T @ D @ U.T
    return Rm, qc - Rm @ pc


def kabsch_rmsd(P, Q) -> float:
    Rm, t = kabsch_rotation(P, Q)
    diff = np.asarray(P) @ Rm.T + t - np.asarray(Q)
    return float(np.sqrt(max((diff * diff).sum(-1).mean(), 0.0)))
