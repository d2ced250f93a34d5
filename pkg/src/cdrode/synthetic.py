"""Ideal-geometry toy backbones and complexes for tests, scripts and the bundled corpus."""

from __future__ import annotations

import numpy as np

from .graph import ALPHABET

# ideal peptide geometry (Angstrom, radians)
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
ANGLE_N_CA_C = np.deg2rad(111.2)
ANGLE_CA_C_N = np.deg2rad(116.2)
ANGLE_C_N_CA = np.deg2rad(121.7)
OMEGA = np.pi

# (phi, psi) basins in degrees
BASINS = {"helix": (-63.0, -43.0), "sheet": (-120.0, 130.0), "loop": (-80.0, 150.0)}


def place_atom(a, b, c, bond: float, angle: float, torsion: float) -> np.ndarray:
    """Position of d with |cd| = bond, angle(b, c, d) = angle, dihedral(a, b, c, d) = torsion."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d = np.array([-bond * np.cos(angle), bond * np.sin(angle) * np.cos(torsion), bond * np.sin(angle) * np.sin(torsion)])
    return c + d[0] * bc + d[1] * m + d[2] * n


def ideal_backbone(phi, psi) -> np.ndarray:
    """Backbone (L, 3, 3) built from per-residue torsions; phi[0] and psi[-1] are unused."""
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    L = len(phi)
    atoms = [
        np.zeros(3),
        np.array([BOND_N_CA, 0.0, 0.0]),
    ]
    a = np.pi - ANGLE_N_CA_C
    atoms.append(atoms[1] + BOND_CA_C * np.array([np.cos(a), np.sin(a), 0.0]))
    for i in range(1, L):
        n = place_atom(atoms[-3], atoms[-2], atoms[-1], BOND_C_N, ANGLE_CA_C_N, psi[i - 1])
        atoms.append(n)
        ca = place_atom(atoms[-3], atoms[-2], atoms[-1], BOND_N_CA, ANGLE_C_N_CA, OMEGA)
        atoms.append(ca)
        c = place_atom(atoms[-3], atoms[-2], atoms[-1], BOND_CA_C, ANGLE_N_CA_C, phi[i])
        atoms.append(c)
    return np.array(atoms).reshape(L, 3, 3)


def random_torsions(L: int, rng, kinds=("helix", "sheet", "loop"), jitter_deg: float = 12.0):
    kind = rng.choice(list(kinds), size=L)
    base = np.array([BASINS[k] for k in kind])
    t = base + rng.normal(0.0, jitter_deg, size=(L, 2))
    return np.deg2rad(t[:, 0]), np.deg2rad(t[:, 1])


def random_backbone(L: int, rng) -> np.ndarray:
    phi, psi = random_torsions(L, rng)
    return ideal_backbone(phi, psi)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_sequence(L: int, rng) -> str:
    return "".join(rng.choice(list(ALPHABET), size=L))


def toy_complex(rng, heavy_len: int = 30, cdr_start: int = 10, cdr_len: int = 8, antigen_len: int = 6, gap: float = 5.0):
    """A heavy chain and an antigen fragment placed facing the CDR.

    Returns ``(heavy_seq, heavy_xyz, antigen_seq, antigen_xyz)``. The antigen
    is a short rigid chain pushed outward from the CDR centroid until no antigen
    CA is closer than ``gap`` Angstrom to any heavy-chain CA.
    """
    rng = np.random.default_rng(rng)
    heavy = random_backbone(heavy_len, rng)
    ag = random_backbone(antigen_len, rng)
    ag = (ag - ag.reshape(-1, 3).mean(0)) @ random_rotation(rng).T
    cdr = heavy[cdr_start : cdr_start + cdr_len, 1]
    centre = heavy[:, 1].mean(0)
    out = cdr.mean(0) - centre
    out /= max(np.linalg.norm(out), 1e-9)
    ag = ag + cdr.mean(0)
    while np.linalg.norm(ag[:, None, 1] - heavy[None, :, 1], axis=-1).min() < gap:
        ag = ag + 0.5 * out
    return random_sequence(heavy_len, rng), heavy, random_sequence(antigen_len, rng), ag
