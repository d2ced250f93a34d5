"""Sequence cross-entropy plus von Mises angle and Gaussian radius likelihoods."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .graph import N_AA, ComplexGraph, GraphBatch

MODES = ("codesign", "sequence_only")
ANGLE_COLS = np.array([geo.column(t, k) for t in range(3) for k in (geo.ALPHA, geo.GAMMA)])
RADIUS_COLS = np.array([geo.column(t, geo.R) for t in range(3)])
LN_2PI = float(np.log(2 * np.pi))


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lam: float = 0.8
    kappa: float = 10.0
    sigma_r2: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise LossError("lambda must be non-negative")
        if not self.kappa > 0:
            raise LossError("kappa must be positive")
        if not self.sigma_r2 > 0:
            raise LossError("sigma_r^2 must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: float
    seq: float
    angle: float
    radius: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Truth:
    labels: np.ndarray  # (n,) alphabet indices
    internal: np.ndarray  # (n, 9) placement-layout internal coordinates
    weights: np.ndarray  # (n,) residue weights, 1 / (num_samples * residues_in_sample)

    @classmethod
    def from_graphs(cls, graphs) -> "Truth":
        if isinstance(graphs, ComplexGraph):
            graphs = [graphs]
        elif isinstance(graphs, GraphBatch):
            graphs = graphs.graphs
        graphs = list(graphs)
        for g in graphs:
            if g.labels is None:
                raise LossError("graph has no sequence labels")
        labels = np.concatenate([g.labels for g in graphs])
        internal = np.concatenate(
            [g.true_internal if g.true_internal is not None else np.full((g.m, 9), np.nan) for g in graphs]
        )
        weights = np.concatenate([np.full(g.m, 1.0 / (len(graphs) * g.m)) for g in graphs])
        return cls(labels.astype(np.intp), internal, weights)


def bessel_i0(kappa: float, rtol: float = 1e-16) -> float:
    """Modified Bessel function of the first kind, order 0, by its power series."""
    x = float(kappa)
    if abs(x) > 700:
        raise LossError("kappa too large for the series")
    q = 0.25 * x * x
    term, total, k = 1.0, 1.0, 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if term <= rtol * total and k > q ** 0.5:
            return total


def log_vm_normalizer(kappa: float) -> float:
    """ln(2 pi I0(kappa))."""
    return LN_2PI + float(np.log(bessel_i0(kappa)))


def _weighted_mean(per_residue, weights) -> ad.Tensor:
    return ad.sum_(per_residue * np.asarray(weights, dtype=np.float64))


def seq_loss(logits, labels, weights=None) -> ad.Tensor:
    """Cross-entropy of ``logits`` (n, 20) against ``labels``; plain mean unless ``weights`` given."""
    labels = np.asarray(labels)
    logits = ad.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] != N_AA:
        raise LossError(f"logits must be (n, {N_AA}), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise LossError("labels do not match logits")
    if labels.dtype.kind not in "iu" or labels.min(initial=0) < 0 or labels.max(initial=0) >= N_AA:
        raise LossError("label outside the amino-acid alphabet")
    n = len(labels)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    onehot = np.zeros((n, N_AA))
    onehot[np.arange(n), labels] = 1.0
    ce = -ad.sum_(ad.log_softmax_rows(logits) * onehot, axis=1)
    return _weighted_mean(ce, w)


def von_mises_nll(theta, theta_true, kappa: float) -> ad.Tensor:
    """Elementwise -[kappa cos(theta - theta_true) - ln(2 pi I0(kappa))]."""
    if not kappa > 0:
        raise LossError("kappa must be positive")
    theta = ad.as_tensor(theta)
    diff = ad.sub(theta, np.broadcast_to(np.asarray(theta_true, dtype=np.float64), theta.shape))
    return ad.add(ad.scale(ad.cos(diff), -float(kappa)), np.full(theta.shape, log_vm_normalizer(kappa)))


def radius_nll(r, r_true, sigma_r2: float) -> ad.Tensor:
    """Elementwise 0.5 ln(2 pi sigma^2) + (r - r_true)^2 / (2 sigma^2)."""
    if not sigma_r2 > 0:
        raise LossError("sigma_r^2 must be positive")
    r = ad.as_tensor(r)
    d = ad.sub(r, np.broadcast_to(np.asarray(r_true, dtype=np.float64), r.shape))
    const = 0.5 * float(np.log(2 * np.pi * sigma_r2))
    return ad.add(ad.scale(d * d, 0.5 / sigma_r2), np.full(r.shape, const))


def loss_terms(z_T, truth: Truth, config: LossConfig, mode: str = "codesign"):
    """Tensor-valued (total, seq, angle, radius)."""
    if mode not in MODES:
        raise LossError(f"unknown loss mode {mode!r}")
    z = ad.as_tensor(z_T)
    n = len(truth.labels)
    if z.shape != (n, N_AA + 9):
        raise LossError(f"prediction shape {z.shape} does not match truth ({n} residues)")
    seq = seq_loss(z[:, :N_AA], truth.labels, truth.weights)
    if mode == "sequence_only":
        zero = ad.Tensor(np.zeros(()))
        return seq, seq, zero, zero
    if not np.isfinite(truth.internal).all():
        raise LossError("structure truth missing")
    s = z[:, N_AA:]
    ang = von_mises_nll(s[:, ANGLE_COLS], truth.internal[:, ANGLE_COLS], config.kappa)
    rad = radius_nll(s[:, RADIUS_COLS], truth.internal[:, RADIUS_COLS], config.sigma_r2)
    angle = _weighted_mean(ad.sum_(ang, axis=1), truth.weights)
    radius = _weighted_mean(ad.sum_(rad, axis=1), truth.weights)
    total = seq + ad.scale(angle + radius, config.lam)
    return total, seq, angle, radius


def total_loss(z_T, truth, config: LossConfig | None = None, mode: str = "codesign") -> LossBreakdown:
    """Loss breakdown for the end state ``z_T`` (n, 29); ``truth`` is a Truth or graph(s)."""
    cfg = config or LossConfig()
    if not isinstance(truth, Truth):
        truth = Truth.from_graphs(truth)
    total, seq, angle, radius = loss_terms(z_T, truth, cfg, mode)
    s, a, r = float(seq.value), float(angle.value), float(radius.value)
    return LossBreakdown(total=s + cfg.lam * (a + r), seq=s, angle=a, radius=r)
