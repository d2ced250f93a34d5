"""Fixed-step and adaptive explicit integrators with exact gradients through the discrete steps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad

METHODS = ("heun_fixed", "rk4_fixed", "heun_adaptive", "euler_fixed")


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class NonFiniteState(SolverError, FloatingPointError):
    pass


@dataclass
class SolverConfig:
    method: str = "heun_fixed"
    t_end: float = 200.0
    steps: int = 40
    rtol: float = 1e-3
    atol: float = 1e-4
    max_steps: int = 1000
    first_step: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    @property
    def fixed(self) -> bool:
        return self.method != "heun_adaptive"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    t: list
    z: list
    accepted: list = field(default_factory=list)  # (h, err, tol) per accepted adaptive step
    rejected: int = 0

    @property
    def final(self):
        return self.z[-1]

    def __len__(self) -> int:
        return len(self.t)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _guard(z, t: float) -> None:
    v = _value(z)
    bad = ~np.isfinite(v)
    if bad.any():
        row = int(np.argwhere(bad)[0][0]) if v.ndim else 0
        raise NonFiniteState(f"non-finite state at t={t:.6g}, first offending node index {row}")


def _axpy(z, h: float, k):
    # z + h * k, on tensors or arrays
    if isinstance(z, ad.Tensor) or isinstance(k, ad.Tensor):
        return ad.add(z, ad.scale(k, h))
    return z + h * k


def _combo(z, h: float, ks, ws):
    acc = None
    for k, w in zip(ks, ws):
        term = ad.scale(k, w) if isinstance(k, ad.Tensor) else w * k
        acc = term if acc is None else acc + term
    return _axpy(z, h, acc)


def _call(f, t, z, tensor: bool):
    out = f(t, z)
    if tensor:
        return ad.as_tensor(out)
    return _value(out)


def step_euler(f, t, z, h, tensor=False):
    return _axpy(z, h, _call(f, t, z, tensor))


def step_heun(f, t, z, h, tensor=False):
    k1 = _call(f, t, z, tensor)
    k2 = _call(f, t + h, _axpy(z, h, k1), tensor)
    return _combo(z, h, (k1, k2), (0.5, 0.5))


def step_rk4(f, t, z, h, tensor=False):
    k1 = _call(f, t, z, tensor)
    k2 = _call(f, t + 0.5 * h, _axpy(z, 0.5 * h, k1), tensor)
    k3 = _call(f, t + 0.5 * h, _axpy(z, 0.5 * h, k2), tensor)
    k4 = _call(f, t + h, _axpy(z, h, k3), tensor)
    return _combo(z, h, (k1, k2, k3, k4), (1 / 6, 1 / 3, 1 / 3, 1 / 6))


STEPPERS = {"euler_fixed": step_euler, "heun_fixed": step_heun, "rk4_fixed": step_rk4}


def _fixed(f, z0, cfg: SolverConfig, tensor: bool, t0: float = 0.0, t1: float | None = None) -> Trajectory:
    t1 = cfg.t_end if t1 is None else t1
    h = (t1 - t0) / cfg.steps
    step = STEPPERS[cfg.method]
    z = z0
    ts, zs = [t0], [z0]
    for k in range(cfg.steps):
        t = t0 + k * h
        z = step(f, t, z, h, tensor)
        _guard(z, t + h)
        ts.append(t0 + (k + 1) * h)
        zs.append(z)
    return Trajectory(ts, zs)


def _adaptive(f, z0, cfg: SolverConfig) -> Trajectory:
    T = cfg.t_end
    t = 0.0
    z = np.array(z0, dtype=np.float64)
    h = cfg.first_step or T / cfg.steps
    traj = Trajectory([0.0], [z.copy()])
    n = 0
    while t < T:
        if n >= cfg.max_steps:
            raise MaxStepsExceeded(f"adaptive solver exceeded {cfg.max_steps} steps at t={t:.6g}")
        n += 1
        h = min(h, T - t)
        k1 = _value(f(t, z))
        euler = z + h * k1
        _guard(euler, t + h)
        k2 = _value(f(t + h, euler))
        heun = z + 0.5 * h * (k1 + k2)
        _guard(heun, t + h)
        err = float(np.abs(heun - euler).max()) if z.size else 0.0
        tol = cfg.atol + cfg.rtol * (float(np.abs(z).max()) if z.size else 0.0)
        if err <= tol:
            t = T if T - t - h <= 1e-12 * T else t + h
            z = heun
            traj.t.append(t)
            traj.z.append(z.copy())
            traj.accepted.append((h, err, tol))
        else:
            traj.rejected += 1
        factor = 5.0 if err == 0 else 0.9 * (tol / err) ** 0.5
        h = h * min(5.0, max(0.2, factor))
    return traj


def integrate(f: Callable, z0, config: SolverConfig | None = None, t0: float = 0.0, t1: float | None = None) -> Trajectory:
    """Integrate dz/dt = f(t, z) from ``t0`` to ``t1`` (default ``config.t_end``) on plain arrays.

    ``f`` may return arrays or tensors; only values are kept.
    """
    cfg = config or SolverConfig()
    z0 = np.array(_value(z0), dtype=np.float64)
    _guard(z0, t0)
    if cfg.fixed:
        return _fixed(f, z0, cfg, tensor=False, t0=t0, t1=t1)
    if t0 != 0.0 or (t1 is not None and t1 != cfg.t_end):
        raise SolverError("adaptive integration runs over [0, t_end]")
    return _adaptive(f, z0, cfg)


def integrate_tensor(f: Callable, z0, config: SolverConfig) -> Trajectory:
    """Fixed-step integration with every stage recorded on the tape of ``z0`` / ``f``."""
    if not config.fixed:
        raise SolverError("gradients require a fixed-step method; adaptive stepping is not differentiated")
    z0 = ad.as_tensor(z0)
    _guard(z0, 0.0)
    return _fixed(f, z0, config, tensor=True)


def integrate_with_grad(f: Callable, z0, params: dict, config: SolverConfig, loss_fn: Callable):
    """Loss of the discrete solution and its exact gradients.

    ``f(t, z, params)`` receives tensors; ``loss_fn(z_T, trajectory)`` returns a
    scalar tensor. Returns ``(loss, {name: dL/dparam}, dL/dz0)``.
    """
    if not config.fixed:
        raise SolverError("gradients require a fixed-step method; adaptive stepping is not differentiated")
    tape = ad.Tape()
    leaves = {k: tape.leaf(np.array(v, dtype=np.float64), k) for k, v in params.items()}
    z = tape.leaf(np.array(_value(z0), dtype=np.float64), "z0")
    traj = integrate_tensor(lambda t, s: f(t, s, leaves), z, config)
    loss = ad.as_tensor(loss_fn(traj.final, traj))
    if not loss.tracked:
        return float(loss.value), {k: np.zeros_like(v.value) for k, v in leaves.items()}, np.zeros_like(z.value)
    names = list(leaves)
    grads = ad.backward(tape, loss, [leaves[k] for k in names] + [z])
    return float(loss.value), dict(zip(names, grads[:-1])), grads[-1]


def convergence_order(f: Callable, z0, solution: Callable, method: str, t_end: float = 1.0, steps: int = 20) -> float:
    """log2(err_h / err_{h/2}) at ``t_end`` against the closed-form ``solution(t)``."""
    exact = np.asarray(solution(t_end), dtype=np.float64)
    errs = []
    for n in (steps, 2 * steps):
        cfg = SolverConfig(method=method, t_end=t_end, steps=n)
        zT = integrate(f, z0, cfg).final
        errs.append(float(np.abs(zT - exact).max()))
    noise = 64 * np.finfo(float).eps * max(1.0, float(np.abs(exact).max()))
    if min(errs) <= noise:
        raise SolverError("error is at machine precision; order cannot be estimated")
    return float(np.log2(errs[0] / errs[1]))
