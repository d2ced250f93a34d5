import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdrode import autodiff as ad
from cdrode import ode
from cdrode.ode import SolverConfig


def decay(t, z):
    return -z


def test_heun_decay_matches_per_step_factor():
    zT = ode.integrate(decay, np.array([1.0]), SolverConfig(t_end=1.0, steps=10)).final
    assert abs(zT[0] - (1 - 0.1 + 0.005) ** 10) < 1e-14
    assert abs(zT[0] - 0.36854) < 1e-5


@pytest.mark.parametrize("method", ["heun_fixed", "rk4_fixed", "heun_adaptive", "euler_fixed"])
def test_constant_dynamics(method):
    z0 = np.array([[1.5, -2.0], [0.25, 3.0]])
    traj = ode.integrate(lambda t, z: np.zeros_like(z), z0, SolverConfig(method=method, t_end=7.0, steps=9))
    np.testing.assert_array_equal(traj.final, z0)
    c = np.array([[0.5, -0.25], [2.0, 1.0]])
    traj = ode.integrate(lambda t, z: c, z0, SolverConfig(method=method, t_end=8.0, steps=16))
    np.testing.assert_allclose(traj.final, z0 + 8.0 * c, rtol=0, atol=1e-12)


def test_trajectory_shape():
    z0 = np.array([2.0])
    traj = ode.integrate(decay, z0, SolverConfig(t_end=2.0, steps=8))
    assert len(traj) == 9 and traj.t[0] == 0 and traj.t[-1] == 2.0
    assert np.all(np.diff(traj.t) > 0)
    np.testing.assert_array_equal(traj.z[0], z0)


@pytest.mark.parametrize("method, order, tol", [("heun_fixed", 2.0, 0.1), ("rk4_fixed", 4.0, 0.2), ("euler_fixed", 1.0, 0.1)])
def test_convergence_orders(method, order, tol):
    est = ode.convergence_order(decay, np.array([1.0]), lambda t: np.exp(-t), method)
    assert abs(est - order) < tol


def test_convergence_order_refuses_noise_floor():
    with pytest.raises(ode.SolverError):
        ode.convergence_order(lambda t, z: np.ones_like(z), np.zeros(1), lambda t: np.array([t]), "heun_fixed")


@given(st.integers(1, 8), st.sampled_from(["heun_fixed", "rk4_fixed", "euler_fixed"]), st.integers(0, 1000))
def test_split_horizon_is_bit_identical(half, method, seed):
    A = np.random.default_rng(seed).normal(size=(3, 3)) * 0.3
    z0 = np.random.default_rng(seed + 1).normal(size=3)

    def f(t, z):
        return A @ z

    T = 4.0
    whole = ode.integrate(f, z0, SolverConfig(method=method, t_end=T, steps=2 * half)).final
    cfg = SolverConfig(method=method, t_end=T, steps=half)
    mid = ode.integrate(f, z0, cfg, t0=0.0, t1=T / 2).final
    end = ode.integrate(f, mid, cfg, t0=T / 2, t1=T).final
    assert whole.tobytes() == end.tobytes()


@given(st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.integers(0, 1000))
def test_adaptive_accepted_errors_within_tolerance(rtol, atol, seed):
    A = np.random.default_rng(seed).normal(size=(4, 4))
    cfg = SolverConfig(method="heun_adaptive", t_end=3.0, rtol=rtol, atol=atol, max_steps=100000)
    traj = ode.integrate(lambda t, z: np.tanh(A @ z) - 0.5 * z, np.ones(4), cfg)
    assert traj.accepted
    for (h, err, tol), z in zip(traj.accepted, traj.z[:-1]):
        assert err <= tol
        assert tol == atol + rtol * np.abs(z).max()
    assert traj.t[-1] == 3.0


def test_adaptive_accuracy_and_rejections():
    cfg = SolverConfig(method="heun_adaptive", t_end=5.0, rtol=1e-6, atol=1e-8, max_steps=100000, first_step=2.0)
    traj = ode.integrate(decay, np.array([1.0]), cfg)
    assert traj.rejected > 0
    assert abs(traj.final[0] - np.exp(-5.0)) < 1e-4


def test_adaptive_step_budget():
    cfg = SolverConfig(method="heun_adaptive", t_end=10.0, rtol=1e-9, atol=1e-9, max_steps=20)
    with pytest.raises(ode.MaxStepsExceeded):
        ode.integrate(lambda t, z: np.sin(10 * z) + 1.0, np.zeros(2), cfg)


def test_non_finite_guard_names_node():
    def blow(t, z):
        out = np.zeros_like(z)
        out[2, 0] = np.inf
        return out

    with pytest.raises(ode.NonFiniteState, match="node index 2"):
        ode.integrate(blow, np.zeros((4, 2)), SolverConfig(t_end=1.0, steps=2))


def test_config_validation():
    for bad in [dict(method="dopri5"), dict(t_end=0.0), dict(rtol=0.0), dict(steps=0)]:
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    assert not SolverConfig(method="heun_adaptive").fixed


def scalar_growth(t, z, p):
    return z * ad.broadcast_to(p["theta"], z.shape)


def test_grad_scalar_growth_matches_finite_differences():
    cfg = SolverConfig(t_end=1.0, steps=10)
    theta = 0.7
    loss, grads, dz0 = ode.integrate_with_grad(scalar_growth, np.ones(1), {"theta": np.array([theta])}, cfg, lambda zT, _: ad.sum_(zT))
    # discrete map: z_T = (1 + h theta + (h theta)^2 / 2)^n
    h, n = 0.1, 10

    def discrete(th):
        return (1 + h * th + (h * th) ** 2 / 2) ** n

    assert abs(loss - discrete(theta)) < 1e-13
    eps = 1e-6
    fd = (discrete(theta + eps) - discrete(theta - eps)) / (2 * eps)
    assert abs(grads["theta"][0] - fd) / abs(fd) < 1e-6
    assert abs(dz0[0] - discrete(theta)) < 1e-12


def test_loss_independent_of_params_gives_zero_gradient():
    cfg = SolverConfig(t_end=1.0, steps=4)
    _, grads, _ = ode.integrate_with_grad(
        lambda t, z, p: ad.scale(z, -1.0), np.ones(3), {"w": np.ones((2, 2))}, cfg, lambda zT, _: ad.sum_(zT)
    )
    np.testing.assert_array_equal(grads["w"], 0.0)


@pytest.mark.parametrize("method", ["heun_fixed", "rk4_fixed"])
def test_discrete_gradients_match_finite_differences(method):
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 3)) * 0.5
    z0 = rng.normal(size=(2, 3))
    cfg = SolverConfig(method=method, t_end=2.0, steps=7)

    def f(t, z, p):
        return ad.tanh(ad.matmul(z, p["W"])) - ad.scale(z, 0.1 * t)

    def loss_fn(zT, traj):
        return ad.sum_(zT * zT) + ad.scale(ad.sum_(traj.z[3]), 0.5)

    _, grads, dz0 = ode.integrate_with_grad(f, z0, {"W": W}, cfg, loss_fn)

    def objective(Wt, zt):
        traj = ode.integrate_tensor(lambda t, z: f(t, z, {"W": Wt}), zt, cfg)
        return loss_fn(traj.final, traj)

    num_W, num_z = ad.numeric_grad(objective, [W, z0], step=1e-6)
    assert ad.relative_error(grads["W"], num_W).max() < 1e-6
    assert ad.relative_error(dz0, num_z).max() < 1e-6


def test_adaptive_gradients_rejected():
    cfg = SolverConfig(method="heun_adaptive")
    with pytest.raises(ode.SolverError):
        ode.integrate_with_grad(scalar_growth, np.ones(1), {"theta": np.ones(1)}, cfg, lambda zT, _: ad.sum_(zT))
