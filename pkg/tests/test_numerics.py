import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invprop.numerics import (
    DualVector,
    IntegratorConfig,
    NonFiniteDynamics,
    StepError,
    dual_jacobian,
    finite_difference_jacobian,
    integrate_step,
    integrate_with_hook,
)

from oracles import central_jacobian, rel_err


def test_dual_arithmetic_matches_finite_differences():
    A = np.array([[1.0, -2.0], [0.5, 3.0]])

    def fn(x):
        y = A @ x
        return y * y + 2.0 * x - (x**3).apply(np.tanh, lambda s: 1 - np.tanh(s) ** 2)

    def plain(x):
        y = A @ x
        return y * y + 2.0 * x - np.tanh(x**3)

    x = np.array([0.3, -0.7])
    assert rel_err(dual_jacobian(fn, x), central_jacobian(plain, x)) < 1e-8


def test_dual_rejects_mismatched_seeds():
    a = DualVector.seed(np.ones(2))
    b = DualVector.constant(np.ones(2), 3)
    with pytest.raises(ValueError):
        a + b


def test_integrator_config_steps_and_grid():
    cfg = IntegratorConfig("rk4", 0.025, 24.975)
    assert cfg.n_steps == 999
    assert cfg.grid()[-1] == pytest.approx(24.975)
    with pytest.raises(ValueError):
        IntegratorConfig("midpoint", 0.1, 1.0)
    with pytest.raises(ValueError):
        IntegratorConfig("euler", -0.1, 1.0)


@pytest.mark.parametrize("scheme,order", [("euler", 1), ("rk4", 4)])
def test_convergence_order_on_linear_decay(scheme, order):
    # x' = -x has x(1) = e^-1; halving dt divides the error by 2^order
    errs = []
    for dt in (0.1, 0.05):
        x = np.array([1.0])
        for _ in range(int(round(1 / dt))):
            x = integrate_step(lambda v: -v, x, dt, scheme)
        errs.append(abs(x[0] - np.exp(-1)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(order, abs=0.15)


def test_hook_runs_before_each_step_and_records():
    seen = []

    def hook(i, t, x):
        seen.append((i, t))
        return i if i % 2 == 0 else None

    traj = integrate_with_hook(lambda v: -v, np.ones(1), IntegratorConfig("euler", 0.1, 0.5), hook)
    assert [i for i, _ in seen] == [0, 1, 2, 3, 4]
    assert traj.records == [0, 2, 4]
    assert len(traj) == 6


def test_non_finite_field_is_reported_with_step():
    cfg = IntegratorConfig("euler", 0.1, 1.0)
    with pytest.raises(StepError) as info:
        integrate_with_hook(lambda v: v * np.inf if v[0] > 1.2 else v, np.ones(1), cfg)
    assert isinstance(info.value.__cause__, NonFiniteDynamics)
    assert info.value.step > 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_fd_jacobian_of_linear_map_is_exact(xs):
    A = np.arange(9.0).reshape(3, 3) - 4
    J = finite_difference_jacobian(lambda v: A @ v, np.array(xs))
    assert np.allclose(J, A, atol=1e-8)
