import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ardistill.autodiff import NumericError, Tensor
from ardistill.diffusion import (
    FOUR_STEP,
    ONE_STEP,
    TWO_STEP,
    DiffusionState,
    FlowBatch,
    StepSchedule,
    TimeGrid,
    alpha,
    flow_matching_loss,
    forward_diffuse,
    generator_transform,
    integrate,
    pf_ode_solve,
    pf_ode_step,
    sigma,
    velocity_target,
)
from ardistill.metrics import solver_order_check, standard_normal_path, standard_normal_velocity

finite = st.floats(-10, 10, allow_nan=False)
vec = hnp.arrays(np.float64, 3, elements=finite)


def test_noise_schedule_endpoints():
    assert (alpha(0.0), sigma(0.0), alpha(1.0), sigma(1.0)) == (1.0, 0.0, 0.0, 1.0)


def test_time_grid():
    g = TimeGrid()
    assert g.K == 48 and g.dt == 1 / 48
    assert g.points[0] == 0.0 and g.points[-1] == 1.0
    assert np.all(np.diff(g.points) > 0)
    assert g.descending()[0] == 1.0 and g.descending()[-1] == 0.0
    idx, t = g.sample(np.random.default_rng(0), 10_000)
    assert idx.min() == 1 and idx.max() == 48
    np.testing.assert_array_equal(t, idx / 48)
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_step_schedule_presets():
    assert FOUR_STEP.times == (1.0, 0.9375, 0.8333, 0.625)
    assert TWO_STEP.times == (1.0, 0.8333)
    assert ONE_STEP.times == (1.0,)
    assert StepSchedule.preset("two_step") == TWO_STEP
    with pytest.raises(ValueError, match="unknown schedule"):
        StepSchedule.preset("three_step")


@pytest.mark.parametrize("times", [(), (0.9, 0.5), (1.0, 1.0), (1.0, 0.5, 0.7), (1.0, 0.0)])
def test_step_schedule_invalid(times):
    with pytest.raises(ValueError):
        StepSchedule(times)


def test_diffusion_state_checks():
    with pytest.raises(ValueError):
        DiffusionState(np.zeros(2), 1.5)
    with pytest.raises(NumericError):
        DiffusionState(np.array([np.nan]), 0.5)


def test_forward_diffuse_examples():
    assert forward_diffuse(np.array([2.0]), np.array([0.0]), 0.25).tolist() == [1.5]
    x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.4])
    assert np.array_equal(forward_diffuse(x0, eps, 0.0), x0)
    assert np.array_equal(forward_diffuse(x0, eps, 1.0), eps)


def test_forward_diffuse_errors():
    with pytest.raises(ValueError, match="shape"):
        forward_diffuse(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(2), np.zeros(2), 1.5)


def test_forward_diffuse_per_row_times():
    x0, eps = np.ones((3, 2)), np.zeros((3, 2))
    out = forward_diffuse(x0, eps, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_array_equal(out[:, 0], [1.0, 0.5, 0.0])


def test_velocity_target_examples():
    assert velocity_target(np.array([1.0]), np.array([3.0])).tolist() == [2.0]
    assert velocity_target(np.array([0.7, 1.0]), np.array([0.7, 1.0])).tolist() == [0.0, 0.0]
    assert velocity_target(np.array([-1.0, 2.0]), np.array([0.0, 0.0])).tolist() == [1.0, -2.0]
    with pytest.raises(ValueError):
        velocity_target(np.zeros(2), np.zeros(1))


def test_generator_transform_examples():
    assert generator_transform(np.array([1.0]), 1.0, np.array([1.0])).tolist() == [0.0]
    np.testing.assert_allclose(generator_transform(np.array([0.5]), 0.5, np.array([-0.2])), [0.6])
    with pytest.raises(ValueError):
        generator_transform(np.zeros(2), 0.5, np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_generator_boundary_identity(x, v):
    assert np.array_equal(generator_transform(x, 0.0, v), x)


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.floats(0.0, 1.0))
def test_generator_inverts_forward_process(x0, eps, t):
    # with the exact velocity eps - x0, G recovers x0 from any x_t
    x_t = forward_diffuse(x0, eps, t)
    np.testing.assert_allclose(generator_transform(x_t, t, velocity_target(x0, eps)), x0, atol=1e-9)


def test_generator_transform_on_tensors_is_differentiable():
    v = Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
    out = generator_transform(np.array([[1.0, 1.0]]), 0.25, v)
    assert isinstance(out, Tensor)
    from ardistill.autodiff import sum_all

    sum_all(out).backward()
    assert v.grad.tolist() == [[-0.25, -0.25]]


class _ConstModel:
    def __init__(self, out):
        self.out = out

    def __call__(self, x_t, ctx, t, unit):
        return Tensor(self.out)


def test_flow_matching_loss_examples():
    v = np.random.default_rng(0).standard_normal((5, 2))
    batch = FlowBatch(np.zeros((5, 2)), np.zeros((5, 0)), np.full(5, 0.5), np.zeros(5, int), v)
    assert flow_matching_loss(_ConstModel(v), batch).item() == 0.0
    assert abs(flow_matching_loss(_ConstModel(v + 0.3), batch).item() - 0.09) < 1e-12
    empty = FlowBatch(np.zeros((0, 2)), np.zeros((0, 0)), np.zeros(0), np.zeros(0, int), np.zeros((0, 2)))
    with pytest.raises(ValueError, match="empty"):
        flow_matching_loss(_ConstModel(v), empty)


def test_pf_ode_step_examples():
    s = pf_ode_step(lambda x, t: np.zeros_like(x), DiffusionState(np.array([1.0, 2.0]), 1.0), 0.5)
    assert s.x.tolist() == [1.0, 2.0] and s.t == 0.5
    s = pf_ode_step(lambda x, t: np.full_like(x, 0.25), DiffusionState(np.array([1.0]), 1.0), 0.0)
    assert s.x.tolist() == [0.75]


def test_pf_ode_step_errors():
    st0 = DiffusionState(np.array([1.0]), 0.5)
    with pytest.raises(ValueError, match="backwards"):
        pf_ode_step(lambda x, t: x, st0, 0.5)
    with pytest.raises(NumericError):
        pf_ode_step(lambda x, t: x * np.nan, st0, 0.25)
    with pytest.raises(ValueError, match="solver"):
        pf_ode_step(lambda x, t: x, st0, 0.25, method="rk4")


def test_pf_ode_solve_standard_normal():
    traj = pf_ode_solve(standard_normal_velocity, np.array([1.0]), list(np.linspace(1, 0, 4097)))
    assert abs(traj[-1].x[0] - 1.0) < 1e-2
    mid = [s for s in traj if s.t == 0.5][0]
    assert abs(mid.x[0] - np.sqrt(0.5)) < 1e-2


def test_pf_ode_solve_zero_field():
    traj = pf_ode_solve(lambda x, t: np.zeros_like(x), np.array([0.3, -0.2]), TimeGrid(8).descending())
    assert len(traj) == 9
    assert all(np.array_equal(s.x, traj[0].x) for s in traj)


@pytest.mark.parametrize("grid", [[1.0], [1.0, 0.5], [0.9, 0.0], [1.0, 0.6, 0.7, 0.0]])
def test_pf_ode_solve_malformed_grid(grid):
    with pytest.raises(ValueError):
        pf_ode_solve(standard_normal_velocity, np.zeros(1), grid)


def test_integrate_matches_closed_form():
    x1 = np.array([[1.3, -0.4]])
    np.testing.assert_allclose(integrate(standard_normal_velocity, x1, 1.0, 0.3, 400), standard_normal_path(x1, 0.3), atol=1e-6)
    assert np.array_equal(integrate(standard_normal_velocity, x1, 0.4, 0.4, 10), x1)


def test_solver_ratios_per_halving():
    res = solver_order_check()
    assert all(1.8 <= r <= 2.2 for r in res["euler"]["ratios"])
    assert all(3.5 <= r <= 4.5 for r in res["heun"]["ratios"])


def test_solver_errors_non_increasing_under_refinement():
    for m in ("euler", "heun"):
        errs = solver_order_check(methods=(m,), Ks=(6, 12, 24, 48, 96))[m]["errors"]
        assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_marginal_preservation():
    rng = np.random.default_rng(1)
    n = 100_000
    x0 = integrate(standard_normal_velocity, rng.standard_normal((n, 1)), 1.0, 0.0, 200, "heun")
    se_mean, se_var = 1 / np.sqrt(n), np.sqrt(2 / n)
    assert abs(x0.mean()) < 3 * se_mean
    assert abs(x0.var() - 1) < 3 * se_var
