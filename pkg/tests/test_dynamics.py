"""Phase-space EM steps, simulation, and trajectory persistence."""

import numpy as np
import pytest

from phasebridge.dynamics import (
    PhaseBatch,
    SimulationDivergence,
    TimeGrid,
    TrajectoryCache,
    em_backward_step,
    em_forward_step,
    knot_times,
    load_cache,
    load_cache_any,
    load_cache_binary,
    save_cache,
    save_cache_binary,
    save_cache_csv,
    simulate,
)


def zero_policy(t, m):
    return np.zeros((m.shape[0], m.shape[1] // 2), dtype=np.float32)


def test_phase_batch_basics():
    pb = PhaseBatch(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert pb.x.shape == (1, 2)
    np.testing.assert_array_equal(pb.m, [[1.0, 2.0, 3.0, 4.0]])
    assert pb.batch_size == 1 and pb.dim == 2
    twin = pb.copy()
    twin.x[0, 0] = 99.0
    assert pb.x[0, 0] == 1.0
    with pytest.raises(ValueError):
        PhaseBatch(np.zeros((2, 3)), np.zeros((2, 2)))


def test_forward_step_zero_dt_is_identity():
    x = np.array([[0.4]])
    v = np.array([[-1.3]])
    x2, v2 = em_forward_step(x, v, np.array([[5.0]]), 0.7, 0.0, np.array([[2.0]]))
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(v2, v)


def test_forward_step_ballistic_arithmetic():
    x2, v2 = em_forward_step(
        np.array([[1.0]]), np.array([[2.0]]), np.array([[0.0]]), 0.2, 0.1,
        np.array([[0.0]]),
    )
    assert x2.item() == pytest.approx(1.2, abs=1e-15)
    assert v2.item() == 2.0


def test_forward_step_velocity_formula():
    # v' = dt*g*z + sqrt(dt)*g*eps = 0.01*0.2*1 + 0.1*0.2*0.5 = 0.012
    x2, v2 = em_forward_step(
        np.array([[0.7]]), np.array([[0.0]]), np.array([[1.0]]), 0.2, 0.01,
        np.array([[0.5]]),
    )
    assert x2.item() == 0.7
    assert v2.item() == pytest.approx(0.012, abs=1e-15)


def test_backward_step_examples():
    x1, v1 = em_backward_step(
        np.array([[1.2]]), np.array([[2.0]]), np.array([[0.0]]), 0.2, 0.0,
        np.array([[0.0]]),
    )
    np.testing.assert_array_equal(x1, [[1.2]])
    x1, v1 = em_backward_step(
        np.array([[1.2]]), np.array([[2.0]]), np.array([[0.0]]), 0.2, 0.1,
        np.array([[0.0]]),
    )
    assert x1.item() == pytest.approx(1.0, abs=1e-15)
    assert v1.item() == 2.0
    _, v1 = em_backward_step(
        np.array([[0.0]]), np.array([[0.0]]), np.array([[1.0]]), 0.2, 0.01,
        np.array([[0.0]]),
    )
    assert v1.item() == pytest.approx(0.002, abs=1e-18)


def test_backward_inverts_noiseless_uncontrolled_forward():
    # exact on integer states with a dyadic step
    x = np.arange(-4.0, 4.0).reshape(4, 2)
    v = np.arange(8.0, 0.0, -1.0).reshape(4, 2)
    zero = np.zeros_like(x)
    xf, vf = em_forward_step(x, v, zero, 0.5, 0.25, zero)
    xb, vb = em_backward_step(xf, vf, zero, 0.5, 0.25, zero)
    np.testing.assert_array_equal(xb, x)
    np.testing.assert_array_equal(vb, v)
    # and within a rounding error on generic float64 states
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (100, 3))
    v = rng.uniform(-1, 1, (100, 3))
    zero = np.zeros_like(x)
    xf, vf = em_forward_step(x, v, zero, 0.2, 0.1, zero)
    xb, vb = em_backward_step(xf, vf, zero, 0.2, 0.1, zero)
    np.testing.assert_allclose(xb, x, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(vb, v)


def test_position_update_is_control_and_noise_free():
    # exact on integer states with a dyadic step, whatever z and eps are
    x = np.arange(6.0).reshape(3, 2)
    v = np.arange(6.0, 0.0, -1.0).reshape(3, 2)
    ones = np.ones_like(x)
    x2, _ = em_forward_step(x, v, 17.0 * ones, 0.3, 0.25, -9.0 * ones)
    np.testing.assert_array_equal(x2 - x, 0.25 * v)
    # and at machine precision on generic states
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 2))
    v = rng.normal(size=(6, 2))
    z = rng.normal(size=(6, 2))
    eps = rng.normal(size=(6, 2))
    x2, _ = em_forward_step(x, v, z, 0.3, 0.05, eps)
    np.testing.assert_allclose(x2 - x, 0.05 * v, rtol=0, atol=1e-15)


def test_time_grid():
    grid = TimeGrid(0.0, 2.0, 4)
    assert grid.delta_t == 0.5
    np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_knot_times_stitches_segments():
    knots = knot_times([0.0, 1.0, 3.0], steps_per_segment=4)
    expected = np.concatenate(
        [np.linspace(0.0, 1.0, 5), np.linspace(1.0, 3.0, 5)[1:]]
    )
    np.testing.assert_array_equal(knots, expected)
    np.testing.assert_array_equal(knots[[0, 4, 8]], [0.0, 1.0, 3.0])
    with pytest.raises(ValueError):
        knot_times([0.0], 4)
    with pytest.raises(ValueError):
        knot_times([0.0, 1.0, 0.5], 4)
    with pytest.raises(ValueError):
        knot_times([0.0, 1.0], 0)


def test_simulate_ballistic_exact_on_dyadic_grid():
    # g = 0 silences noise and control, v stays constant, x integrates it;
    # a power-of-two step makes the float arithmetic itself exact
    start = PhaseBatch(np.full((4, 1), 1.0), np.full((4, 1), 2.0))
    cache = simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 8), 0.0,
                     np.random.default_rng(0))
    np.testing.assert_array_equal(cache.positions[:, -1, 0], 3.0)
    np.testing.assert_array_equal(cache.velocities, 2.0)
    assert cache.positions.shape == (4, 9, 1)


def test_simulate_moments_match_ito_closed_forms():
    # z = 0, g > 0: Var v_T -> g^2 T and Var x_T -> g^2 T^3 / 3
    n, g = 30_000, 0.2
    start = PhaseBatch(np.zeros((n, 1)), np.zeros((n, 1)))
    cache = simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 100), g,
                     np.random.default_rng(7))
    var_v = float(np.var(cache.velocities[:, -1, 0]))
    var_x = float(np.var(cache.positions[:, -1, 0]))
    assert abs(var_v - g**2) / g**2 < 0.05
    assert abs(var_x - g**2 / 3.0) / (g**2 / 3.0) < 0.05
    # mean velocity stays at its start within 4 standard errors
    se = g / np.sqrt(n)
    assert abs(float(np.mean(cache.velocities[:, -1, 0]))) < 4 * se


def test_simulate_backward_fills_ascending_time_order():
    start = PhaseBatch(np.full((3, 2), 5.0), np.full((3, 2), 1.0))
    cache = simulate(zero_policy, "backward", start, TimeGrid(0.0, 1.0, 8), 0.0,
                     np.random.default_rng(0))
    assert np.all(np.diff(cache.times) > 0)
    np.testing.assert_array_equal(cache.positions[:, -1, :], 5.0)
    # integrating x' = -dt * v down from t=1 leaves x(0) = 5 - 1*1 = 4
    np.testing.assert_array_equal(cache.positions[:, 0, :], 4.0)
    assert cache.direction == "backward"


def test_simulate_same_seed_is_bit_identical():
    start = PhaseBatch(np.zeros((16, 2)), np.zeros((16, 2)))
    a = simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 20), 0.3,
                 np.random.default_rng(11))
    b = simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 20), 0.3,
                 np.random.default_rng(11))
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.velocities, b.velocities)


def test_simulate_accepts_explicit_knot_arrays():
    start = PhaseBatch(np.zeros((2, 1)), np.ones((2, 1)))
    knots = knot_times([0.0, 1.0, 3.0], 2)
    cache = simulate(zero_policy, "forward", start, knots, 0.0,
                     np.random.default_rng(0))
    np.testing.assert_array_equal(cache.times, knots)
    # ballistic: x(3) = 0 + 1 * 3
    np.testing.assert_allclose(cache.positions[:, -1, 0], 3.0, rtol=1e-6)


def test_simulate_divergence_error_carries_step():
    start = PhaseBatch(np.zeros((2, 1)), np.zeros((2, 1)))
    huge = lambda t, m: np.full((m.shape[0], 1), 1e12, dtype=np.float32)  # noqa: E731
    with pytest.raises(SimulationDivergence, match="step 1"):
        simulate(huge, "forward", start, TimeGrid(0.0, 1.0, 4), 1.0,
                 np.random.default_rng(0))


def test_simulate_rejects_bad_arguments():
    start = PhaseBatch(np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        simulate(zero_policy, "sideways", start, TimeGrid(0.0, 1.0, 4), 0.2,
                 np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 4), -0.1,
                 np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate(zero_policy, "forward", start, np.array([0.0, 1.0, 0.5]), 0.2,
                 np.random.default_rng(0))


def test_trajectory_cache_validation():
    times = np.array([0.0, 0.5, 1.0])
    good = TrajectoryCache(times, np.zeros((2, 3, 1)), np.zeros((2, 3, 1)),
                           "forward", 0.2)
    assert good.batch_size == 2 and good.n_steps == 2 and good.dim == 1
    state = good.state_at(1)
    state.x[0, 0] = 7.0
    assert good.positions[0, 1, 0] == 0.0
    with pytest.raises(ValueError):
        TrajectoryCache(times[::-1].copy(), np.zeros((2, 3, 1)),
                        np.zeros((2, 3, 1)), "forward", 0.2)
    with pytest.raises(ValueError):
        TrajectoryCache(times, np.zeros((2, 4, 1)), np.zeros((2, 4, 1)),
                        "forward", 0.2)
    with pytest.raises(ValueError):
        TrajectoryCache(times, np.zeros((2, 3, 1)), np.zeros((2, 3, 2)),
                        "forward", 0.2)
    with pytest.raises(ValueError):
        TrajectoryCache(times, np.zeros((2, 3, 1)), np.zeros((2, 3, 1)),
                        "upward", 0.2)


def make_cache() -> TrajectoryCache:
    start = PhaseBatch(np.random.default_rng(1).normal(size=(5, 2)),
                       np.random.default_rng(2).normal(size=(5, 2)))
    return simulate(zero_policy, "forward", start, TimeGrid(0.0, 1.0, 6), 0.4,
                    np.random.default_rng(3))


def test_npz_round_trip(tmp_path):
    cache = make_cache()
    path = tmp_path / "traj.npz"
    save_cache(cache, path)
    back = load_cache(path)
    np.testing.assert_array_equal(back.times, cache.times)
    np.testing.assert_array_equal(back.positions, cache.positions)
    np.testing.assert_array_equal(back.velocities, cache.velocities)
    assert back.direction == cache.direction and back.g == cache.g


def test_binary_round_trip(tmp_path):
    cache = make_cache()
    path = tmp_path / "traj.bin"
    save_cache_binary(cache, path)
    sidecar = tmp_path / "traj.bin.json"
    assert sidecar.exists()
    back = load_cache_binary(path)
    np.testing.assert_array_equal(back.positions, cache.positions)
    np.testing.assert_array_equal(back.velocities, cache.velocities)
    np.testing.assert_array_equal(back.times, cache.times)


def test_csv_dump_layout(tmp_path):
    cache = make_cache()
    path = tmp_path / "traj.csv"
    save_cache_csv(cache, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,step,time,x_0,x_1,v_0,v_1"
    assert len(lines) == 1 + cache.batch_size * (cache.n_steps + 1)
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0"
    assert float(first[3]) == float(cache.positions[0, 0, 0])


def test_load_cache_any_dispatch(tmp_path):
    cache = make_cache()
    save_cache(cache, tmp_path / "a.npz")
    save_cache_binary(cache, tmp_path / "b.bin")
    np.testing.assert_array_equal(
        load_cache_any(tmp_path / "a.npz").positions, cache.positions
    )
    np.testing.assert_array_equal(
        load_cache_any(tmp_path / "b.bin").positions, cache.positions
    )
    with pytest.raises(ValueError):
        load_cache_any(tmp_path / "c.parquet")
