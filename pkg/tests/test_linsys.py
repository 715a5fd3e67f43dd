"""Tests for system containers, rollouts and the uncertainty ellipsoid."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustlqr.errors import InputError
from robustlqr.linsys import (
    GainPolicy,
    LinearSystem,
    Trajectory,
    UncertaintyEllipsoid,
    noise_sequence,
    quadratic_cost,
    rollout,
    rollout_given_noise,
    sample_initial_states,
    spectral_radius,
)


def make_system(n=2, m=1, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    a *= 0.8 / max(spectral_radius(a), 1e-9)
    b = rng.normal(size=(n, m))
    return LinearSystem(a_nom=a, b_nom=b, q=np.eye(n), r=np.eye(m), sigma=sigma)


def test_spectral_radius_diagonal():
    assert spectral_radius(np.diag([0.5, -1.5, 0.2])) == pytest.approx(1.5)


def test_system_validation_rejects_bad_inputs():
    eye2 = np.eye(2)
    b = np.ones((2, 1))
    with pytest.raises(InputError):
        LinearSystem(a_nom=np.ones((2, 3)), b_nom=b, q=eye2, r=np.eye(1))
    with pytest.raises(InputError):
        LinearSystem(a_nom=eye2, b_nom=np.ones((3, 1)), q=eye2, r=np.eye(1))
    with pytest.raises(InputError):
        # q not positive definite
        LinearSystem(a_nom=eye2, b_nom=b, q=np.diag([1.0, 0.0]), r=np.eye(1))
    with pytest.raises(InputError):
        # q not symmetric
        LinearSystem(a_nom=eye2, b_nom=b, q=np.array([[1.0, 0.5], [0.0, 1.0]]), r=np.eye(1))
    with pytest.raises(InputError):
        LinearSystem(a_nom=eye2, b_nom=b, q=eye2, r=np.eye(1), sigma=-0.1)


def test_system_arrays_are_read_only():
    sys = make_system()
    with pytest.raises(ValueError):
        sys.a_nom[0, 0] = 7.0


def test_dims():
    sys = make_system(n=3, m=2)
    assert sys.dims == (3, 2)
    ell = UncertaintyEllipsoid.from_system(sys, np.eye(5))
    assert ell.dims == (3, 2)


def test_ellipsoid_contains_center_and_rejects_far_models():
    sys = make_system(n=2, m=1, seed=1)
    ell = UncertaintyEllipsoid.from_system(sys, 4.0 * np.eye(3))
    assert ell.contains(sys.a_nom, sys.b_nom)
    # D = 4 I means perturbations of spectral norm up to 1/2 are inside
    assert ell.contains(sys.a_nom + 0.49 * np.eye(2), sys.b_nom)
    assert not ell.contains(sys.a_nom + 0.51 * np.eye(2), sys.b_nom)


def test_boundary_models_sit_on_the_boundary():
    sys = make_system(n=2, m=2, seed=2)
    d = np.diag([2.0, 3.0, 1.5, 4.0])
    ell = UncertaintyEllipsoid.from_system(sys, d)
    for a, b in ell.boundary_models(count=8, seed=5):
        delta = np.hstack([a, b]).T - ell.center
        lams = np.linalg.eigvalsh(delta.T @ d @ delta)
        # extreme points saturate the whole constraint, not just one direction
        np.testing.assert_allclose(lams, 1.0, atol=1e-9)
        assert ell.contains(a, b)


def test_boundary_models_deterministic_per_seed():
    ell = UncertaintyEllipsoid.from_system(make_system(seed=3), np.eye(3))
    first = ell.boundary_models(count=3, seed=11)
    second = ell.boundary_models(count=3, seed=11)
    other = ell.boundary_models(count=3, seed=12)
    for (a1, b1), (a2, b2) in zip(first, second):
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(first[0][0], other[0][0])


def test_noise_sequence_scales_and_repeats():
    base = noise_sequence(1.0, 6, 3, seed=42)
    assert base.shape == (6, 3)
    np.testing.assert_array_equal(noise_sequence(1.0, 6, 3, seed=42), base)
    np.testing.assert_allclose(noise_sequence(2.5, 6, 3, seed=42), 2.5 * base)
    assert np.all(noise_sequence(0.0, 4, 2, seed=0) == 0.0)


def test_sample_initial_states_shape_and_determinism():
    xs = sample_initial_states(5, 3, seed=9)
    assert xs.shape == (5, 3)
    np.testing.assert_array_equal(sample_initial_states(5, 3, seed=9), xs)


def test_rollout_given_noise_matches_manual_loop():
    a = np.array([[0.9, 0.1], [0.0, 0.8]])
    b = np.array([[0.0], [1.0]])
    k = np.array([[-0.3, -0.5]])
    x0 = np.array([1.0, -2.0])
    noise = noise_sequence(0.2, 5, 2, seed=7)
    traj = rollout_given_noise((a, b), k, x0, noise)
    x = x0.copy()
    for t in range(5):
        u = k @ x
        np.testing.assert_allclose(traj.controls[t], u)
        x = a @ x + b @ u + noise[t]
        np.testing.assert_allclose(traj.states[t + 1], x)
    assert traj.horizon == 5


def test_rollout_time_varying_gains():
    a = np.eye(2) * 0.5
    b = np.eye(2)
    gains = np.stack([np.zeros((2, 2)), -0.5 * np.eye(2)])
    x0 = np.array([1.0, 1.0])
    traj = rollout_given_noise((a, b), gains, x0, np.zeros((2, 2)))
    np.testing.assert_allclose(traj.controls[0], [0.0, 0.0])
    np.testing.assert_allclose(traj.states[1], [0.5, 0.5])
    np.testing.assert_allclose(traj.controls[1], [-0.25, -0.25])
    np.testing.assert_allclose(traj.states[2], [0.0, 0.0])
    with pytest.raises(InputError):
        rollout_given_noise((a, b), gains, x0, np.zeros((3, 2)))


def test_rollout_uses_model_not_nominal():
    sys = make_system(n=2, m=1, sigma=0.0, seed=4)
    policy = GainPolicy.from_gain(np.zeros((1, 2)), sys.a_nom, sys.b_nom)
    other_a = 0.5 * np.eye(2)
    traj = rollout(sys, (other_a, sys.b_nom), policy, np.ones(2), horizon=3, seed=0)
    np.testing.assert_allclose(traj.states[1], other_a @ np.ones(2))
    with pytest.raises(InputError):
        rollout(sys, (other_a, sys.b_nom), policy, np.ones(3), horizon=3, seed=0)


def test_quadratic_cost_oracle():
    states = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    controls = np.array([[1.0], [-2.0]])
    q = np.diag([2.0, 1.0])
    r = np.array([[3.0]])
    # stages t = 0, 1 only; the terminal state is excluded
    expected = (2.0 * 1.0 + 3.0 * 1.0) + (1.0 * 4.0 + 3.0 * 4.0)
    traj = Trajectory(states=states, controls=controls)
    assert quadratic_cost(traj, q, r) == pytest.approx(expected)
    assert quadratic_cost(traj, q, r, average=True) == pytest.approx(expected / 2)


def test_trajectory_shape_mismatch():
    with pytest.raises(InputError):
        Trajectory(states=np.zeros((3, 2)), controls=np.zeros((3, 1)))


def test_trajectory_stacked_layout():
    traj = Trajectory(states=np.arange(6.0).reshape(3, 2), controls=np.array([[9.0], [7.0]]))
    np.testing.assert_array_equal(traj.stacked(), [0, 1, 2, 3, 4, 5, 9, 7])


def test_gain_policy_stability_flag():
    a = np.array([[0.5]])
    b = np.array([[1.0]])
    assert GainPolicy.from_gain(np.array([[0.0]]), a, b).is_stabilizing
    assert not GainPolicy.from_gain(np.array([[0.7]]), a, b).is_stabilizing
    with pytest.raises(InputError):
        GainPolicy(k=np.zeros(3), spectral_radius=0.0)


@settings(deadline=None, max_examples=25)
@given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0.0, max_value=0.99))
def test_interior_scalings_of_boundary_models_stay_inside(seed, scale):
    ell = UncertaintyEllipsoid.from_system(make_system(seed=6), 2.0 * np.eye(3))
    a, b = ell.boundary_models(count=1, seed=seed)[0]
    delta_a = a - ell.center.T[:, :2]
    delta_b = b - ell.center.T[:, 2:]
    assert ell.contains(
        ell.center.T[:, :2] + scale * delta_a, ell.center.T[:, 2:] + scale * delta_b
    )


@settings(deadline=None, max_examples=25)
@given(st.integers(min_value=0, max_value=10_000))
def test_quadratic_cost_nonnegative(seed):
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(6, 2))
    controls = rng.normal(size=(5, 1))
    traj = Trajectory(states=states, controls=controls)
    assert quadratic_cost(traj, np.eye(2), np.eye(1)) >= 0.0
