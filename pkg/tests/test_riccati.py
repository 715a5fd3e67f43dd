"""Riccati solver tests against analytic fixed points, scipy and finite
differences."""

import numpy as np
import pytest
import scipy.linalg

from robustlqr.errors import InputError, SolverError
from robustlqr.linsys import rollout_given_noise, spectral_radius
from robustlqr.riccati import (
    finite_horizon_grad,
    lqr_gain,
    solve_are,
    solve_finite_horizon,
)

# Scalar system a = b = q = r = 1: the fixed point p = p + 1 - p^2/(1+p)
# gives p^2 = p + 1, the golden ratio.
GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def random_stabilizable(n, m, seed, radius=0.95):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    a *= radius / max(spectral_radius(a), 1e-9)
    b = rng.normal(size=(n, m))
    q = rng.normal(size=(n, n))
    q = q @ q.T + np.eye(n)
    r = rng.normal(size=(m, m))
    r = r @ r.T + np.eye(m)
    return a, b, q, r


def test_scalar_fixed_point_is_golden_ratio():
    one = np.array([[1.0]])
    sol = solve_are(one, one, one, one)
    assert abs(sol.p[0, 0] - GOLDEN) < 1e-9
    # k = -p / (1 + p) = -1/p at the fixed point
    assert abs(sol.k[0, 0] + 1.0 / GOLDEN) < 1e-9
    assert sol.residual < 1e-11


def test_matches_scipy_dare():
    for seed in range(20):
        a, b, q, r = random_stabilizable(3, 2, seed)
        sol = solve_are(a, b, q, r)
        p_ref = scipy.linalg.solve_discrete_are(a, b, q, r)
        np.testing.assert_allclose(sol.p, p_ref, rtol=1e-8, atol=1e-8)


def test_gain_formula_and_closed_loop_stability():
    a, b, q, r = random_stabilizable(4, 2, seed=7)
    sol = solve_are(a, b, q, r)
    manual = -np.linalg.solve(r + b.T @ sol.p @ b, b.T @ sol.p @ a)
    np.testing.assert_allclose(sol.k, manual)
    np.testing.assert_allclose(sol.k, lqr_gain(sol.p, a, b, r))
    assert spectral_radius(a + b @ sol.k) < 1.0


def test_divergence_raises():
    # unstable and uncontrollable: the iteration grows without bound
    a = np.array([[2.0]])
    b = np.array([[0.0]])
    with pytest.raises(SolverError):
        solve_are(a, b, np.eye(1), np.eye(1))


def test_shape_validation():
    with pytest.raises(InputError):
        solve_are(np.ones((2, 3)), np.ones((2, 1)), np.eye(2), np.eye(1))
    with pytest.raises(InputError):
        solve_are(np.eye(2), np.ones((3, 1)), np.eye(2), np.eye(1))
    with pytest.raises(InputError):
        solve_finite_horizon(np.eye(2), np.ones((2, 1)), np.eye(2), np.eye(1), horizon=0)


def test_finite_horizon_one_step():
    a, b, q, r = random_stabilizable(2, 1, seed=1)
    sol = solve_finite_horizon(a, b, q, r, horizon=1)
    np.testing.assert_allclose(sol.cost_to_go[1], q)
    np.testing.assert_allclose(sol.gains[0], lqr_gain(q, a, b, r))
    # P_0 via the closed-loop form Q + A' P (A + B K)
    p0 = q + a.T @ q @ (a + b @ sol.gains[0])
    np.testing.assert_allclose(sol.cost_to_go[0], 0.5 * (p0 + p0.T))


def test_finite_horizon_approaches_stationary_gain():
    a, b, q, r = random_stabilizable(3, 2, seed=5)
    are = solve_are(a, b, q, r)
    fh = solve_finite_horizon(a, b, q, r, horizon=200)
    np.testing.assert_allclose(fh.gains[0], are.k, atol=1e-9)
    np.testing.assert_allclose(fh.cost_to_go[0], are.p, atol=1e-8)
    assert fh.horizon == 200


def _trajectory_loss(a, b, q, r, x0, noise, horizon):
    sol = solve_finite_horizon(a, b, q, r, horizon)
    traj = rollout_given_noise((a, b), sol.gains, x0, noise)
    loss = 0.5 * float(np.sum(traj.states**2) + np.sum(traj.controls**2))
    return loss, sol, traj


def test_finite_horizon_grad_matches_finite_differences():
    rng = np.random.default_rng(12)
    n, m, horizon = 2, 1, 4
    a, b, q, r = random_stabilizable(n, m, seed=12, radius=0.8)
    x0 = rng.normal(size=n)
    noise = 0.1 * rng.normal(size=(horizon, n))

    loss, sol, traj = _trajectory_loss(a, b, q, r, x0, noise, horizon)
    grads = finite_horizon_grad(
        a, b, q, r, sol, traj, dl_dstates=traj.states, dl_dcontrols=traj.controls
    )

    h = 1e-6

    def fd(mat, direction):
        lp, _, _ = _trajectory_loss(*(mat(+h)), x0, noise, horizon)
        lm, _, _ = _trajectory_loss(*(mat(-h)), x0, noise, horizon)
        return (lp - lm) / (2 * h)

    # dense parameters: every entry of a and b
    for i in range(n):
        for j in range(n):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            got = fd(lambda s: (a + s * e, b, q, r), e)
            assert abs(got - grads["a"][i, j]) < 1e-5 * max(1.0, abs(got))
    for i in range(n):
        for j in range(m):
            e = np.zeros((n, m))
            e[i, j] = 1.0
            got = fd(lambda s: (a, b + s * e, q, r), e)
            assert abs(got - grads["b"][i, j]) < 1e-5 * max(1.0, abs(got))

    # symmetric parameters: pair the gradient with symmetric directions
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            got = fd(lambda s: (a, b, q + s * e, r), e)
            want = float(np.sum(grads["q"] * e))
            assert abs(got - want) < 1e-5 * max(1.0, abs(got))
    e = np.ones((m, m))
    got = fd(lambda s: (a, b, q, r + s * e), e)
    want = float(np.sum(grads["r"] * e))
    assert abs(got - want) < 1e-5 * max(1.0, abs(got))


def test_finite_horizon_grad_rejects_horizon_mismatch():
    a, b, q, r = random_stabilizable(2, 1, seed=3)
    sol = solve_finite_horizon(a, b, q, r, horizon=4)
    other = solve_finite_horizon(a, b, q, r, horizon=3)
    traj = rollout_given_noise((a, b), other.gains, np.ones(2), np.zeros((3, 2)))
    with pytest.raises(InputError):
        finite_horizon_grad(
            a, b, q, r, sol, traj, dl_dstates=traj.states, dl_dcontrols=traj.controls
        )
