"""Gradient tests: closed-form gain pullback, implicit vs finite
differences, homogeneity cross-checks, masks and fallback wiring."""

import dataclasses

import numpy as np
import pytest

from robustlqr import autodiff
from robustlqr.autodiff import (
    fd_oracle,
    grad_nominal_layer,
    grad_robust_layer,
    grad_through_gain,
)
from robustlqr.errors import (
    DegenerateSolutionError,
    GradientError,
    InputError,
    SolverError,
)
from robustlqr.linsys import LinearSystem, UncertaintyEllipsoid, spectral_radius
from robustlqr.lmi_layers import (
    build_nominal_lmi,
    build_robust_sdp,
    recover_gain,
    recover_p,
    worst_case_cost,
    xi_from_solution,
)
from robustlqr.sdp import kkt_differentiate, smat, solve, svec, svec_dim

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def random_system(n, m, seed, sigma=0.1):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    a *= 0.85 / max(spectral_radius(a), 1e-9)
    b = rng.normal(size=(n, m))
    q = rng.normal(size=(n, n))
    q = q @ q.T + np.eye(n)
    r = rng.normal(size=(m, m))
    r = r @ r.T + np.eye(m)
    return LinearSystem(a_nom=a, b_nom=b, q=q, r=r, sigma=sigma)


@pytest.fixture(scope="module")
def robust_small():
    sys = random_system(2, 1, seed=1, sigma=0.3)
    unc = UncertaintyEllipsoid.from_system(sys, 25.0 * np.eye(3))
    prob = build_robust_sdp(sys, unc)
    sol = solve(prob, tol=1e-10)
    assert sol.status == "optimal"
    return sys, unc, prob, sol


@pytest.fixture(scope="module")
def nominal_small():
    sys = random_system(2, 1, seed=9, sigma=0.2)
    prob = build_nominal_lmi(sys)
    sol = solve(prob, tol=1e-10)
    assert sol.status == "optimal"
    return sys, prob, sol


def test_gain_pullback_scalar_values(robust_small):
    # Hand-built solution with W = 2, Z = 1: k = z/w, so dl/dz = 1/2 and
    # dl/dw = -z/w^2 = -1/4.
    _, _, _, sol = robust_small
    xi = np.array([[2.0, 1.0], [1.0, 1.0]])
    fake_x = np.zeros(sol.x.size)
    fake_x[: svec_dim(2)] = svec(xi)
    fake = dataclasses.replace(sol, x=fake_x, meta={**sol.meta, "n": 1, "m": 1})
    dl_dw, dl_dz = grad_through_gain(np.array([[1.0]]), fake)
    assert abs(dl_dz[0, 0] - 0.5) < 1e-12
    assert abs(dl_dw[0, 0] + 0.25) < 1e-12


def test_gain_pullback_zero_cotangent(robust_small):
    _, _, _, sol = robust_small
    dl_dw, dl_dz = grad_through_gain(np.zeros((1, 2)), sol)
    assert not dl_dw.any() and not dl_dz.any()


def test_gain_pullback_rejects_bad_shape(robust_small):
    _, _, _, sol = robust_small
    with pytest.raises(InputError):
        grad_through_gain(np.zeros((2, 2)), sol)


def test_gain_pullback_matches_finite_differences(robust_small):
    _, _, _, sol = robust_small
    n, m = 2, 1
    rng = np.random.default_rng(3)
    g = rng.normal(size=(m, n))
    dl_dw, dl_dz = grad_through_gain(g, sol)

    xi = xi_from_solution(sol)
    w = 0.5 * (xi[:n, :n] + xi[:n, :n].T)
    z = xi[:n, n:]

    def loss(wm, zm):
        return float(np.sum(g * (zm.T @ np.linalg.inv(wm))))

    h = 1e-6
    for i in range(n):
        for j in range(i, n):
            delta = np.zeros((n, n))
            delta[i, j] += h
            delta[j, i] += h
            got = (loss(w + delta, z) - loss(w - delta, z)) / (2 * h)
            assert abs(0.5 * got - dl_dw[i, j]) < 1e-6
    for idx in np.ndindex(z.shape):
        delta = np.zeros_like(z)
        delta[idx] = h
        got = (loss(w, z + delta) - loss(w, z - delta)) / (2 * h)
        assert abs(got - dl_dz[idx]) < 1e-6


def test_robust_gradient_matches_finite_differences(robust_small):
    sys, unc, prob, sol = robust_small
    rng = np.random.default_rng(4)
    g = rng.normal(size=(1, 2))
    grad = grad_robust_layer(g, sys, unc, sol, dl_dcost=0.3, prob=prob)
    assert grad.path == "implicit"

    def loss(sys2, unc2):
        sol2 = solve(build_robust_sdp(sys2, unc2), tol=1e-10)
        if sol2.status != "optimal":
            raise SolverError(sol2.status)
        return float(np.sum(g * recover_gain(sol2).k)) + 0.3 * worst_case_cost(sol2)

    ref = fd_oracle(loss, sys, unc)
    assert ref.path == "finite_diff"
    for name, got in grad.as_dict().items():
        want = np.asarray(ref.as_dict()[name])
        scale = max(1.0, float(np.max(np.abs(want))))
        assert np.max(np.abs(np.asarray(got) - want)) / scale < 1e-3, name
    for sym_block in (grad.d_q, grad.d_r, grad.d_d):
        assert np.max(np.abs(sym_block - sym_block.T)) < 1e-12


def test_cost_sigma_gradient_matches_homogeneity(robust_small):
    # cost scales as sigma^2, so d cost / d sigma = 2 cost / sigma.
    sys, unc, prob, sol = robust_small
    grad = grad_robust_layer(
        np.zeros((1, 2)), sys, unc, sol, dl_dcost=1.0, prob=prob
    )
    want = 2.0 * worst_case_cost(sol) / sys.sigma
    assert abs(grad.d_sigma - want) / want < 1e-6


def test_gain_only_loss_has_no_sigma_gradient(robust_small):
    sys, unc, prob, sol = robust_small
    grad = grad_robust_layer(
        np.array([[0.4, -1.1]]), sys, unc, sol, prob=prob
    )
    assert abs(grad.d_sigma) < 1e-5


def test_zero_loss_gradient_is_zero(robust_small):
    sys, unc, prob, sol = robust_small
    grad = grad_robust_layer(np.zeros((1, 2)), sys, unc, sol, prob=prob)
    for value in grad.as_dict().values():
        assert not np.any(value)


def test_trainable_mask_zeroes_blocks(robust_small):
    sys, unc, prob, sol = robust_small
    grad = grad_robust_layer(
        np.array([[1.0, 2.0]]), sys, unc, sol, dl_dcost=1.0,
        trainable=("q", "sigma"), prob=prob,
    )
    assert not grad.d_a_nom.any()
    assert not grad.d_b_nom.any()
    assert not grad.d_r.any()
    assert not grad.d_d.any()
    assert grad.d_q.any()
    assert grad.d_sigma != 0.0
    assert grad.trainable == ("q", "sigma")


def test_adjoint_agrees_with_forward_directional(robust_small):
    # Transpose test at the layer level: <grad, v> must equal the
    # directional derivative assembled from the forward KKT solve.
    sys, unc, prob, sol = robust_small
    n, m = 2, 1
    rng = np.random.default_rng(7)
    g = rng.normal(size=(m, n))
    dl_dcost = 0.4
    grad = grad_robust_layer(g, sys, unc, sol, dl_dcost=dl_dcost, prob=prob)

    v = {
        "a_nom": rng.normal(size=(n, n)),
        "b_nom": rng.normal(size=(n, m)),
        "q": None, "r": None, "d": None,
        "sigma": np.asarray(rng.normal()),
    }
    for name, dim in (("q", n), ("r", m), ("d", n + m)):
        raw = rng.normal(size=(dim, dim))
        v[name] = 0.5 * (raw + raw.T)

    lhs = sum(
        float(np.sum(np.asarray(grad.as_dict()[name]) * v[name]))
        for name in v
    )

    der = kkt_differentiate(prob, sol, v)
    dxi = smat(der.dx[: svec_dim(n + m)])
    xi = xi_from_solution(sol)
    w = 0.5 * (xi[:n, :n] + xi[:n, :n].T)
    z = xi[:n, n:]
    dw = dxi[:n, :n]
    dz = dxi[:n, n:]
    dk = dz.T @ np.linalg.inv(w) - z.T @ np.linalg.inv(w) @ dw @ np.linalg.inv(w)
    rhs = float(np.sum(g * dk))
    rhs += dl_dcost * (
        float(np.trace(sys.q @ dw) + np.trace(sys.r @ dxi[n:, n:]))
        + float(np.trace(v["q"] @ w) + np.trace(v["r"] @ xi[n:, n:]))
    )
    assert abs(lhs - rhs) / max(1.0, abs(rhs)) < 1e-8


def test_nominal_gradient_matches_finite_differences(nominal_small):
    sys, prob, sol = nominal_small
    rng = np.random.default_rng(5)
    g = rng.normal(size=(1, 2))
    grad = grad_nominal_layer(g, sys, sol, prob=prob)
    assert grad.path == "implicit"
    assert not grad.d_d.any()
    assert grad.d_sigma == 0.0

    def loss(sys2, _unused):
        sol2 = solve(build_nominal_lmi(sys2), tol=1e-10)
        if sol2.status != "optimal":
            raise SolverError(sol2.status)
        return float(np.sum(g * recover_p(sol2).k))

    ref = fd_oracle(loss, sys, None)
    for name in ("a_nom", "b_nom", "q", "r"):
        want = np.asarray(ref.as_dict()[name])
        scale = max(1.0, float(np.max(np.abs(want))))
        got = np.asarray(grad.as_dict()[name])
        assert np.max(np.abs(got - want)) / scale < 1e-3, name


def test_nominal_golden_ratio_gain_sensitivity():
    # Scalar a=b=r=1: p solves p^2 = q(1+p), k = -p/(1+p), and at q=1
    # dk/dq = -1/(sqrt(5) phi^2) by differentiating the closed form.
    one = np.array([[1.0]])
    sys = LinearSystem(a_nom=one, b_nom=one, q=one, r=one, sigma=1.0)
    prob = build_nominal_lmi(sys)
    sol = solve(prob, tol=1e-11)
    grad = grad_nominal_layer(np.array([[1.0]]), sys, sol, prob=prob)
    want = -1.0 / (np.sqrt(5.0) * GOLDEN**2)
    assert abs(grad.d_q[0, 0] - want) < 1e-8


def test_fd_oracle_exact_on_polynomial_losses(robust_small):
    sys, unc, _, _ = robust_small

    def trace_loss(sys2, _unused):
        return float(np.trace(sys2.q))

    grad = fd_oracle(trace_loss, sys, unc, trainable=("q",))
    assert np.max(np.abs(grad.d_q - np.eye(2))) < 1e-9

    def sigma_sq(sys2, _unused):
        return float(sys2.sigma) ** 2

    grad = fd_oracle(sigma_sq, sys, unc, trainable=("sigma",))
    assert abs(grad.d_sigma - 2.0 * sys.sigma) < 1e-9


def test_fd_oracle_skips_failed_coordinates(robust_small):
    sys, unc, _, _ = robust_small

    def fussy(sys2, _unused):
        if float(sys2.sigma) != sys.sigma:
            raise SolverError("pretend the perturbed problem diverged")
        return 1.0

    with pytest.warns(UserWarning, match="sigma"):
        grad = fd_oracle(fussy, sys, unc, trainable=("sigma", "r"))
    assert grad.d_sigma == 0.0
    assert not grad.d_r.any()

    with pytest.raises(GradientError):
        fd_oracle(fussy, sys, unc, trainable=("sigma",), strict=True)


def test_fallback_engages_on_degenerate_kkt(robust_small, monkeypatch):
    sys, unc, prob, sol = robust_small
    g = np.array([[0.8, -0.2]])
    reference = grad_robust_layer(g, sys, unc, sol, prob=prob)

    def explode(*args, **kwargs):
        raise DegenerateSolutionError("forced for the test")

    monkeypatch.setattr(autodiff, "kkt_adjoint", explode)
    grad = grad_robust_layer(g, sys, unc, sol, prob=prob)
    assert grad.path == "finite_diff"
    for name, got in grad.as_dict().items():
        want = np.asarray(reference.as_dict()[name])
        scale = max(1.0, float(np.max(np.abs(want))))
        assert np.max(np.abs(np.asarray(got) - want)) / scale < 1e-3, name


def test_mismatched_system_rejected(robust_small):
    sys, unc, prob, sol = robust_small
    other = random_system(2, 1, seed=2, sigma=0.3)
    with pytest.raises(InputError):
        grad_robust_layer(np.zeros((1, 2)), other, unc, sol, prob=prob)


def test_trainable_validation(robust_small):
    sys, unc, prob, sol = robust_small
    with pytest.raises(InputError):
        grad_robust_layer(
            np.zeros((1, 2)), sys, unc, sol, trainable=("bogus",), prob=prob
        )
    nom_sys = random_system(2, 1, seed=9, sigma=0.2)
    nom_sol = solve(build_nominal_lmi(nom_sys), tol=1e-10)
    with pytest.raises(InputError):
        grad_nominal_layer(np.zeros((1, 2)), nom_sys, nom_sol, trainable=("d",))
    with pytest.raises(InputError):
        fd_oracle(lambda s, u: 0.0, sys, None, trainable=("d",))
