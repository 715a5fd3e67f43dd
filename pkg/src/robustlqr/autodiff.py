"""Gradients of scalar losses w.r.t. the synthesis-layer parameters.

Two stages compose. Gain recovery K = Z' W^{-1} has closed-form
differentials, so a gain cotangent pulls back onto the (W, Z) blocks of
Xi directly. From there the SDP solution map is differentiated through
its KKT linearization (sdp.kkt_adjoint). When that linearization is too
ill-conditioned to trust, the functions fall back to central finite
differences of full re-solves; every gradient records which path
produced it.
"""

import dataclasses
import warnings

import numpy as np

from .errors import (
    DegenerateSolutionError,
    GradientError,
    InputError,
    NumericalError,
    SolverError,
)
from .linsys import LinearSystem, UncertaintyEllipsoid
from .lmi_layers import (
    W_EIG_FLOOR,
    build_nominal_lmi,
    build_robust_sdp,
    recover_gain,
    recover_p,
    worst_case_cost,
    xi_from_solution,
)
from .sdp import SdpProblem, SdpSolution, kkt_adjoint, solve, svec, svec_dim

ALL_PARAMS = ("a_nom", "b_nom", "q", "r", "d", "sigma")
NOMINAL_PARAMS = ("a_nom", "b_nom", "q", "r")

# Central-difference step: relative to the entry magnitude with an
# absolute floor. Solves are good to ~1e-8, so 1e-5 leaves three digits.
FD_STEP = 1e-5
FD_FLOOR = 1e-7

# When the stationary covariance sits this close to the encoding's
# eigenvalue floor (sigma near zero), the floor constraint shapes the
# solution and implicit differentiation silently returns the wrong
# branch; fall back to finite differences instead.
_FLOOR_ACTIVE_FACTOR = 100.0

# Implicit gradients more than this many times larger than the loss
# cotangent mean the solution sits essentially on the feasibility
# boundary, where the KKT adjoint returns garbage without tripping the
# condition-number check. Honest sensitivities near rough spots stay
# within a few orders of magnitude of the cotangent.
_IMPLICIT_BLOWUP_FACTOR = 1e6

_FD_SOLVE_TOL = 1e-10


def _fd_resolve(prob):
    """Solve a perturbed problem for finite differencing.

    Floor-scale instances (sigma near zero) stall just above the tight
    tolerance, so retry once at a looser one before giving up.
    """
    sol = solve(prob, tol=_FD_SOLVE_TOL)
    if sol.status != "optimal":
        sol = solve(prob, tol=100.0 * _FD_SOLVE_TOL)
    if sol.status != "optimal":
        raise SolverError(f"re-solve under perturbation: {sol.status}")
    return sol


def _sym(m):
    return 0.5 * (m + m.T)


@dataclasses.dataclass(frozen=True)
class ParamGradient:
    """Gradient of a scalar loss w.r.t. every layer parameter block.

    Blocks not listed in `trainable` are exactly zero. `path` records
    whether the numbers came from the implicit KKT linearization
    ("implicit") or the fallback ("finite_diff").
    """

    d_a_nom: np.ndarray
    d_b_nom: np.ndarray
    d_q: np.ndarray
    d_r: np.ndarray
    d_d: np.ndarray
    d_sigma: float
    trainable: tuple[str, ...]
    path: str

    def as_dict(self) -> dict:
        return {
            "a_nom": self.d_a_nom,
            "b_nom": self.d_b_nom,
            "q": self.d_q,
            "r": self.d_r,
            "d": self.d_d,
            "sigma": self.d_sigma,
        }


def _check_trainable(trainable, allowed):
    names = tuple(trainable)
    bad = [name for name in names if name not in allowed]
    if bad:
        raise InputError(f"unknown or untrainable parameter blocks: {bad}")
    if len(set(names)) != len(names):
        raise InputError("duplicate names in trainable")
    return names


def _assemble(grads, trainable, path, n, m):
    def block(name, shape):
        if name not in grads:
            return np.zeros(shape)
        arr = np.asarray(grads[name], dtype=float).reshape(shape)
        if name in ("q", "r", "d"):
            arr = _sym(arr)
        return arr

    return ParamGradient(
        d_a_nom=block("a_nom", (n, n)),
        d_b_nom=block("b_nom", (n, m)),
        d_q=block("q", (n, n)),
        d_r=block("r", (m, m)),
        d_d=block("d", (n + m, n + m)),
        d_sigma=float(grads.get("sigma", 0.0)),
        trainable=tuple(trainable),
        path=path,
    )


def _check_matches_meta(sys, sol, unc=None):
    pairs = [
        (sys.a_nom, sol.meta["a_nom"]),
        (sys.b_nom, sol.meta["b_nom"]),
        (sys.q, sol.meta["q"]),
        (sys.r, sol.meta["r"]),
    ]
    if unc is not None:
        pairs.append((unc.d, sol.meta["d"]))
        pairs.append((np.asarray(float(sys.sigma)), sol.meta["sigma"]))
    for given, recorded in pairs:
        if np.asarray(given).shape != np.asarray(recorded).shape or not np.allclose(
            given, recorded, atol=1e-12, rtol=0.0
        ):
            raise InputError(
                "system/ellipsoid do not match the parameters the solution "
                "was computed from"
            )


def grad_through_gain(dl_dk: np.ndarray, sol: SdpSolution):
    """Pull a gain cotangent back to the (W, Z) blocks of Xi.

    From K = Z' W^{-1}: dl/dZ = W^{-1} dl_dk' and
    dl/dW = -W^{-1} Z dl_dk W^{-1} (symmetrized, since W is a block of
    the symmetric variable).
    """
    xi = xi_from_solution(sol)
    n, m = sol.meta["n"], sol.meta["m"]
    dl_dk = np.asarray(dl_dk, dtype=float)
    if dl_dk.shape != (m, n):
        raise InputError(f"dl_dk must be {m}x{n}, got {dl_dk.shape}")
    w = _sym(xi[:n, :n])
    z = xi[:n, n:]
    eig_min = float(np.linalg.eigvalsh(w).min())
    if eig_min <= W_EIG_FLOOR:
        raise NumericalError(
            f"W is numerically singular: min eigenvalue {eig_min:.3e}"
        )
    dl_dz = np.linalg.solve(w, dl_dk.T)
    inner = np.linalg.solve(w, z @ dl_dk)
    dl_dw = -np.linalg.solve(w, inner.T).T
    return _sym(dl_dw), dl_dz


def _xi_cotangent(dl_dw, dl_dz, n, m):
    # <C, Xi> with C blocked so the W and Z inner products come out
    # right; the off-diagonal block of a symmetric matrix is counted
    # twice by the trace pairing, hence the halves.
    c = np.zeros((n + m, n + m))
    c[:n, :n] = _sym(dl_dw)
    c[:n, n:] = 0.5 * dl_dz
    c[n:, :n] = 0.5 * dl_dz.T
    return c


def grad_robust_layer(
    dl_dk: np.ndarray,
    sys: LinearSystem,
    unc: UncertaintyEllipsoid,
    sol: SdpSolution,
    dl_dcost: float = 0.0,
    trainable=ALL_PARAMS,
    prob: SdpProblem | None = None,
    fd_step: float = FD_STEP,
) -> ParamGradient:
    """Gradient of l(K, worst-case cost) w.r.t. all six parameter blocks.

    dl_dk is the loss gradient at the recovered gain; dl_dcost weights an
    additional direct dependence of the loss on the certified worst-case
    cost (zero for pure imitation losses).
    """
    trainable = _check_trainable(trainable, ALL_PARAMS)
    n, m = sys.dims
    dl_dk = np.asarray(dl_dk, dtype=float)
    if dl_dk.shape != (m, n):
        raise InputError(f"dl_dk must be {m}x{n}, got {dl_dk.shape}")
    xi = xi_from_solution(sol)
    _check_matches_meta(sys, sol, unc)
    if prob is None:
        prob = build_robust_sdp(
            sys, unc,
            dpp_auxiliaries=sol.meta["dpp"],
            xi_floor=sol.meta["floor"],
        )
    if prob.nvars != sol.x.size:
        raise InputError("solution vector does not match the problem build")

    try:
        w_min = float(np.linalg.eigvalsh(_sym(xi[:n, :n])).min())
        if w_min < _FLOOR_ACTIVE_FACTOR * sol.meta["floor"]:
            raise DegenerateSolutionError(
                f"stationary covariance eigenvalue {w_min:.3e} sits on the "
                "encoding floor; the implicit solution map is unreliable here"
            )
        if np.any(dl_dk):
            dl_dw, dl_dz = grad_through_gain(dl_dk, sol)
        else:
            dl_dw = np.zeros((n, n))
            dl_dz = np.zeros((n, m))
        xbar = np.zeros(prob.nvars)
        xbar[: svec_dim(n + m)] = svec(_xi_cotangent(dl_dw, dl_dz, n, m))
        if dl_dcost:
            xbar = xbar + dl_dcost * prob.c
        grads = dict(kkt_adjoint(prob, sol, xbar, names=trainable))
        scale = max(1.0, float(np.max(np.abs(dl_dk))), abs(dl_dcost))
        worst = max(
            (float(np.max(np.abs(g))) for g in grads.values()), default=0.0
        )
        if worst > _IMPLICIT_BLOWUP_FACTOR * scale:
            raise DegenerateSolutionError(
                f"implicit gradient magnitude {worst:.3e} is out of scale "
                "with the loss cotangent; the solution sits too close to "
                "the feasibility boundary for the implicit map"
            )
        if dl_dcost:
            # the objective coefficients themselves carry Q and R, so the
            # cost term has a direct piece on top of the solution path
            if "q" in grads:
                grads["q"] = grads["q"] + dl_dcost * _sym(xi[:n, :n])
            if "r" in grads:
                grads["r"] = grads["r"] + dl_dcost * _sym(xi[n:, n:])
        return _assemble(grads, trainable, "implicit", n, m)
    except DegenerateSolutionError:
        pass

    dpp, floor = sol.meta["dpp"], sol.meta["floor"]

    def loss(sys2, unc2):
        sol2 = _fd_resolve(build_robust_sdp(sys2, unc2, dpp_auxiliaries=dpp, xi_floor=floor))
        val = 0.0
        if np.any(dl_dk):
            val += float(np.sum(dl_dk * recover_gain(sol2).k))
        if dl_dcost:
            val += dl_dcost * worst_case_cost(sol2)
        return val

    return fd_oracle(
        loss, sys, unc, step=fd_step, trainable=trainable, strict=True
    )


def grad_nominal_layer(
    dl_dk: np.ndarray,
    sys: LinearSystem,
    sol: SdpSolution,
    trainable=NOMINAL_PARAMS,
    prob: SdpProblem | None = None,
    fd_step: float = FD_STEP,
) -> ParamGradient:
    """Gradient of l(K) through the nominal encoding; D and sigma blocks
    are structurally zero because the encoding never sees them.

    K = -(R + B'PB)^{-1} B'PA depends on A, B, R both directly and
    through P, so the pullback splits into a direct piece and an
    implicit piece routed through the value-matrix coordinates.
    """
    trainable = _check_trainable(trainable, NOMINAL_PARAMS)
    n, m = sys.dims
    dl_dk = np.asarray(dl_dk, dtype=float)
    if dl_dk.shape != (m, n):
        raise InputError(f"dl_dk must be {m}x{n}, got {dl_dk.shape}")
    are = recover_p(sol)
    _check_matches_meta(sys, sol)
    if prob is None:
        prob = build_nominal_lmi(sys, dpp_auxiliaries=sol.meta["dpp"])
    if prob.nvars != sol.x.size:
        raise InputError("solution vector does not match the problem build")

    p, k = are.p, are.k
    a, b, r = sys.a_nom, sys.b_nom, sys.r
    s = r + b.T @ p @ b
    g = dl_dk
    sinv = np.linalg.solve(s, np.eye(m))
    sinv_g = sinv @ g
    v = b @ sinv_g
    direct = {
        "a_nom": -(p @ v),
        "r": -sinv_g @ k.T,
        "b_nom": (
            -(p @ a @ g.T) @ sinv
            - (p @ b @ k @ g.T) @ sinv
            + p @ v @ a.T @ p @ b @ sinv
        ),
    }
    lbar_p = -v @ a.T + v @ a.T @ p @ b @ sinv @ b.T

    try:
        xbar = np.zeros(prob.nvars)
        xbar[: svec_dim(n)] = svec(_sym(lbar_p))
        grads = dict(kkt_adjoint(prob, sol, xbar, names=trainable))
        for name, term in direct.items():
            if name in grads:
                grads[name] = grads[name] + term
        return _assemble(grads, trainable, "implicit", n, m)
    except DegenerateSolutionError:
        pass

    dpp = sol.meta["dpp"]

    def loss(sys2, unc2):
        sol2 = _fd_resolve(build_nominal_lmi(sys2, dpp_auxiliaries=dpp))
        return float(np.sum(dl_dk * recover_p(sol2).k))

    return fd_oracle(
        loss, sys, None, step=fd_step, trainable=trainable, strict=True
    )


def _with_field(sys, name, value):
    fields = {
        "a_nom": sys.a_nom,
        "b_nom": sys.b_nom,
        "q": sys.q,
        "r": sys.r,
        "sigma": sys.sigma,
    }
    fields[name] = value
    return LinearSystem(**fields)


def _perturbed(sys, unc, name, value):
    """New (system, ellipsoid) pair with one parameter block replaced.

    The ellipsoid stays centered on the (possibly moved) nominal model:
    the center is not a free parameter, it is [A_nom, B_nom].
    """
    if name == "d":
        return sys, UncertaintyEllipsoid(d=value, center=unc.center)
    sys2 = _with_field(sys, name, value)
    unc2 = None if unc is None else UncertaintyEllipsoid.from_system(sys2, unc.d)
    return sys2, unc2


def fd_oracle(
    loss,
    sys: LinearSystem,
    unc: UncertaintyEllipsoid | None = None,
    step: float = FD_STEP,
    trainable=None,
    strict: bool = False,
) -> ParamGradient:
    """Central-difference gradient of loss(sys, unc) per parameter entry.

    Symmetric blocks (Q, R, D) perturb (i, j) and (j, i) together so the
    result lives on the symmetric subspace. When exactly one side of a
    central difference fails (a domain boundary such as sigma = 0, or a
    failed re-solve) the coordinate degrades to a one-sided difference
    through the base point. Coordinates with no usable difference are
    skipped with a warning, or raise GradientError when strict is set
    (the behavior the implicit path's fallback needs).
    """
    if trainable is None:
        trainable = ALL_PARAMS if unc is not None else NOMINAL_PARAMS
    trainable = _check_trainable(trainable, ALL_PARAMS)
    if "d" in trainable and unc is None:
        raise InputError("cannot differentiate d without an uncertainty set")
    n, m = sys.dims

    base_val = [None]

    def at_base():
        if base_val[0] is None:
            v = float(loss(sys, unc))
            if not np.isfinite(v):
                raise NumericalError("loss non-finite at the base point")
            base_val[0] = v
        return base_val[0]

    def entry(name, base, delta, h, label):
        vals, errs = {}, {}
        for sign in (1.0, -1.0):
            try:
                sys2, unc2 = _perturbed(sys, unc, name, base + sign * delta)
                v = float(loss(sys2, unc2))
                if not np.isfinite(v):
                    raise NumericalError(f"loss non-finite under {name} perturbation")
                vals[sign] = v
            except (InputError, SolverError, NumericalError) as exc:
                errs[sign] = exc
        if not errs:
            return (vals[1.0] - vals[-1.0]) / (2.0 * h)
        if len(errs) == 1:
            # one side left the domain (sigma at zero) or failed to solve;
            # a one-sided difference through the base point still works
            sign = 1.0 if 1.0 in vals else -1.0
            try:
                return sign * (vals[sign] - at_base()) / h
            except (InputError, SolverError, NumericalError) as exc:
                errs["base"] = exc
        exc = next(iter(errs.values()))
        if strict:
            raise GradientError(
                f"finite differences failed on {label}: {exc}"
            ) from exc
        warnings.warn(f"skipping gradient coordinate {label}: {exc}")
        return None

    grads = {}
    for name in trainable:
        if name == "sigma":
            base = float(sys.sigma)
            h = max(step * abs(base), FD_FLOOR)
            got = entry(name, np.float64(base), np.float64(h), h, "sigma")
            grads["sigma"] = 0.0 if got is None else got
            continue
        base = {"a_nom": sys.a_nom, "b_nom": sys.b_nom, "q": sys.q,
                "r": sys.r, "d": None if unc is None else unc.d}[name]
        grad = np.zeros_like(np.asarray(base, dtype=float))
        if name in ("a_nom", "b_nom"):
            for idx in np.ndindex(grad.shape):
                h = max(step * abs(base[idx]), FD_FLOOR)
                delta = np.zeros_like(grad)
                delta[idx] = h
                got = entry(name, base, delta, h, f"{name}{list(idx)}")
                if got is not None:
                    grad[idx] = got
        else:
            dim = grad.shape[0]
            for i in range(dim):
                for j in range(i, dim):
                    h = max(step * abs(base[i, j]), FD_FLOOR)
                    delta = np.zeros_like(grad)
                    delta[i, j] += h
                    delta[j, i] += h  # lands on 2h for the diagonal
                    got = entry(name, base, delta, h, f"{name}[{i},{j}]")
                    if got is None:
                        continue
                    if i == j:
                        # diagonal step was effectively 2h
                        grad[i, i] = 0.5 * got
                    else:
                        grad[i, j] = grad[j, i] = 0.5 * got
        grads[name] = grad
    return _assemble(grads, trainable, "finite_diff", n, m)
