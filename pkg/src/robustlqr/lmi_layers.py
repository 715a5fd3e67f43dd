"""Control synthesis as semidefinite programming.

Two encodings are built here, both returning SdpProblem instances whose
param_jacobian is wired for the full parameter set, so solutions can be
differentiated with sdp.kkt_differentiate / kkt_adjoint.

Nominal layer: maximize trace(P) subject to

    [[R + B'PB,  B'PA,       0],
     [A'PB,      A'PA + Q - P, 0],
     [0,         0,           P]]  >= 0

whose optimum is the stabilizing solution of the algebraic Riccati
equation. Auxiliaries S1 = PB and S2 = PA (equality-pinned) keep every
constraint coefficient affine in each individual parameter block.

Robust layer: over the model ellipsoid {X : (X' - mu)' D (X' - mu) <= I}
centered at mu = [A_nom, B_nom]', with process noise level sigma,
minimize trace(diag(Q, R) Xi) subject to the S-procedure certificate

    [[I,       sigma I,                   0          ],
     [sigma I, W - M Xi M' - lambda I,    M Xi       ],
     [0,       Xi M',                     lambda D - Xi]]  >= 0,
    lambda >= 0,  Xi >= eps I,

where M = [A_nom, B_nom] and W is the leading n x n block of Xi. The
-lambda I term in the middle block comes from the underlying robust
quadratic matrix inequality theorem; it is required for the certificate
to be exact (checked against a brute-force min-max oracle in the tests).
The eps floor keeps W invertible so the gain K = Z' W^{-1} exists.

Auxiliary S = Xi M' (equality-pinned) again makes the data affine per
parameter block; builders also accept dpp_auxiliaries=False to emit the
directly substituted form, which is quadratic in (A_nom, B_nom) but smaller.
"""

from dataclasses import replace

import numpy as np

from .errors import InputError, NumericalError
from .linsys import GainPolicy, LinearSystem, UncertaintyEllipsoid
from .riccati import AreSolution, lqr_gain
from .sdp import (
    ParamJacobian,
    PsdBlock,
    SdpProblem,
    SdpSolution,
    data_dim,
    pack_data,
    smat,
    svec,
    svec_dim,
)

# Smallest eigenvalue the stationary second-moment matrix Xi is held above.
XI_FLOOR = 1e-9

# recover_gain refuses to invert W below this eigenvalue.
W_EIG_FLOOR = 1e-9


def _sym(m):
    return 0.5 * (m + m.T)


def _affine_block(lmi, nvar, dim):
    """PsdBlock for an affine matrix map given as a callable on x."""
    f0 = svec(lmi(np.zeros(nvar)))
    g = np.empty((svec_dim(dim), nvar))
    for j in range(nvar):
        e = np.zeros(nvar)
        e[j] = 1.0
        g[:, j] = svec(lmi(e)) - f0
    return PsdBlock(dim=dim, f0=f0, g=g)


def _affine_equalities(eq_map, nvar, rows):
    a_eq = np.empty((rows, nvar))
    for j in range(nvar):
        e = np.zeros(nvar)
        e[j] = 1.0
        a_eq[:, j] = eq_map(e)
    return a_eq, np.zeros(rows)


def _nominal_problem(a, b, q, r, dpp):
    """Raw builder; accepts arbitrary parameter arrays without validation
    so the ParamJacobian probe can evaluate perturbed data freely."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = _sym(np.asarray(q, dtype=float))
    r = _sym(np.asarray(r, dtype=float))
    n, m = b.shape
    dp = svec_dim(n)
    nvar = dp + (n * m + n * n if dpp else 0)

    def unpack(x):
        p_mat = smat(x[:dp])
        if dpp:
            s1 = x[dp:dp + n * m].reshape(n, m)
            s2 = x[dp + n * m:].reshape(n, n)
        else:
            s1 = p_mat @ b
            s2 = p_mat @ a
        return p_mat, s1, s2

    dim = 2 * n + m

    def lmi(x):
        p_mat, s1, s2 = unpack(x)
        blk = np.zeros((dim, dim))
        blk[:m, :m] = r + _sym(b.T @ s1)
        blk[:m, m:m + n] = b.T @ s2
        blk[m:m + n, :m] = (b.T @ s2).T
        blk[m:m + n, m:m + n] = _sym(a.T @ s2) + q - p_mat
        blk[m + n:, m + n:] = p_mat
        return blk

    blocks = (_affine_block(lmi, nvar, dim),)
    if dpp:
        def eq_map(x):
            p_mat, s1, s2 = unpack(x)
            return np.concatenate(
                [(s1 - p_mat @ b).ravel(), (s2 - p_mat @ a).ravel()]
            )

        a_eq, b_eq = _affine_equalities(eq_map, nvar, n * m + n * n)
    else:
        a_eq, b_eq = np.zeros((0, nvar)), np.zeros(0)

    c = np.zeros(nvar)
    c[:dp] = -svec(np.eye(n))  # maximize trace(P)
    meta = {
        "kind": "nominal_lmi", "n": n, "m": m, "dpp": dpp,
        "a_nom": a, "b_nom": b, "q": q, "r": r,
    }
    return SdpProblem(c=c, a_eq=a_eq, b_eq=b_eq, blocks=blocks, meta=meta)


def build_nominal_lmi(sys: LinearSystem, dpp_auxiliaries: bool = True) -> SdpProblem:
    """Compile a LinearSystem into the trace-maximization LMI.

    The optimal P equals the stabilizing Riccati solution; for systems
    that are not stabilizable the trace is unbounded above and the solver
    reports that at solve time. param_jacobian covers
    {a_nom, b_nom, q, r}.
    """
    base = _nominal_problem(sys.a_nom, sys.b_nom, sys.q, sys.r, dpp_auxiliaries)
    params = {
        "a_nom": sys.a_nom, "b_nom": sys.b_nom, "q": sys.q, "r": sys.r,
    }
    pj = ParamJacobian(
        lambda pr: pack_data(
            _nominal_problem(pr["a_nom"], pr["b_nom"], pr["q"], pr["r"], dpp_auxiliaries)
        ),
        params,
        data_dim(base),
    )
    return replace(base, param_jacobian=pj)


def _robust_problem(a, b, q, r, d, sigma, dpp, floor):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = _sym(np.asarray(q, dtype=float))
    r = _sym(np.asarray(r, dtype=float))
    d = _sym(np.asarray(d, dtype=float))
    sigma = float(sigma)
    n, m = b.shape
    k = n + m
    m_mat = np.hstack([a, b])
    dxi = svec_dim(k)
    nvar = dxi + 1 + (k * n if dpp else 0)

    def unpack(x):
        xi = smat(x[:dxi])
        lam = x[dxi]
        s = x[dxi + 1:].reshape(k, n) if dpp else xi @ m_mat.T
        return xi, lam, s

    dim = 2 * n + k

    def lmi(x):
        xi, lam, s = unpack(x)
        blk = np.zeros((dim, dim))
        blk[:n, :n] = np.eye(n)
        blk[:n, n:2 * n] = sigma * np.eye(n)
        blk[n:2 * n, :n] = sigma * np.eye(n)
        blk[n:2 * n, n:2 * n] = xi[:n, :n] - _sym(m_mat @ s) - lam * np.eye(n)
        blk[n:2 * n, 2 * n:] = s.T
        blk[2 * n:, n:2 * n] = s
        blk[2 * n:, 2 * n:] = lam * d - xi
        return blk

    cert = _affine_block(lmi, nvar, dim)
    # the constant part of the certificate (identity and sigma I blocks)
    # must not be attributed to the variables; _affine_block already
    # separates it into f0, so only the Xi floor remains to add.
    g_floor = np.zeros((dxi, nvar))
    g_floor[:, :dxi] = np.eye(dxi)
    floor_blk = PsdBlock(dim=k, f0=svec(-floor * np.eye(k)), g=g_floor)

    if dpp:
        def eq_map(x):
            xi, _, s = unpack(x)
            return (s - xi @ m_mat.T).ravel()

        a_eq, b_eq = _affine_equalities(eq_map, nvar, k * n)
    else:
        a_eq, b_eq = np.zeros((0, nvar)), np.zeros(0)

    weight = np.zeros((k, k))
    weight[:n, :n] = q
    weight[n:, n:] = r
    c = np.zeros(nvar)
    c[:dxi] = svec(weight)

    meta = {
        "kind": "robust_lmi", "n": n, "m": m, "dpp": dpp, "floor": floor,
        "a_nom": a, "b_nom": b, "q": q, "r": r, "d": d, "sigma": sigma,
    }
    return SdpProblem(
        c=c, a_eq=a_eq, b_eq=b_eq, blocks=(cert, floor_blk),
        nonneg_vars=(dxi,), meta=meta,
    )


def build_robust_sdp(
    sys: LinearSystem,
    unc: UncertaintyEllipsoid,
    dpp_auxiliaries: bool = True,
    xi_floor: float = XI_FLOOR,
) -> SdpProblem:
    """Compile system + uncertainty ellipsoid into the robust certificate SDP.

    The ellipsoid must be centered at the system's nominal model; its D
    matrix is validated SPD at construction. param_jacobian covers
    {a_nom, b_nom, q, r, d, sigma}.
    """
    if unc.dims != sys.dims:
        raise InputError(
            f"ellipsoid dimensions {unc.dims} do not match system {sys.dims}"
        )
    center = np.hstack([sys.a_nom, sys.b_nom]).T
    if not np.allclose(unc.center, center, atol=1e-10):
        raise InputError("ellipsoid center must equal the nominal model")
    base = _robust_problem(
        sys.a_nom, sys.b_nom, sys.q, sys.r, unc.d, sys.sigma,
        dpp_auxiliaries, xi_floor,
    )
    params = {
        "a_nom": sys.a_nom, "b_nom": sys.b_nom, "q": sys.q, "r": sys.r,
        "d": unc.d, "sigma": np.asarray(float(sys.sigma)),
    }
    pj = ParamJacobian(
        lambda pr: pack_data(
            _robust_problem(
                pr["a_nom"], pr["b_nom"], pr["q"], pr["r"], pr["d"],
                float(pr["sigma"]), dpp_auxiliaries, xi_floor,
            )
        ),
        params,
        data_dim(base),
    )
    return replace(base, param_jacobian=pj)


def _require_kind(sol: SdpSolution, kind: str):
    if sol.meta.get("kind") != kind:
        raise InputError(
            f"solution came from {sol.meta.get('kind')!r}, expected {kind!r}"
        )
    if sol.status != "optimal":
        raise InputError(f"cannot extract from a solution with status {sol.status!r}")


def xi_from_solution(sol: SdpSolution) -> np.ndarray:
    """The optimal stationary second-moment matrix Xi of a robust solve."""
    _require_kind(sol, "robust_lmi")
    n, m = sol.meta["n"], sol.meta["m"]
    return smat(sol.x[:svec_dim(n + m)])


def recover_gain(sol: SdpSolution) -> GainPolicy:
    """Feedback gain K = Z' W^{-1} from a solved robust encoding.

    W and Z are the leading blocks of Xi. Raises NumericalError when W is
    too close to singular to invert trustworthily.
    """
    xi = xi_from_solution(sol)
    n = sol.meta["n"]
    w = _sym(xi[:n, :n])
    z = xi[:n, n:]
    eig_min = float(np.linalg.eigvalsh(w).min())
    if eig_min <= W_EIG_FLOOR:
        raise NumericalError(
            f"W is numerically singular: min eigenvalue {eig_min:.3e} "
            f"<= {W_EIG_FLOOR:.0e}; gain recovery would be untrustworthy"
        )
    k_gain = np.linalg.solve(w, z).T
    return GainPolicy.from_gain(k_gain, sol.meta["a_nom"], sol.meta["b_nom"])


def recover_p(sol: SdpSolution) -> AreSolution:
    """Value matrix and gain from a solved nominal encoding.

    The residual reported is the Riccati fixed-point defect of the
    extracted P, so callers can see how tightly the LMI optimum matches
    the ARE solution.
    """
    _require_kind(sol, "nominal_lmi")
    n = sol.meta["n"]
    a, b, r = sol.meta["a_nom"], sol.meta["b_nom"], sol.meta["r"]
    p = _sym(smat(sol.x[:svec_dim(n)]))
    k = lqr_gain(p, a, b, r)
    bpa = b.T @ p @ a
    defect = sol.meta["q"] + a.T @ p @ a - bpa.T @ np.linalg.solve(
        r + b.T @ p @ b, bpa
    ) - p
    return AreSolution(
        p=p, k=k, residual=float(np.linalg.norm(defect)), iterations=sol.iterations
    )


def worst_case_cost(sol: SdpSolution) -> float:
    """trace(diag(Q, R) Xi) at the robust optimum: the certified
    worst-case stationary cost over the model ellipsoid."""
    xi = xi_from_solution(sol)
    n = sol.meta["n"]
    q, r = sol.meta["q"], sol.meta["r"]
    return float(np.trace(q @ xi[:n, :n]) + np.trace(r @ xi[n:, n:]))
