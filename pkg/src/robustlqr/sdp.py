"""Dense semidefinite programming: a primal-dual interior-point solver and
implicit differentiation of its solutions.

Problems are stated over a flat decision vector x:

    minimize    c' x
    subject to  A x = b
                F_k(x) = F0_k + sum_i x_i F_ki  is PSD   (one per block)
                x_i >= 0 for i in nonneg_vars

Symmetric matrices travel in scaled lower-triangular "svec" coordinates
(off-diagonal entries multiplied by sqrt(2)), which makes the svec dot
product equal to the Frobenius inner product.

The solver is a Nesterov-Todd scaled predictor-corrector path-following
method with dense linear algebra throughout; block orders here are tens,
not thousands, so sparsity machinery would be pure overhead.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import os

import numpy as np

from .errors import DegenerateSolutionError, InputError

_STEP = 0.98
_STALL_PATIENCE = 10
_COND_LIMIT = 1e12

# ---------------------------------------------------------------------------
# svec / smat and symmetric Kronecker utilities


_svec_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}


def _svec_indices(n: int):
    """(rows, cols, weights, gamma) for dimension n, cached.

    gamma maps svec coordinates to flattened full matrices and has
    orthonormal columns, so gamma.T does the reverse on symmetric input.
    """
    if n not in _svec_cache:
        rows, cols = [], []
        for j in range(n):
            for i in range(j, n):
                rows.append(i)
                cols.append(j)
        rows = np.array(rows, dtype=int)
        cols = np.array(cols, dtype=int)
        w = np.where(rows == cols, 1.0, np.sqrt(2.0))
        d = len(rows)
        gamma = np.zeros((n * n, d))
        for k in range(d):
            m = np.zeros((n, n))
            m[rows[k], cols[k]] = w[k] / (1.0 if rows[k] == cols[k] else 2.0)
            m[cols[k], rows[k]] = m[rows[k], cols[k]]
            gamma[:, k] = m.ravel()
        # rescale columns to unit norm: diag entries already 1, off-diag
        # columns have norm sqrt(2 * (w/2)^2) = w / sqrt(2) = 1. Good as is.
        _svec_cache[n] = (rows, cols, w, gamma)
    return _svec_cache[n]


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def svec(m: np.ndarray) -> np.ndarray:
    """Scaled lower-triangular vectorization of a symmetric matrix."""
    n = m.shape[-1]
    rows, cols, w, _ = _svec_indices(n)
    return m[..., rows, cols] * w


def smat(u: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    d = u.shape[-1]
    n = int(round((np.sqrt(8 * d + 1) - 1) / 2))
    rows, cols, w, _ = _svec_indices(n)
    vals = u / np.where(rows == cols, 1.0, np.sqrt(2.0))
    m = np.zeros(u.shape[:-1] + (n, n))
    m[..., rows, cols] = vals
    m[..., cols, rows] = vals
    return m


def sym_kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of u -> svec((A smat(u) B' + B smat(u) A') / 2)."""
    n = a.shape[0]
    _, _, _, gamma = _svec_indices(n)
    k = np.kron(a, b)
    if a is not b:
        k = 0.5 * (k + np.kron(b, a))
    return gamma.T @ k @ gamma


# ---------------------------------------------------------------------------
# Problem and solution containers


@dataclass(frozen=True)
class PsdBlock:
    """Affine matrix map x -> smat(f0 + g @ x), constrained PSD.

    f0 has svec length dim*(dim+1)/2 and g maps the decision vector into
    the same coordinates; symmetry is therefore structural.
    """

    dim: int
    f0: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        d = svec_dim(self.dim)
        if self.f0.shape != (d,):
            raise InputError(f"f0 must have svec length {d}, got {self.f0.shape}")
        if self.g.ndim != 2 or self.g.shape[0] != d:
            raise InputError(f"g must be {d} x nvars, got {self.g.shape}")

    def eval(self, x: np.ndarray) -> np.ndarray:
        return smat(self.f0 + self.g @ x)


class ParamJacobian:
    """Linear map from named parameter perturbations to problem-data
    perturbations, stored as one dense matrix per parameter block.

    Matrices are built lazily by probing a rebuild closure with central
    differences, which is exact because every encoding in this package has
    problem data polynomial of degree <= 2 in each parameter entry.
    """

    def __init__(self, rebuild, params: dict[str, np.ndarray], data_dim: int):
        self._rebuild = rebuild
        self._params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self._data_dim = data_dim
        self._mats: dict[str, np.ndarray] = {}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._params[name].shape

    def _ensure(self, name: str) -> np.ndarray:
        if name not in self._mats:
            base = self._params[name]
            size = base.size
            mat = np.empty((self._data_dim, size))
            h = 1.0
            for i in range(size):
                bumped = dict(self._params)
                up = base.copy().ravel()
                up[i] += h
                bumped[name] = up.reshape(base.shape)
                hi = self._rebuild(bumped)
                dn = base.copy().ravel()
                dn[i] -= h
                bumped[name] = dn.reshape(base.shape)
                lo = self._rebuild(bumped)
                mat[:, i] = (hi - lo) / (2.0 * h)
            self._mats[name] = mat
        return self._mats[name]

    def forward(self, dparam: dict[str, np.ndarray]) -> np.ndarray:
        """Stacked data perturbation for the given parameter directions."""
        out = np.zeros(self._data_dim)
        for name, dv in dparam.items():
            if name not in self._params:
                raise InputError(f"unknown parameter block {name!r}")
            dv = np.asarray(dv, dtype=float)
            if dv.shape != self._params[name].shape:
                raise InputError(
                    f"perturbation for {name!r} has shape {dv.shape}, "
                    f"expected {self._params[name].shape}"
                )
            out += self._ensure(name) @ dv.ravel()
        return out

    def adjoint(self, data_cotangent: np.ndarray, names=None) -> dict[str, np.ndarray]:
        """Parameter-space gradients for a data-space cotangent."""
        grads = {}
        for name in names if names is not None else self._params:
            g = self._ensure(name).T @ data_cotangent
            grads[name] = g.reshape(self._params[name].shape)
        return grads


@dataclass(frozen=True)
class SdpProblem:
    """A dense SDP instance; see module docstring for the canonical form."""

    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    blocks: tuple[PsdBlock, ...]
    nonneg_vars: tuple[int, ...] = ()
    param_jacobian: ParamJacobian | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.c.shape[0]
        if self.a_eq.ndim != 2 or self.a_eq.shape[1] != n:
            raise InputError(f"a_eq must have {n} columns, got {self.a_eq.shape}")
        if self.b_eq.shape != (self.a_eq.shape[0],):
            raise InputError("b_eq length must match a_eq rows")
        for blk in self.blocks:
            if blk.g.shape[1] != n:
                raise InputError("block coefficient width must match len(c)")
        for i in self.nonneg_vars:
            if not 0 <= i < n:
                raise InputError(f"nonneg var index {i} out of range")

    @property
    def nvars(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class SdpSolution:
    """Solver output. z_blocks/s_blocks follow the canonical cone order:
    declared PSD blocks first, then one 1x1 cone per nonneg variable.

    residuals are recomputed from the returned vectors: primal/dual
    equation norms, the complementarity gap, and the worst PSD violation
    of the affine block maps at x.
    """

    x: np.ndarray
    y: np.ndarray
    z_blocks: tuple[np.ndarray, ...]
    s_blocks: tuple[np.ndarray, ...]
    objective: float
    status: str
    residuals: dict[str, float]
    iterations: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Canonicalization helpers


def _canonical_cones(prob: SdpProblem):
    """Declared PSD blocks plus a 1x1 cone per nonneg variable."""
    dims = [blk.dim for blk in prob.blocks]
    f0s = [np.asarray(blk.f0, dtype=float) for blk in prob.blocks]
    gs = [np.asarray(blk.g, dtype=float) for blk in prob.blocks]
    n = prob.nvars
    for i in prob.nonneg_vars:
        dims.append(1)
        f0s.append(np.zeros(1))
        row = np.zeros((1, n))
        row[0, i] = 1.0
        gs.append(row)
    return dims, f0s, gs


def _solve_sym(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(mat, rhs, rcond=None)[0]


def _chol(m: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        # Nudge marginally indefinite iterates back inside the cone.
        w, v = np.linalg.eigh(0.5 * (m + m.T))
        floor = max(1e-14, 1e-14 * float(w.max(initial=1.0)))
        w = np.maximum(w, floor)
        return np.linalg.cholesky((v * w) @ v.T)


def _min_eig_step(chol_l: np.ndarray, delta: np.ndarray) -> float:
    """Largest alpha with S + alpha*Delta staying PSD, given S = L L'."""
    w = np.linalg.solve(chol_l, np.linalg.solve(chol_l, delta).T)
    lam_min = float(np.linalg.eigvalsh(0.5 * (w + w.T)).min())
    if lam_min >= 0.0:
        return np.inf
    return -1.0 / lam_min


def _assemble_kkt(a_eq, dims, gs, s_mats, z_mats):
    """Jacobian of the stationarity / feasibility / complementarity map.

    Unknown ordering is (dx, dy, dz). Complementarity rows linearize
    sym(S Z) = 0 with s = f0 + G x substituted, via the Jordan operators
    L_Z = sym_kron(Z, I) and L_S = sym_kron(S, I). Returns the matrix,
    the dz slice per cone, and the L_Z operators (reused by callers that
    build right-hand sides from data perturbations).
    """
    nvar = a_eq.shape[1]
    p = a_eq.shape[0]
    svds = [svec_dim(d) for d in dims]
    size = nvar + p + sum(svds)
    jac = np.zeros((size, size))
    jac[:nvar, nvar:nvar + p] = -a_eq.T
    jac[nvar:nvar + p, :nvar] = a_eq
    z_slices = []
    lz_ops = []
    off = nvar + p
    for k, d in enumerate(dims):
        sl = slice(off, off + svds[k])
        z_slices.append(sl)
        eye = np.eye(d)
        lz = sym_kron(z_mats[k], eye)
        lz_ops.append(lz)
        jac[:nvar, sl] = -gs[k].T
        jac[sl, :nvar] = lz @ gs[k]
        jac[sl, sl] = sym_kron(s_mats[k], eye)
        off += svds[k]
    return jac, z_slices, lz_ops


# ---------------------------------------------------------------------------
# Interior-point solver


def solve(
    prob: SdpProblem,
    tol: float = 1e-8,
    max_iter: int = 200,
    verbose: bool = False,
) -> SdpSolution:
    """Solve an SdpProblem to the requested residual tolerance.

    Returns an SdpSolution whose status is one of optimal / infeasible /
    unbounded / max_iter; non-convergence is reported there, never raised.
    """
    dims, f0s, gs = _canonical_cones(prob)
    n_cones = len(dims)
    c = np.asarray(prob.c, dtype=float)
    a = np.asarray(prob.a_eq, dtype=float)
    b = np.asarray(prob.b_eq, dtype=float)
    nvar = prob.nvars
    p = a.shape[0]
    g_all = np.vstack(gs) if n_cones else np.zeros((0, nvar))
    f0_all = np.concatenate(f0s) if n_cones else np.zeros(0)
    slices = []
    off = 0
    for d in dims:
        dd = svec_dim(d)
        slices.append(slice(off, off + dd))
        off += dd
    nu = float(sum(dims))

    def split(vec):
        return [vec[sl] for sl in slices]

    # Least-squares start, shifted into the cone interior (conelp-style).
    if p:
        kkt0 = np.block([[g_all.T @ g_all, a.T], [a, np.zeros((p, p))]])
        sol0 = _solve_sym(kkt0, np.concatenate([-g_all.T @ f0_all, b]))
        x = sol0[:nvar]
        kkt1 = np.block([[-(g_all.T @ g_all), a.T], [a, np.zeros((p, p))]])
        sol1 = _solve_sym(kkt1, np.concatenate([c, np.zeros(p)]))
        y = sol1[nvar:]
        z_flat = -g_all @ sol1[:nvar]
    else:
        x = np.linalg.lstsq(g_all, -f0_all, rcond=None)[0]
        y = np.zeros(0)
        z_flat = np.linalg.lstsq(g_all.T, c, rcond=None)[0]

    s_blocks, z_blocks = [], []
    for sl, d in zip(slices, dims):
        sm = smat(f0_all[sl] + g_all[sl] @ x)
        lam_min = float(np.linalg.eigvalsh(sm).min()) if d else 0.0
        if lam_min <= 0:
            sm = sm + (1.0 - lam_min) * np.eye(d)
        s_blocks.append(svec(sm))
        zm = smat(z_flat[sl])
        lam_min = float(np.linalg.eigvalsh(zm).min()) if d else 0.0
        if lam_min <= 0:
            zm = zm + (1.0 - lam_min) * np.eye(d)
        z_blocks.append(svec(zm))

    status = "max_iter"
    best_score = np.inf
    best_pt = None
    stall_ref = np.inf
    stall = 0
    norm_b = 1.0 + np.linalg.norm(b)
    norm_c = 1.0 + np.linalg.norm(c)
    norm_f0 = 1.0 + np.linalg.norm(f0_all)
    it_done = 0

    for it in range(1, max_iter + 1):
        it_done = it
        s = np.concatenate(s_blocks)
        z = np.concatenate(z_blocks)
        rd = c - a.T @ y - g_all.T @ z
        rp = b - a @ x
        rcent = f0_all + g_all @ x - s
        gap = float(s @ z)
        pobj = float(c @ x)
        dobj = float(b @ y - f0_all @ z)
        pres = max(np.linalg.norm(rp) / norm_b, np.linalg.norm(rcent) / norm_f0)
        dres = np.linalg.norm(rd) / norm_c
        relgap = abs(gap) / (1.0 + max(abs(pobj), abs(dobj)))
        cur = max(pres, dres, relgap)
        if cur < best_score:
            best_score = cur
            best_pt = (
                x.copy(),
                y.copy(),
                [blk.copy() for blk in s_blocks],
                [blk.copy() for blk in z_blocks],
            )
        if verbose:
            print(
                f"iter {it:3d}  pres {pres:9.2e}  dres {dres:9.2e}  "
                f"gap {relgap:9.2e}  pobj {pobj:+.6e}"
            )
        if pres <= tol and dres <= tol and relgap <= tol:
            status = "optimal"
            break

        # Infeasibility certificates carried by diverging iterates.
        if it > 10:
            if dobj > 0 and np.linalg.norm(a.T @ y + g_all.T @ z) / dobj <= 1e-8:
                status = "infeasible"
                break
            if pobj < 0:
                xr = x / (-pobj)
                cone_viol = 0.0
                for sl, d in zip(slices, dims):
                    lam = float(np.linalg.eigvalsh(smat(g_all[sl] @ xr)).min())
                    cone_viol = max(cone_viol, -lam)
                if max(np.linalg.norm(a @ xr), cone_viol) <= 1e-8:
                    status = "unbounded"
                    break

        if cur < 0.7 * stall_ref:
            stall_ref = cur
            stall = 0
        else:
            stall += 1
            if stall >= _STALL_PATIENCE:
                break

        # Nesterov-Todd scaling per cone: T Z T = S, R R' = T, and the
        # scaled variable R^-1 S R^-T = R' Z R = diag(lam).
        rs, rinvs, lams, tmats, hinvs = [], [], [], [], []
        failed = False
        for k, (sl, d) in enumerate(zip(slices, dims)):
            try:
                ls = _chol(smat(s_blocks[k]))
                lz = _chol(smat(z_blocks[k]))
            except np.linalg.LinAlgError:
                failed = True
                break
            u_svd, sig, vt = np.linalg.svd(lz.T @ ls)
            r = ls @ vt.T / np.sqrt(sig)
            r_inv = (vt.T * np.sqrt(sig)).T @ np.linalg.inv(ls)
            t = r @ r.T
            t_inv = r_inv.T @ r_inv
            rs.append(r)
            rinvs.append(r_inv)
            lams.append(sig)
            tmats.append(0.5 * (t + t.T))
            hinvs.append(sym_kron(0.5 * (t_inv + t_inv.T), 0.5 * (t_inv + t_inv.T)))
        if failed:
            break

        m_mat = np.zeros((nvar, nvar))
        for k, sl in enumerate(slices):
            gk = g_all[sl]
            m_mat += gk.T @ hinvs[k] @ gk
        kkt = np.block([[m_mat, a.T], [a, np.zeros((p, p))]]) if p else m_mat

        def newton(v):
            w = v - rcent
            rhs_x = -rd.copy()
            for k, sl in enumerate(slices):
                rhs_x += g_all[sl].T @ (hinvs[k] @ w[sl])
            if p:
                rhs = np.concatenate([rhs_x, rp])
                sol = _solve_sym(kkt, rhs)
                sol += _solve_sym(kkt, rhs - kkt @ sol)
                dx, dy = sol[:nvar], -sol[nvar:]
            else:
                sol = _solve_sym(kkt, rhs_x)
                sol += _solve_sym(kkt, rhs_x - kkt @ sol)
                dx, dy = sol, np.zeros(0)
            dz = np.empty_like(w)
            for k, sl in enumerate(slices):
                dz[sl] = hinvs[k] @ (w[sl] - g_all[sl] @ dx)
            # G dx - ds = -rcent, rearranged; equivalent to v - H dz but does
            # not amplify rounding through the squared NT scaling.
            ds = rcent + g_all @ dx
            return dx, dy, dz, ds

        # Predictor.
        v_aff = -s
        dx_a, dy_a, dz_a, ds_a = newton(v_aff)
        alpha_p = 1.0
        alpha_d = 1.0
        for k, sl in enumerate(slices):
            ls = _chol(smat(s_blocks[k]))
            lz = _chol(smat(z_blocks[k]))
            alpha_p = min(alpha_p, _min_eig_step(ls, smat(ds_a[sl])))
            alpha_d = min(alpha_d, _min_eig_step(lz, smat(dz_a[sl])))
        gap_aff = float(
            (s + min(1.0, alpha_p) * ds_a) @ (z + min(1.0, alpha_d) * dz_a)
        )
        mu = gap / nu
        sigma = min(1.0, max(0.0, (max(gap_aff, 0.0) / gap) ** 3)) if gap > 0 else 0.0

        # Corrector with Mehrotra second-order term, in scaled coordinates.
        v = np.empty_like(s)
        for k, sl in enumerate(slices):
            lam = lams[k]
            ds_t = rinvs[k] @ smat(ds_a[sl]) @ rinvs[k].T
            dz_t = rs[k].T @ smat(dz_a[sl]) @ rs[k]
            corr = 0.5 * (ds_t @ dz_t + dz_t @ ds_t)
            rhs_mat = -np.diag(lam * lam) - corr
            rhs_mat[np.diag_indices_from(rhs_mat)] += sigma * mu
            denom = 0.5 * (lam[:, None] + lam[None, :])
            e_mat = rhs_mat / denom
            v[sl] = svec(rs[k] @ e_mat @ rs[k].T)

        dx, dy, dz, ds = newton(v)
        alpha_p = np.inf
        alpha_d = np.inf
        for k, sl in enumerate(slices):
            ls = _chol(smat(s_blocks[k]))
            lz = _chol(smat(z_blocks[k]))
            alpha_p = min(alpha_p, _min_eig_step(ls, smat(ds[sl])))
            alpha_d = min(alpha_d, _min_eig_step(lz, smat(dz[sl])))
        alpha_p = min(1.0, _STEP * alpha_p)
        alpha_d = min(1.0, _STEP * alpha_d)

        x = x + alpha_p * dx
        y = y + alpha_d * dy
        for k, sl in enumerate(slices):
            s_new = smat(s_blocks[k] + alpha_p * ds[sl])
            z_new = smat(z_blocks[k] + alpha_d * dz[sl])
            s_blocks[k] = svec(0.5 * (s_new + s_new.T))
            z_blocks[k] = svec(0.5 * (z_new + z_new.T))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            break

    def loop_score(xv, yv, s_list, z_list):
        sv = np.concatenate(s_list)
        zv = np.concatenate(z_list)
        pres_v = max(
            np.linalg.norm(b - a @ xv) / norm_b,
            np.linalg.norm(f0_all + g_all @ xv - sv) / norm_f0,
        )
        dres_v = np.linalg.norm(c - a.T @ yv - g_all.T @ zv) / norm_c
        pobj_v = float(c @ xv)
        dobj_v = float(b @ yv - f0_all @ zv)
        rg_v = abs(float(sv @ zv)) / (1.0 + max(abs(pobj_v), abs(dobj_v)))
        return max(pres_v, dres_v, rg_v)

    def kkt_polish(x0, y0, z_list):
        """Newton-correct (x, y, z) on the unscaled optimality equations.

        The NT iterations bottom out on a roundoff floor set by the squared
        scaling, while the plain KKT Jacobian stays well conditioned near a
        strictly complementary optimum, so a couple of direct Newton steps
        recover several digits. Slacks are s = f0 + G x throughout.
        """
        xx, yy = x0.copy(), y0.copy()
        zz = [blk.copy() for blk in z_list]

        def score(xv, yv, zv):
            sv = f0_all + g_all @ xv
            zcat = np.concatenate(zv)
            viol = 0.0
            for kk, sl in enumerate(slices):
                viol = max(viol, -float(np.linalg.eigvalsh(smat(sv[sl])).min()))
                viol = max(viol, -float(np.linalg.eigvalsh(smat(zv[kk])).min()))
            pres_v = np.linalg.norm(b - a @ xv) / norm_b
            dres_v = np.linalg.norm(c - a.T @ yv - g_all.T @ zcat) / norm_c
            pobj_v = float(c @ xv)
            dobj_v = float(b @ yv - f0_all @ zcat)
            rg_v = abs(float(sv @ zcat)) / (1.0 + max(abs(pobj_v), abs(dobj_v)))
            return max(pres_v, dres_v, rg_v, viol)

        best_sc = score(xx, yy, zz)
        best_state = (xx.copy(), yy.copy(), [blk.copy() for blk in zz])
        gs_split = [g_all[sl] for sl in slices]
        for _ in range(2):
            s_mats = [smat(f0_all[sl] + g_all[sl] @ xx) for sl in slices]
            z_mats = [smat(blk) for blk in zz]
            jac, z_slices, _ = _assemble_kkt(a, dims, gs_split, s_mats, z_mats)
            rhs = np.zeros(jac.shape[0])
            zcat = np.concatenate(zz)
            rhs[:nvar] = -(c - a.T @ yy - g_all.T @ zcat)
            rhs[nvar:nvar + p] = b - a @ xx
            for k, sl_j in enumerate(z_slices):
                prod = s_mats[k] @ z_mats[k]
                rhs[sl_j] = -svec(0.5 * (prod + prod.T))
            try:
                step = np.linalg.solve(jac, rhs)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)):
                break
            xx = xx + step[:nvar]
            yy = yy + step[nvar:nvar + p]
            off2 = nvar + p
            for k in range(len(zz)):
                zz[k] = zz[k] + step[off2:off2 + zz[k].size]
                off2 += zz[k].size
            sc = score(xx, yy, zz)
            if sc < best_sc:
                best_sc = sc
                best_state = (xx.copy(), yy.copy(), [blk.copy() for blk in zz])
        return best_sc, best_state

    if status in ("optimal", "max_iter"):
        # The step update lands after the residual check, so the very last
        # iterate was never scored; prefer the best one actually seen.
        if best_pt is not None and best_score < loop_score(x, y, s_blocks, z_blocks):
            x, y = best_pt[0].copy(), best_pt[1].copy()
            s_blocks = [blk.copy() for blk in best_pt[2]]
            z_blocks = [blk.copy() for blk in best_pt[3]]
        psc, (px, py, pz) = kkt_polish(x, y, z_blocks)
        if psc < loop_score(x, y, s_blocks, z_blocks):
            x, y, z_blocks = px, py, pz
            s_blocks = [blk.copy() for blk in split(f0_all + g_all @ x)]

    s = np.concatenate(s_blocks)
    z = np.concatenate(z_blocks)
    pres = max(
        np.linalg.norm(b - a @ x) / norm_b,
        np.linalg.norm(f0_all + g_all @ x - s) / norm_f0,
    )
    dres = np.linalg.norm(c - a.T @ y - g_all.T @ z) / norm_c
    pobj = float(c @ x)
    dobj = float(b @ y - f0_all @ z)
    relgap = abs(float(s @ z)) / (1.0 + max(abs(pobj), abs(dobj)))
    # Polished points satisfy the KKT equations but are not confined to the
    # cone by construction, so membership of s and z gates optimality too.
    pair_viol = 0.0
    for k in range(len(dims)):
        pair_viol = max(pair_viol, -float(np.linalg.eigvalsh(smat(s_blocks[k])).min()))
        pair_viol = max(pair_viol, -float(np.linalg.eigvalsh(smat(z_blocks[k])).min()))
    if status in ("optimal", "max_iter"):
        status = "optimal" if max(pres, dres, relgap, pair_viol) <= tol else "max_iter"
    cone_viol = 0.0
    for sl, d in zip(slices, dims):
        lam = float(np.linalg.eigvalsh(smat(f0_all[sl] + g_all[sl] @ x)).min())
        cone_viol = max(cone_viol, -lam)
    residuals = {
        "primal": float(np.linalg.norm(b - a @ x)),
        "dual": float(np.linalg.norm(c - a.T @ y - g_all.T @ z)),
        "conic": float(np.linalg.norm(f0_all + g_all @ x - s)),
        "gap": float(s @ z),
        "psd_violation": float(cone_viol),
    }
    return SdpSolution(
        x=x,
        y=y,
        z_blocks=tuple(split(z)),
        s_blocks=tuple(split(s)),
        objective=float(c @ x),
        status=status,
        residuals=residuals,
        iterations=it_done,
        meta=dict(prob.meta),
    )


def batch_solve(
    problems,
    tol: float = 1e-8,
    max_iter: int = 200,
    workers: int | None = None,
) -> list[SdpSolution]:
    """Solve a list of problems on a thread pool, preserving input order."""
    if workers is None:
        workers = min(8, os.cpu_count() or 1)
    if workers <= 1 or len(problems) <= 1:
        return [solve(pb, tol=tol, max_iter=max_iter) for pb in problems]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda pb: solve(pb, tol=tol, max_iter=max_iter), problems))


# ---------------------------------------------------------------------------
# Implicit differentiation through the KKT conditions


@dataclass(frozen=True)
class SolutionDerivative:
    """Directional derivative of an SDP solution."""

    dx: np.ndarray
    dy: np.ndarray
    dz_blocks: tuple[np.ndarray, ...]


def _data_layout(prob: SdpProblem):
    """Offsets of (c, a_eq, b_eq, per-block f0 and g) in the flat data vector."""
    nvar = prob.nvars
    p = prob.a_eq.shape[0]
    sizes = [nvar, p * nvar, p]
    for blk in prob.blocks:
        d = svec_dim(blk.dim)
        sizes.extend([d, d * nvar])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return offsets, int(offsets[-1])


def pack_data(prob: SdpProblem) -> np.ndarray:
    """Problem data flattened in the canonical layout used by ParamJacobian."""
    parts = [prob.c, prob.a_eq.ravel(), prob.b_eq]
    for blk in prob.blocks:
        parts.extend([blk.f0, blk.g.ravel()])
    return np.concatenate([np.asarray(q, dtype=float).ravel() for q in parts])


def data_dim(prob: SdpProblem) -> int:
    return _data_layout(prob)[1]


def _unpack_data(prob: SdpProblem, flat: np.ndarray):
    offsets, total = _data_layout(prob)
    if flat.shape != (total,):
        raise InputError(f"data vector must have length {total}, got {flat.shape}")
    nvar = prob.nvars
    p = prob.a_eq.shape[0]
    dc = flat[offsets[0]:offsets[1]]
    da = flat[offsets[1]:offsets[2]].reshape(p, nvar)
    db = flat[offsets[2]:offsets[3]]
    dblocks = []
    pos = 3
    for blk in prob.blocks:
        d = svec_dim(blk.dim)
        df0 = flat[offsets[pos]:offsets[pos + 1]]
        dg = flat[offsets[pos + 1]:offsets[pos + 2]].reshape(d, nvar)
        dblocks.append((df0, dg))
        pos += 2
    return dc, da, db, dblocks


class _KktSystem:
    """Linearized KKT conditions at a solution, shared by forward/adjoint."""

    def __init__(self, prob: SdpProblem, sol: SdpSolution):
        dims, f0s, gs = _canonical_cones(prob)
        nvar = prob.nvars
        p = prob.a_eq.shape[0]
        svd_dims = [svec_dim(d) for d in dims]
        d_total = sum(svd_dims)
        n_rows = nvar + p + d_total

        self.prob = prob
        self.sol = sol
        self.dims = dims
        self.gs = gs
        self.nvar = nvar
        self.p = p

        s_mats = [smat(blk) for blk in sol.s_blocks]
        z_mats = [smat(blk) for blk in sol.z_blocks]
        jac, self.z_slices, self.lz_ops = _assemble_kkt(
            prob.a_eq, dims, gs, s_mats, z_mats
        )
        assert jac.shape == (n_rows, n_rows)
        self.jac = jac
        cond = np.linalg.cond(jac)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise DegenerateSolutionError(
                f"KKT system condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}; "
                "the solution map is not reliably differentiable here"
            )

    def rhs_from_data(self, flat: np.ndarray) -> np.ndarray:
        dc, da, db, dblocks = _unpack_data(self.prob, flat)
        prob, sol = self.prob, self.sol
        rhs = np.zeros(self.jac.shape[0])
        rhs[: self.nvar] = -dc + da.T @ sol.y
        rhs[self.nvar:self.nvar + self.p] = db - da @ sol.x
        for k, (df0, dg) in enumerate(dblocks):
            rhs[: self.nvar] += dg.T @ sol.z_blocks[k]
            rhs[self.z_slices[k]] = -self.lz_ops[k] @ (df0 + dg @ sol.x)
        # Canonical nonneg cones carry no parameter data.
        return rhs

    def data_cotangent(self, w: np.ndarray) -> np.ndarray:
        """Adjoint of rhs_from_data at the multiplier vector w."""
        prob, sol = self.prob, self.sol
        w1 = w[: self.nvar]
        w2 = w[self.nvar:self.nvar + self.p]
        parts = [-w1, (np.outer(sol.y, w1) - np.outer(w2, sol.x)).ravel(), w2]
        for k, blk in enumerate(prob.blocks):
            lzw = self.lz_ops[k] @ w[self.z_slices[k]]
            cot_f0 = -lzw
            cot_g = np.outer(sol.z_blocks[k], w1) - np.outer(lzw, sol.x)
            parts.extend([cot_f0, cot_g.ravel()])
        return np.concatenate(parts)

    def forward(self, flat: np.ndarray) -> SolutionDerivative:
        u = np.linalg.solve(self.jac, self.rhs_from_data(flat))
        dz = tuple(u[sl].copy() for sl in self.z_slices[: len(self.prob.blocks)])
        return SolutionDerivative(
            dx=u[: self.nvar], dy=u[self.nvar:self.nvar + self.p], dz_blocks=dz
        )

    def adjoint_data(self, x_bar: np.ndarray) -> np.ndarray:
        rhs = np.zeros(self.jac.shape[0])
        rhs[: self.nvar] = x_bar
        w = np.linalg.solve(self.jac.T, rhs)
        return self.data_cotangent(w)


def kkt_differentiate(
    prob: SdpProblem,
    sol: SdpSolution,
    dparam: dict[str, np.ndarray],
) -> SolutionDerivative:
    """Directional derivative of the solution for a parameter perturbation.

    Solves the KKT system linearized at (x, y, z) under strict
    complementarity. Near-degenerate solutions (condition number beyond
    1e12) raise DegenerateSolutionError so callers can fall back to finite
    differences.
    """
    if prob.param_jacobian is None:
        raise InputError("problem was built without a param_jacobian")
    if sol.status != "optimal":
        raise InputError(f"cannot differentiate a solution with status {sol.status!r}")
    system = _KktSystem(prob, sol)
    return system.forward(prob.param_jacobian.forward(dparam))


def kkt_adjoint(
    prob: SdpProblem,
    sol: SdpSolution,
    x_cotangent: np.ndarray,
    names=None,
) -> dict[str, np.ndarray]:
    """Gradients of <x_cotangent, x(theta)> w.r.t. named parameter blocks.

    This is the transpose of kkt_differentiate: one linear solve against
    the transposed KKT system, then the parameter Jacobian adjoint.
    """
    if prob.param_jacobian is None:
        raise InputError("problem was built without a param_jacobian")
    if sol.status != "optimal":
        raise InputError(f"cannot differentiate a solution with status {sol.status!r}")
    system = _KktSystem(prob, sol)
    cot = system.adjoint_data(np.asarray(x_cotangent, dtype=float))
    return prob.param_jacobian.adjoint(cot, names=names)


# ---------------------------------------------------------------------------
# Debug dump


def dump_triplets(prob: SdpProblem, path: str) -> None:
    """Write the instance as sparse triplets, one matrix per stanza.

    Meant for eyeballing or re-reading from an external tool; not a
    performance path.
    """
    lines = [f"# sdp instance: nvars={prob.nvars} eq={prob.a_eq.shape[0]} "
             f"blocks={len(prob.blocks)} nonneg={list(prob.nonneg_vars)}"]
    lines.append("c")
    for i, v in enumerate(prob.c):
        if v != 0.0:
            lines.append(f"{i} {v!r}")
    lines.append("a_eq")
    for (i, j), v in np.ndenumerate(prob.a_eq):
        if v != 0.0:
            lines.append(f"{i} {j} {v!r}")
    lines.append("b_eq")
    for i, v in enumerate(prob.b_eq):
        if v != 0.0:
            lines.append(f"{i} {v!r}")
    for k, blk in enumerate(prob.blocks):
        lines.append(f"block {k} dim {blk.dim} f0")
        for i, v in enumerate(blk.f0):
            if v != 0.0:
                lines.append(f"{i} {v!r}")
        lines.append(f"block {k} g")
        for (i, j), v in np.ndenumerate(blk.g):
            if v != 0.0:
                lines.append(f"{i} {j} {v!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
