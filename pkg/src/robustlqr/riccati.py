"""Discrete-time Riccati solvers: fixed-point ARE iteration and the
finite-horizon backward recursion, plus a reverse-mode gradient through
the recursion and a rollout.

Kept dependency-free on purpose; these act as the reference path the SDP
layers are checked against.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverError
from .linsys import Trajectory

# Consecutive iterations of residual growth before declaring divergence.
_DIVERGENCE_PATIENCE = 50


def _validate_lqr_data(a, b, q, r):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise InputError(f"a must be square, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != n:
        raise InputError(f"b must be {n} x m, got {b.shape}")
    m = b.shape[1]
    if q.shape != (n, n):
        raise InputError(f"q must be {n} x {n}, got {q.shape}")
    if r.shape != (m, m):
        raise InputError(f"r must be {m} x {m}, got {r.shape}")
    return a, b, q, r


def lqr_gain(p: np.ndarray, a: np.ndarray, b: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gain K = -(B^T P B + R)^{-1} B^T P A for a given value matrix P."""
    bpb = r + b.T @ p @ b
    return -np.linalg.solve(bpb, b.T @ p @ a)


def _riccati_map(p, a, b, q, r):
    bpa = b.T @ p @ a
    nxt = q + a.T @ p @ a - bpa.T @ np.linalg.solve(r + b.T @ p @ b, bpa)
    return 0.5 * (nxt + nxt.T)


@dataclass(frozen=True)
class AreSolution:
    """Converged algebraic Riccati solution.

    residual is the Frobenius norm of the fixed-point defect
    ||P - (A'PA + Q - A'PB (R + B'PB)^{-1} B'PA)|| at the returned P.
    """

    p: np.ndarray
    k: np.ndarray
    residual: float
    iterations: int


def solve_are(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> AreSolution:
    """Solve the infinite-horizon discrete ARE by value iteration.

    Iterates P <- A'PA + Q - A'PB (R + B'PB)^{-1} B'PA from P = Q until the
    defect drops below tol. Divergence (defect growing for 50 consecutive
    iterations, or overflowing) raises SolverError with the last residual.
    """
    a, b, q, r = _validate_lqr_data(a, b, q, r)
    p = q.copy()
    prev_res = np.inf
    growth_streak = 0
    for it in range(1, max_iter + 1):
        p_next = _riccati_map(p, a, b, q, r)
        res = float(np.linalg.norm(p_next - p))
        if not np.isfinite(res):
            raise SolverError(
                f"Riccati iteration overflowed at iteration {it} (residual {res})"
            )
        if res < tol:
            residual = float(np.linalg.norm(_riccati_map(p_next, a, b, q, r) - p_next))
            return AreSolution(
                p=p_next, k=lqr_gain(p_next, a, b, r), residual=residual, iterations=it
            )
        growth_streak = growth_streak + 1 if res > prev_res else 0
        if growth_streak >= _DIVERGENCE_PATIENCE:
            raise SolverError(
                f"Riccati iteration diverging: residual {res:.3e} grew for "
                f"{_DIVERGENCE_PATIENCE} consecutive iterations"
            )
        prev_res = res
        p = p_next
    raise SolverError(
        f"Riccati iteration did not reach tol={tol:.1e} in {max_iter} iterations "
        f"(last residual {prev_res:.3e})"
    )


@dataclass(frozen=True)
class FiniteHorizonSolution:
    """Time-varying gains K_0..K_{T-1} and cost-to-go matrices P_0..P_T."""

    gains: np.ndarray
    cost_to_go: np.ndarray

    @property
    def horizon(self) -> int:
        return self.gains.shape[0]


def solve_finite_horizon(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    horizon: int,
) -> FiniteHorizonSolution:
    """Backward Riccati recursion with terminal cost P_T = Q."""
    a, b, q, r = _validate_lqr_data(a, b, q, r)
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    n, m = b.shape
    gains = np.empty((horizon, m, n))
    ctg = np.empty((horizon + 1, n, n))
    ctg[horizon] = q
    for t in range(horizon - 1, -1, -1):
        p_next = ctg[t + 1]
        gains[t] = lqr_gain(p_next, a, b, r)
        p_t = q + a.T @ p_next @ (a + b @ gains[t])
        ctg[t] = 0.5 * (p_t + p_t.T)
    return FiniteHorizonSolution(gains=gains, cost_to_go=ctg)


def finite_horizon_grad(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    sol: FiniteHorizonSolution,
    traj: Trajectory,
    dl_dstates: np.ndarray,
    dl_dcontrols: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of a trajectory loss with respect to {A, B, Q, R}.

    The computational graph is: (A, B, Q, R) -> backward recursion -> gains;
    (A, B, gains, noise) -> rollout -> trajectory -> loss. This runs the
    reverse-mode sweep through both stages by hand; the noise realization
    cancels out of the adjoint so it never needs to be passed in.

    Args:
        sol: the recursion output the trajectory was rolled out with.
        traj: the rollout itself.
        dl_dstates: (T+1, n) loss gradient w.r.t. each state.
        dl_dcontrols: (T, m) loss gradient w.r.t. each control.

    Returns:
        dict with keys a, b, q, r. The q/r entries are symmetrized so they
        pair correctly with symmetric perturbations.
    """
    a, b, q, r = _validate_lqr_data(a, b, q, r)
    horizon = sol.horizon
    if traj.horizon != horizon:
        raise InputError(
            f"trajectory horizon {traj.horizon} does not match solution horizon {horizon}"
        )
    xs, us = traj.states, traj.controls
    gains, ctg = sol.gains, sol.cost_to_go
    n, m = b.shape

    da = np.zeros((n, n))
    db = np.zeros((n, m))
    dq = np.zeros((n, n))
    dr = np.zeros((m, m))
    kbar = np.zeros((horizon, m, n))

    # Adjoint through the rollout x_{t+1} = A x_t + B u_t + w_t, u_t = K_t x_t.
    lam = np.asarray(dl_dstates[horizon], dtype=float)
    for t in range(horizon - 1, -1, -1):
        uc = dl_dcontrols[t] + b.T @ lam
        kbar[t] += np.outer(uc, xs[t])
        da += np.outer(lam, xs[t])
        db += np.outer(lam, us[t])
        lam = dl_dstates[t] + a.T @ lam + gains[t].T @ uc

    # Adjoint through the backward recursion, walked in reverse forward order
    # (step t consumed P_{t+1} and produced K_t and P_t; P_0 feeds nothing).
    pbar = np.zeros((horizon + 1, n, n))
    for t in range(horizon):
        p_next = ctg[t + 1]
        mt = b.T @ p_next
        ht = r + mt @ b
        ft = np.linalg.inv(ht)
        nt = mt @ a

        pb = pbar[t]
        pb_sym = pb + pb.T
        # P_t = Q + A' P_{t+1} A - N' F N
        dq += pb
        da += p_next @ a @ pb_sym
        nbar = -ft @ nt @ pb_sym
        fbar = -nt @ pb @ nt.T
        pbar[t + 1] += a @ pb @ a.T
        # K_t = -F N
        fbar += -kbar[t] @ nt.T
        nbar += -ft @ kbar[t]
        # F = H^{-1}
        hbar = -ft @ fbar @ ft
        # H = R + M B
        dr += hbar
        mbar = hbar @ b.T
        db += mt.T @ hbar
        # N = M A
        mbar += nbar @ a.T
        da += mt.T @ nbar
        # M = B' P_{t+1}
        db += p_next @ mbar.T
        pbar[t + 1] += b @ mbar
    dq += pbar[horizon]

    return {
        "a": da,
        "b": db,
        "q": 0.5 * (dq + dq.T),
        "r": 0.5 * (dr + dr.T),
    }
