"""Discrete-time linear systems, ellipsoidal model uncertainty and rollouts.

State evolves as x_{t+1} = A x_t + B u_t + w_t with w_t ~ N(0, sigma^2 I).
Model uncertainty is an ellipsoid around a nominal [A_nom, B_nom] pair,
expressed through a positive definite shape matrix D.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError

# Closed-loop spectral radius must clear this margin to count as stable.
STABILITY_MARGIN = 1e-9

_SPD_TOL = 1e-10


def _as_readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


def _check_spd(m: np.ndarray, name: str) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-10 * max(1.0, np.abs(m).max())):
        raise InputError(f"{name} must be symmetric")
    eigmin = float(np.linalg.eigvalsh(m).min())
    if eigmin <= _SPD_TOL:
        raise InputError(f"{name} must be positive definite, min eigenvalue {eigmin:.3e}")


def spectral_radius(m: np.ndarray) -> float:
    """Largest absolute eigenvalue of a square matrix."""
    return float(np.abs(np.linalg.eigvals(np.asarray(m, dtype=float))).max())


@dataclass(frozen=True)
class LinearSystem:
    """Nominal model plus quadratic cost weights and process noise level.

    Attributes:
        a_nom: nominal state matrix, n x n.
        b_nom: nominal input matrix, n x m.
        q: state cost weight, symmetric positive definite n x n.
        r: control cost weight, symmetric positive definite m x m.
        sigma: process noise standard deviation, >= 0.
    """

    a_nom: np.ndarray
    b_nom: np.ndarray
    q: np.ndarray
    r: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a_nom", _as_readonly(self.a_nom))
        object.__setattr__(self, "b_nom", _as_readonly(self.b_nom))
        object.__setattr__(self, "q", _as_readonly(self.q))
        object.__setattr__(self, "r", _as_readonly(self.r))
        object.__setattr__(self, "sigma", float(self.sigma))
        n, m = self.dims
        if self.a_nom.shape != (n, n):
            raise InputError(f"a_nom must be square, got {self.a_nom.shape}")
        if self.b_nom.ndim != 2 or self.b_nom.shape[0] != n:
            raise InputError(f"b_nom must be n x m with n={n}, got {self.b_nom.shape}")
        _check_spd(self.q, "q")
        _check_spd(self.r, "r")
        if self.q.shape != (n, n):
            raise InputError(f"q must be {n} x {n}, got {self.q.shape}")
        if self.r.shape != (m, m):
            raise InputError(f"r must be {m} x {m}, got {self.r.shape}")
        if self.sigma < 0:
            raise InputError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def dims(self) -> tuple[int, int]:
        """(state dimension n, input dimension m)."""
        return self.a_nom.shape[0], self.b_nom.shape[1]


@dataclass(frozen=True)
class UncertaintyEllipsoid:
    """Ellipsoidal model set {X = [A, B] : (X^T - center)^T D (X^T - center) <= I}.

    Attributes:
        d: shape matrix, symmetric positive definite, (n+m) x (n+m).
           Larger D means a smaller ellipsoid (less uncertainty).
        center: ellipsoid center, (n+m) x n; the transpose of [A_nom, B_nom].
    """

    d: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", _as_readonly(self.d))
        object.__setattr__(self, "center", _as_readonly(self.center))
        _check_spd(self.d, "d")
        k = self.d.shape[0]
        if self.center.ndim != 2 or self.center.shape[0] != k:
            raise InputError(
                f"center must be (n+m) x n with n+m={k}, got {self.center.shape}"
            )
        n = self.center.shape[1]
        if k <= n:
            raise InputError(f"center shape {self.center.shape} implies m <= 0")

    @classmethod
    def from_system(cls, sys: LinearSystem, d: np.ndarray) -> "UncertaintyEllipsoid":
        center = np.hstack([sys.a_nom, sys.b_nom]).T
        return cls(d=d, center=center)

    @property
    def dims(self) -> tuple[int, int]:
        n = self.center.shape[1]
        return n, self.center.shape[0] - n

    def contains(self, a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
        """Whether the model [a, b] lies inside (or on) the ellipsoid."""
        delta = np.hstack([a, b]).T - self.center
        gram = delta.T @ self.d @ delta
        return float(np.linalg.eigvalsh(gram).max()) <= 1.0 + tol

    def boundary_models(self, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Sample models at extreme points of the ellipsoid boundary.

        Each sample saturates the membership constraint as an equality,
        delta' D delta = I, by mapping a Haar-distributed orthonormal frame
        through D^{-1/2}. These are the corners of the set, which is where
        worst-case models live; perturbing along a single direction instead
        would leave most of the boundary unexplored. Deterministic for a
        given seed.
        """
        n, m = self.dims
        rng = np.random.Generator(np.random.Philox(key=seed))
        evals, evecs = np.linalg.eigh(self.d)
        d_inv_half = evecs @ np.diag(1.0 / np.sqrt(evals)) @ evecs.T
        models = []
        for _ in range(count):
            g = rng.standard_normal((n + m, n))
            frame, rfac = np.linalg.qr(g)
            # sign fix keeps the map continuous in g, hence stable per seed
            frame = frame * np.sign(np.diag(rfac))
            x = (self.center + d_inv_half @ frame).T
            models.append((x[:, :n].copy(), x[:, n:].copy()))
        return models


@dataclass(frozen=True)
class GainPolicy:
    """Static linear state feedback u = K x.

    Attributes:
        k: feedback gain, m x n.
        spectral_radius: closed-loop spectral radius of the model the gain
            was computed against (informational; not re-derived here).
    """

    k: np.ndarray
    spectral_radius: float

    def __post_init__(self):
        object.__setattr__(self, "k", _as_readonly(self.k))
        object.__setattr__(self, "spectral_radius", float(self.spectral_radius))
        if self.k.ndim != 2:
            raise InputError(f"gain must be a matrix, got shape {self.k.shape}")

    @classmethod
    def from_gain(cls, k: np.ndarray, a: np.ndarray, b: np.ndarray) -> "GainPolicy":
        k = np.asarray(k, dtype=float)
        return cls(k=k, spectral_radius=spectral_radius(a + b @ k))

    @property
    def is_stabilizing(self) -> bool:
        return self.spectral_radius < 1.0 - STABILITY_MARGIN


@dataclass(frozen=True)
class Trajectory:
    """A rollout: states has horizon+1 rows, controls has horizon rows."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _as_readonly(self.states))
        object.__setattr__(self, "controls", _as_readonly(self.controls))
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise InputError(
                f"states/controls length mismatch: {self.states.shape[0]} vs "
                f"{self.controls.shape[0]} + 1"
            )

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def stacked(self) -> np.ndarray:
        """States and controls flattened into one vector (for loss norms)."""
        return np.concatenate([self.states.ravel(), self.controls.ravel()])


def noise_sequence(sigma: float, horizon: int, n: int, seed: int) -> np.ndarray:
    """Gaussian process noise, shape (horizon, n).

    Uses the counter-based Philox generator keyed on the seed, so each
    trajectory owns an independent stream regardless of scheduling.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    return sigma * rng.standard_normal((horizon, n))


def sample_initial_states(count: int, n: int, seed: int) -> np.ndarray:
    """Standard normal initial states, shape (count, n)."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.standard_normal((count, n))


def rollout_given_noise(
    model: tuple[np.ndarray, np.ndarray],
    gains: np.ndarray,
    x0: np.ndarray,
    noise: np.ndarray,
) -> Trajectory:
    """Simulate u_t = K_t x_t on a fixed noise sequence.

    Args:
        model: (A, B) pair to roll out on.
        gains: single m x n gain, or (horizon, m, n) time-varying gains.
        x0: initial state.
        noise: (horizon, n) additive noise; also fixes the horizon.
    """
    a, b = (np.asarray(model[0], dtype=float), np.asarray(model[1], dtype=float))
    horizon = noise.shape[0]
    gains = np.asarray(gains, dtype=float)
    if gains.ndim == 2:
        gains = np.broadcast_to(gains, (horizon,) + gains.shape)
    elif gains.shape[0] != horizon:
        raise InputError(
            f"got {gains.shape[0]} gains for horizon {horizon}"
        )
    n, m = b.shape
    states = np.empty((horizon + 1, n))
    controls = np.empty((horizon, m))
    states[0] = np.asarray(x0, dtype=float)
    for t in range(horizon):
        controls[t] = gains[t] @ states[t]
        states[t + 1] = a @ states[t] + b @ controls[t] + noise[t]
    return Trajectory(states=states, controls=controls)


def rollout(
    sys: LinearSystem,
    model: tuple[np.ndarray, np.ndarray],
    policy: GainPolicy,
    x0: np.ndarray,
    horizon: int,
    seed: int,
) -> Trajectory:
    """Stochastic rollout of a static gain policy on the given model.

    Noise level comes from sys.sigma; the model may differ from the nominal
    one (e.g. a sample from the uncertainty set).
    """
    n, _ = sys.dims
    if np.asarray(x0).shape != (n,):
        raise InputError(f"x0 must have shape ({n},), got {np.asarray(x0).shape}")
    noise = noise_sequence(sys.sigma, horizon, n, seed)
    return rollout_given_noise(model, policy.k, x0, noise)


def quadratic_cost(traj: Trajectory, q: np.ndarray, r: np.ndarray, average: bool = False) -> float:
    """Sum of x_t' Q x_t + u_t' R u_t over the stage indices t < horizon.

    With average=True the sum is divided by the horizon, matching the
    average-cost objective the stationary layers optimize.
    """
    xs = traj.states[:-1]
    us = traj.controls
    total = float(np.einsum("ti,ij,tj->", xs, q, xs) + np.einsum("ti,ij,tj->", us, r, us))
    if average:
        return total / max(traj.horizon, 1)
    return total
