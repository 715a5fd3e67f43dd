"""Experiment logic: expert generation, imitation learning, ADP training.

Two imitation scenarios are supported. In "known_model_unknown_D" the
learner knows the true dynamics and trains only the uncertainty shape D;
in "known_D_unknown_model" the learner knows D and trains the nominal
model (A, B). ADP training minimizes the empirical average rollout cost
on models sampled from the true uncertainty set, differentiating through
the policy layer only.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import ParamGradient, grad_nominal_layer, grad_robust_layer
from .errors import (
    ExpertGenerationError,
    GradientError,
    InputError,
    NumericalError,
    RobustLqrError,
    SolverError,
)
from .linsys import (
    GainPolicy,
    LinearSystem,
    Trajectory,
    UncertaintyEllipsoid,
    quadratic_cost,
    rollout_given_noise,
    spectral_radius,
)
from .lmi_layers import build_nominal_lmi, build_robust_sdp, recover_gain, recover_p
from .riccati import finite_horizon_grad, solve_finite_horizon
from .sdp import solve

SCENARIO_UNKNOWN_D = "known_model_unknown_D"
SCENARIO_UNKNOWN_MODEL = "known_D_unknown_model"
SCENARIOS = (SCENARIO_UNKNOWN_D, SCENARIO_UNKNOWN_MODEL)

LAYER_NOMINAL = "nominal_lmi"
LAYER_ROBUST = "robust_lmi"
LAYER_FINITE = "finite_horizon"
LAYER_LINEAR = "linear"
IMITATION_LAYERS = (LAYER_NOMINAL, LAYER_ROBUST, LAYER_FINITE)
ADP_LAYERS = (LAYER_NOMINAL, LAYER_ROBUST, LAYER_LINEAR)

# Offsets carving independent Philox streams out of one run seed.
_DEMO_STREAM = 10_000
_INIT_STREAM = 20_000
_BATCH_STREAM = 30_000
_ADP_STREAM = 40_000

_LAYER_FAILURES = (SolverError, NumericalError, GradientError)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Knobs for the experiment harness; defaults match the desk scale."""

    n: int = 3
    m: int = 3
    sigma: float = 0.1
    d_range: tuple[float, float] = (2.0, 6.0)
    diag_uncertainty: bool = True
    seed: int = 0
    iterations: int = 200
    minibatch: int = 16
    demo_count: int = 64
    train_horizon: int = 20
    lr: float = 0.01
    momentum: float = 0.5
    rms_decay: float = 0.99
    eps_opt: float = 1e-8
    eig_floor: float = 1e-6
    sigma_floor: float = 1e-3
    states_only: bool = False
    val_horizon: int = 50
    val_rollouts: int = 10
    val_samples: int = 100
    val_seed_offset: int = 1000
    sentinel: float = 1e6
    adp_batch: int = 64
    adp_sigma_init: float = 0.1
    solver_tol: float = 1e-9
    max_attempts: int = 100
    boundary_count: int = 100

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["d_range"] = list(self.d_range)
        return out


@dataclasses.dataclass(frozen=True)
class ExpertSpec:
    """The ground truth a learner imitates: system, uncertainty, policy."""

    sys: LinearSystem
    unc: UncertaintyEllipsoid
    expert_gain: GainPolicy
    seed: int


@dataclasses.dataclass(frozen=True)
class DemoSet:
    trajectories: list[Trajectory]
    initial_states: list[np.ndarray]

    @property
    def count(self) -> int:
        return len(self.trajectories)

    def __post_init__(self):
        if len(self.trajectories) != len(self.initial_states):
            raise InputError(
                f"{len(self.trajectories)} trajectories vs "
                f"{len(self.initial_states)} initial states"
            )


@dataclasses.dataclass(frozen=True)
class IterationRecord:
    iteration: int
    imitation_loss: float
    model_loss: float
    validation_cost: float
    wall_time_s: float
    gradient_path: str


@dataclasses.dataclass
class TrainState:
    """Parameters, optimizer moments, and the per-iteration history."""

    params: dict
    trainable: tuple[str, ...]
    rms: dict
    momentum: dict
    iteration: int = 0
    history: list[IterationRecord] = dataclasses.field(default_factory=list)
    events: list[str] = dataclasses.field(default_factory=list)
    meta: dict = dataclasses.field(default_factory=dict)


def _new_state(params: dict, trainable: Sequence[str]) -> TrainState:
    rms = {}
    mom = {}
    for name in trainable:
        block = params[name]
        if np.isscalar(block):
            rms[name] = 0.0
            mom[name] = 0.0
        else:
            rms[name] = np.zeros_like(block)
            mom[name] = np.zeros_like(block)
    return TrainState(params=params, trainable=tuple(trainable), rms=rms, momentum=mom)


def generate_expert(
    seed: int,
    n: int,
    m: int,
    sigma: float,
    diag_uncertainty: bool = True,
    d_range: tuple[float, float] = (2.0, 6.0),
    max_attempts: int = 100,
    boundary_count: int = 100,
    solver_tol: float = 1e-9,
) -> ExpertSpec:
    """Draw a true system and uncertainty until a robust expert exists.

    A, B get i.i.d. Gaussian entries with A rescaled to spectral radius
    0.9; D is diagonal with entries uniform in d_range (or a rotated SPD
    matrix with that eigenvalue range when diag_uncertainty is False). A
    draw is accepted once the robust program is solvable and the expert
    gain stabilizes every boundary-sampled model.
    """
    if n < 1 or m < 1:
        raise InputError(f"need n, m >= 1, got n={n}, m={m}")
    lo, hi = d_range
    if not (0.0 < lo <= hi):
        raise InputError(f"d_range must satisfy 0 < lo <= hi, got {d_range}")
    rng = _rng(seed)
    for _ in range(max_attempts):
        a = rng.normal(size=(n, n))
        a *= 0.9 / max(spectral_radius(a), 1e-12)
        b = rng.normal(size=(n, m))
        eigs = rng.uniform(lo, hi, size=n + m)
        if diag_uncertainty:
            d = np.diag(eigs)
        else:
            basis, _ = np.linalg.qr(rng.normal(size=(n + m, n + m)))
            d = (basis * eigs) @ basis.T
        sys = LinearSystem(a_nom=a, b_nom=b, q=np.eye(n), r=np.eye(m), sigma=sigma)
        unc = UncertaintyEllipsoid.from_system(sys, d)
        try:
            sol = solve(build_robust_sdp(sys, unc), tol=solver_tol)
            if sol.status != "optimal":
                continue
            gain = recover_gain(sol)
        except RobustLqrError:
            continue
        models = unc.boundary_models(boundary_count, seed=seed)
        if all(spectral_radius(am + bm @ gain.k) < 1.0 for am, bm in models):
            return ExpertSpec(sys=sys, unc=unc, expert_gain=gain, seed=seed)
    raise ExpertGenerationError(
        f"no feasible expert in {max_attempts} draws for n={n}, m={m}, "
        f"d_range={d_range}; try a larger d_range (smaller uncertainty)"
    )


def generate_demos(expert: ExpertSpec, count: int, horizon: int, seed: int) -> DemoSet:
    """Expert rollouts on the true system with per-trajectory noise."""
    if count < 1 or horizon < 1:
        raise InputError(f"need count, horizon >= 1, got {count}, {horizon}")
    n = expert.sys.dims[0]
    rng = _rng(seed)
    x0s = rng.standard_normal((count, n))
    noise = expert.sys.sigma * rng.standard_normal((count, horizon, n))
    model = (expert.sys.a_nom, expert.sys.b_nom)
    trajs = [
        rollout_given_noise(model, expert.expert_gain.k, x0s[i], noise[i])
        for i in range(count)
    ]
    return DemoSet(trajectories=trajs, initial_states=[x for x in x0s])


def imitation_loss(
    demos: DemoSet,
    generator: Callable[[int, np.ndarray], Trajectory],
    states_only: bool = False,
) -> float:
    """Mean squared stacked state-control gap between demos and learner.

    The generator receives (index, initial state) and must return a
    trajectory of the same horizon, conditioned only on that state.
    """
    total = 0.0
    for i, demo in enumerate(demos.trajectories):
        traj = generator(i, demos.initial_states[i])
        if traj.horizon != demo.horizon:
            raise InputError(
                f"learner horizon {traj.horizon} != demo horizon {demo.horizon}"
            )
        if states_only:
            total += float(np.sum((traj.states - demo.states) ** 2))
        else:
            total += float(np.sum((traj.stacked() - demo.stacked()) ** 2))
    return total / demos.count


def model_loss(
    estimate: Mapping[str, np.ndarray | float],
    truth: Mapping[str, np.ndarray | float],
    blocks: Sequence[str],
) -> float:
    """Frobenius norm of the stacked estimate-truth difference."""
    total = 0.0
    for name in blocks:
        diff = np.asarray(estimate[name], dtype=float) - np.asarray(
            truth[name], dtype=float
        )
        total += float(np.sum(diff * diff))
    return float(np.sqrt(total))


def _gain_stack(policy, horizon: int, n: int, m: int) -> np.ndarray:
    """Normalize a policy to a (horizon, m, n) stack, holding the last gain."""
    if isinstance(policy, GainPolicy):
        k = policy.k
    else:
        k = np.asarray(policy, dtype=float)
    if k.ndim == 2:
        if k.shape != (m, n):
            raise InputError(f"gain shape {k.shape}, expected {(m, n)}")
        return np.broadcast_to(k, (horizon, m, n))
    if k.ndim != 3 or k.shape[1:] != (m, n):
        raise InputError(f"gain stack shape {k.shape}, expected (T, {m}, {n})")
    if k.shape[0] >= horizon:
        return k[:horizon]
    pad = np.broadcast_to(k[-1], (horizon - k.shape[0], m, n))
    return np.concatenate([k, pad], axis=0)


def validation_cost(
    policy,
    truth: ExpertSpec,
    horizon: int = 50,
    n_rollouts: int = 10,
    seed: int = 0,
    n_models: int = 100,
    cap: float = 1e6,
    initial_states: np.ndarray | None = None,
) -> tuple[float, float]:
    """Average rollout cost on the worst sampled boundary model.

    Rolls the policy on every boundary sample of the true ellipsoid (all
    rollouts share x0 and noise draws), picks the model with the highest
    mean cost, and returns that model's (mean, std) over rollouts. Costs
    are capped at `cap` so unstable policies stay comparable. Initial
    states default to standard normal draws; pass `initial_states` to pin
    them.
    """
    n, m = truth.sys.dims
    gains = _gain_stack(policy, horizon, n, m)
    rng = _rng(seed)
    x0s = rng.standard_normal((n_rollouts, n))
    if initial_states is not None:
        x0s = np.asarray(initial_states, dtype=float)
        if x0s.shape != (n_rollouts, n):
            raise InputError(f"initial_states shape {x0s.shape}, expected {(n_rollouts, n)}")
    noise = truth.sys.sigma * rng.standard_normal((n_rollouts, horizon, n))
    models = truth.unc.boundary_models(n_models, seed=seed + 1)
    am = np.stack([a for a, _ in models])
    bm = np.stack([b for _, b in models])
    x = np.broadcast_to(x0s.T, (n_models, n, n_rollouts)).copy()
    tot = np.zeros((n_models, n_rollouts))
    big = cap * horizon
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            u = np.einsum("ij,mjn->min", gains[t], x)
            step = np.einsum("min,min->mn", x, x) + np.einsum("min,min->mn", u, u)
            step = np.where(np.isfinite(step), step, big)
            tot += np.minimum(step, big)
            x = (
                np.einsum("mij,mjn->min", am, x)
                + np.einsum("mij,mjn->min", bm, u)
                + noise[:, t, :].T[None]
            )
            # zero out overflowed states; their cost is already capped
            x = np.where(np.isfinite(x), x, 0.0)
    tot = np.minimum(np.where(np.isfinite(tot), tot, big) / horizon, cap)
    means = tot.mean(axis=1)
    worst = int(np.argmax(means))
    return float(means[worst]), float(tot[worst].std())


def _rms_update(s, mom, g, cfg: TrainConfig):
    s = cfg.rms_decay * s + (1.0 - cfg.rms_decay) * g * g
    mom = cfg.momentum * mom + cfg.lr * g / np.sqrt(s + cfg.eps_opt)
    return s, mom


def _spd_floor(mat: np.ndarray, floor: float) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() >= floor:
        return sym
    return (evecs * np.maximum(evals, floor)) @ evecs.T


def rmsprop_step(state: TrainState, grads: ParamGradient, cfg: TrainConfig) -> TrainState:
    """One RMSprop-with-momentum step on the trainable blocks, in place.

    Symmetric blocks are re-symmetrized, Q/R/D are floored back to SPD and
    sigma to a small positive floor after the step. Exactly zero sigma is
    a degenerate point of the robust encoding where the solution map stops
    being differentiable, so training never parks there. A non-finite
    gradient rejects the whole step so one bad solve cannot poison the
    moments.
    """
    gdict = grads.as_dict()
    for name in state.trainable:
        g = gdict[name]
        if not np.all(np.isfinite(g)):
            state.events.append(f"iter {state.iteration}: non-finite gradient, step rejected")
            return state
    for name in state.trainable:
        g = gdict[name]
        s, mom = _rms_update(state.rms[name], state.momentum[name], g, cfg)
        state.rms[name] = s
        state.momentum[name] = mom
        new = state.params[name] - mom
        if name in ("q", "r", "d"):
            new = _spd_floor(new, cfg.eig_floor)
        elif name == "sigma":
            new = max(float(new), cfg.sigma_floor)
        state.params[name] = new
    return state


_INIT_SCALE_MARGIN = 4.0


def _feasible_uncertainty_scale(
    sys: LinearSystem, cfg: TrainConfig
) -> tuple[float, np.ndarray]:
    """Identity uncertainty rescaled until the robust program solves.

    The first solvable scale sits right at the feasibility boundary, where
    the gain is hypersensitive to the parameters and gradients through the
    layer blow up, so the returned scale carries an extra margin. Growing
    the scale shrinks the ellipsoid, which keeps a solvable program
    solvable, so the margin needs no second solve.
    """
    dim = sys.dims[0] + sys.dims[1]
    scale = 1.0
    for _ in range(12):
        d0 = scale * np.eye(dim)
        try:
            sol = solve(
                build_robust_sdp(sys, UncertaintyEllipsoid.from_system(sys, d0)),
                tol=cfg.solver_tol,
            )
            if sol.status == "optimal":
                scale *= _INIT_SCALE_MARGIN
                return scale, scale * np.eye(dim)
        except RobustLqrError:
            pass
        scale *= 4.0
    raise SolverError(
        "no feasible identity-scaled uncertainty found up to scale 4^11"
    )


def _imitation_rollout_grads(a, b, k, x0, noise, demo, states_only):
    """Squared-gap loss of one frozen-noise rollout and its adjoints.

    Returns (loss, dK, dA, dB) where dA/dB are the direct rollout terms;
    the path through the gain is handled separately by the layer pullback.
    """
    horizon = noise.shape[0]
    n, m = b.shape
    xs = np.empty((horizon + 1, n))
    us = np.empty((horizon, m))
    xs[0] = x0
    for t in range(horizon):
        us[t] = k @ xs[t]
        xs[t + 1] = a @ xs[t] + b @ us[t] + noise[t]
    dx = 2.0 * (xs - demo.states)
    if states_only:
        loss = float(np.sum((xs - demo.states) ** 2))
        du = np.zeros_like(us)
    else:
        loss = float(
            np.sum((xs - demo.states) ** 2) + np.sum((us - demo.controls) ** 2)
        )
        du = 2.0 * (us - demo.controls)
    dk = np.zeros((m, n))
    da = np.zeros((n, n))
    db = np.zeros((n, m))
    lam = dx[horizon].copy()
    for t in range(horizon - 1, -1, -1):
        uc = du[t] + b.T @ lam
        dk += np.outer(uc, xs[t])
        da += np.outer(lam, xs[t])
        db += np.outer(lam, us[t])
        lam = dx[t] + a.T @ lam + k.T @ uc
    return loss, dk, da, db, xs, us, dx, du


def _cost_rollout_grad(a, b, k, x0, noise, q, r):
    """Average stage cost of one rollout and its gradient w.r.t. the gain."""
    horizon = noise.shape[0]
    n, m = b.shape
    xs = np.empty((horizon + 1, n))
    us = np.empty((horizon, m))
    xs[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            us[t] = k @ xs[t]
            xs[t + 1] = a @ xs[t] + b @ us[t] + noise[t]
        cost = (
            np.einsum("ti,ij,tj->", xs[:-1], q, xs[:-1])
            + np.einsum("ti,ij,tj->", us, r, us)
        ) / horizon
    if not np.isfinite(cost):
        return float("inf"), np.full((m, n), np.nan)
    dk = np.zeros((m, n))
    lam = np.zeros(n)
    for t in range(horizon - 1, -1, -1):
        uc = 2.0 * (r @ us[t]) / horizon + b.T @ lam
        dk += np.outer(uc, xs[t])
        lam = 2.0 * (q @ xs[t]) / horizon + a.T @ lam + k.T @ uc
    return float(cost), dk


def _zero_gradient(n: int, m: int, trainable, path: str = "implicit") -> ParamGradient:
    return ParamGradient(
        d_a_nom=np.zeros((n, n)),
        d_b_nom=np.zeros((n, m)),
        d_q=np.zeros((n, n)),
        d_r=np.zeros((m, m)),
        d_d=np.zeros((n + m, n + m)),
        d_sigma=0.0,
        trainable=tuple(trainable),
        path=path,
    )


def _learner_system(params: dict) -> LinearSystem:
    return LinearSystem(
        a_nom=params["a_nom"],
        b_nom=params["b_nom"],
        q=params["q"],
        r=params["r"],
        sigma=params["sigma"],
    )


def _stable_gaussian_model(rng, n, m):
    a = rng.normal(size=(n, n))
    a *= 0.9 / max(spectral_radius(a), 1e-12)
    return a, rng.normal(size=(n, m))


def _feasible_learner_init(rng, expert: ExpertSpec, cfg: TrainConfig):
    """Draw a stable random model whose robust program is solvable.

    Scenario 2 layers share one initialization, so the feasibility check
    runs against the robust program for every layer; otherwise the robust
    learner could start from a model it can never solve at, and rollback
    would pin it there forever. Rejected draws advance the shared stream
    identically across layers.
    """
    n, m = expert.sys.dims
    for attempt in range(cfg.max_attempts):
        a0, b0 = _stable_gaussian_model(rng, n, m)
        sys = LinearSystem(
            a_nom=a0, b_nom=b0, q=expert.sys.q, r=expert.sys.r, sigma=expert.sys.sigma
        )
        unc = UncertaintyEllipsoid.from_system(sys, expert.unc.d)
        try:
            sol = solve(build_robust_sdp(sys, unc), tol=cfg.solver_tol)
            if sol.status == "optimal":
                recover_gain(sol)
                return a0, b0, attempt
        except RobustLqrError:
            continue
    raise ExpertGenerationError(
        f"no robust-feasible learner initialization in {cfg.max_attempts} draws "
        f"for n={n}, m={m}"
    )


def train_imitation(
    scenario: str,
    layer: str,
    config: TrainConfig,
    expert: ExpertSpec | None = None,
    demos: DemoSet | None = None,
    init_params: Mapping[str, np.ndarray | float] | None = None,
) -> TrainState:
    """Imitation learning of a robust expert through a differentiable layer.

    Scenario "known_model_unknown_D" trains D from a feasibility-rescued
    identity initialization; "known_D_unknown_model" trains (A, B) from a
    random stable initialization shared across layers. Layers without a
    dependence on the trainable blocks (the nominal and finite-horizon
    layers in scenario 1) simply keep their initial policy, which is the
    certainty-equivalence baseline the robust layer is compared against.
    Solver failures roll parameters back and mark the iteration skipped.
    """
    if scenario not in SCENARIOS:
        raise InputError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    if layer not in IMITATION_LAYERS:
        raise InputError(f"unknown layer {layer!r}, expected one of {IMITATION_LAYERS}")
    cfg = config
    n, m = cfg.n, cfg.m
    if expert is None:
        expert = generate_expert(
            cfg.seed, n, m, cfg.sigma, cfg.diag_uncertainty,
            d_range=cfg.d_range, max_attempts=cfg.max_attempts,
            boundary_count=cfg.boundary_count, solver_tol=cfg.solver_tol,
        )
    if demos is None:
        demos = generate_demos(expert, cfg.demo_count, cfg.train_horizon, cfg.seed + _DEMO_STREAM)
    if demos.trajectories and demos.trajectories[0].horizon != cfg.train_horizon:
        raise InputError(
            f"demo horizon {demos.trajectories[0].horizon} != config horizon {cfg.train_horizon}"
        )

    truth_params = {
        "a_nom": expert.sys.a_nom,
        "b_nom": expert.sys.b_nom,
        "q": expert.sys.q,
        "r": expert.sys.r,
        "d": expert.unc.d,
        "sigma": expert.sys.sigma,
    }
    params = {k: np.array(v, dtype=float) if not np.isscalar(v) else float(v)
              for k, v in truth_params.items()}
    events = []
    if scenario == SCENARIO_UNKNOWN_D:
        trainable = ("d",)
        loss_blocks = ("d",)
        if init_params is not None and "d" in init_params:
            params["d"] = np.array(init_params["d"], dtype=float)
        elif layer == LAYER_ROBUST:
            scale, d0 = _feasible_uncertainty_scale(expert.sys, cfg)
            params["d"] = d0
            if scale != 1.0:
                events.append(f"init: identity uncertainty rescaled by {scale:g} for feasibility")
        else:
            params["d"] = np.eye(n + m)
    else:
        trainable = ("a_nom", "b_nom")
        loss_blocks = ("a_nom", "b_nom")
        init_rng = _rng(cfg.seed + _INIT_STREAM)
        a0, b0, redraws = _feasible_learner_init(init_rng, expert, cfg)
        params["a_nom"], params["b_nom"] = a0, b0
        if redraws:
            events.append(f"init: learner model redrawn {redraws}x for robust feasibility")
        if init_params is not None:
            for name in ("a_nom", "b_nom"):
                if name in init_params:
                    params[name] = np.array(init_params[name], dtype=float)

    state = _new_state(params, trainable)
    state.events.extend(events)
    state.meta = {
        "scenario": scenario,
        "layer": layer,
        "config": cfg.as_dict(),
        "expert_seed": expert.seed,
    }

    batch_rng = _rng(cfg.seed + _BATCH_STREAM)
    val_seed = cfg.seed + cfg.val_seed_offset
    last_good = {k: (v.copy() if hasattr(v, "copy") else v) for k, v in state.params.items()}

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        # the minibatch stream advances every iteration, committed or not,
        # so the draw sequence is independent of failure handling
        idx = batch_rng.integers(0, demos.count, size=cfg.minibatch)
        fresh = cfg.sigma * batch_rng.standard_normal((cfg.minibatch, cfg.train_horizon, n))
        try:
            record = _imitation_iteration(
                state, scenario, layer, cfg, expert, demos, idx, fresh, val_seed, it
            )
            last_good = {k: (v.copy() if hasattr(v, "copy") else v)
                         for k, v in state.params.items()}
        except _LAYER_FAILURES as exc:
            state.params = {k: (v.copy() if hasattr(v, "copy") else v)
                            for k, v in last_good.items()}
            state.events.append(f"iter {it}: {type(exc).__name__}: {exc}")
            record = IterationRecord(
                iteration=it,
                imitation_loss=float("nan"),
                model_loss=model_loss(state.params, truth_params, loss_blocks),
                validation_cost=float("nan"),
                wall_time_s=time.perf_counter() - t0,
                gradient_path="skipped",
            )
        else:
            record = dataclasses.replace(record, wall_time_s=time.perf_counter() - t0)
        state.history.append(record)
        state.iteration = it + 1
    state.meta["model_loss_blocks"] = loss_blocks
    _finalize(state, layer, cfg, expert, val_seed)
    return state


def _final_policy(state: TrainState, layer: str, cfg: TrainConfig):
    """Policy implied by the final parameters (one extra layer solve)."""
    if layer == LAYER_LINEAR:
        return state.params["k_lin"]
    sys_est = _learner_system(state.params)
    if layer == LAYER_FINITE:
        return solve_finite_horizon(
            sys_est.a_nom, sys_est.b_nom, sys_est.q, sys_est.r, cfg.train_horizon
        ).gains
    if layer == LAYER_ROBUST:
        unc_est = UncertaintyEllipsoid.from_system(sys_est, state.params["d"])
        sol = solve(build_robust_sdp(sys_est, unc_est), tol=cfg.solver_tol)
        if sol.status != "optimal":
            raise SolverError(f"robust layer returned status {sol.status}")
        return recover_gain(sol).k
    sol = solve(build_nominal_lmi(sys_est), tol=cfg.solver_tol)
    if sol.status != "optimal":
        raise SolverError(f"nominal layer returned status {sol.status}")
    return recover_p(sol).k


def _commit_step(state: TrainState, layer: str, cfg: TrainConfig, entry: dict, it: int):
    """Keep an optimizer step only if the layer still solves at the result.

    An accepted step onto layer-infeasible parameters would strand every
    later iteration in rollback, since rollback restores the stepped
    point itself. Momentum is cleared on rejection so the optimizer does
    not immediately retake the same step.
    """
    if layer == LAYER_LINEAR:
        return
    try:
        _final_policy(state, layer, cfg)
    except _LAYER_FAILURES as exc:
        state.params = {k: (v.copy() if hasattr(v, "copy") else v)
                        for k, v in entry.items()}
        for name in state.momentum:
            mom = state.momentum[name]
            state.momentum[name] = 0.0 if np.isscalar(mom) else np.zeros_like(mom)
        state.events.append(
            f"iter {it}: step rejected, layer fails at updated params "
            f"({type(exc).__name__})"
        )


def _finalize(state: TrainState, layer: str, cfg: TrainConfig, expert: ExpertSpec, val_seed: int):
    """Summary metrics for the run: final validation and smoothed objective.

    The per-iteration rows are minibatch-noisy and the last one may be a
    skipped-iteration placeholder, so the summary re-validates the final
    parameters directly and averages the objective over the last ten
    committed rows.
    """
    try:
        policy = _final_policy(state, layer, cfg)
        mean, std = validation_cost(
            policy, expert, horizon=cfg.val_horizon, n_rollouts=cfg.val_rollouts,
            seed=val_seed, n_models=cfg.val_samples, cap=cfg.sentinel,
        )
    except _LAYER_FAILURES as exc:
        state.events.append(f"final validation failed: {type(exc).__name__}: {exc}")
        mean, std = cfg.sentinel, 0.0
    state.meta["final_validation_cost"] = mean
    state.meta["final_validation_std"] = std
    objectives = [r.imitation_loss for r in state.history if np.isfinite(r.imitation_loss)]
    state.meta["final_objective"] = (
        float(np.mean(objectives[-10:])) if objectives else float("nan")
    )


def sign_test_pvalue(wins: int, losses: int) -> float:
    """One-sided exact binomial sign test; ties are excluded by the caller."""
    if wins < 0 or losses < 0:
        raise InputError("wins and losses must be nonnegative")
    trials = wins + losses
    if trials == 0:
        return 1.0
    from math import comb

    tail = sum(comb(trials, k) for k in range(wins, trials + 1))
    return tail / 2.0**trials


def _imitation_iteration(
    state, scenario, layer, cfg, expert, demos, idx, fresh, val_seed, it
) -> IterationRecord:
    n, m = cfg.n, cfg.m
    entry = {k: (v.copy() if hasattr(v, "copy") else v) for k, v in state.params.items()}
    sys_est = _learner_system(state.params)
    prob = None
    sol = None
    unc_est = None

    if layer == LAYER_ROBUST:
        unc_est = UncertaintyEllipsoid.from_system(sys_est, state.params["d"])
        prob = build_robust_sdp(sys_est, unc_est)
        sol = solve(prob, tol=cfg.solver_tol)
        if sol.status != "optimal":
            raise SolverError(f"robust layer returned status {sol.status}")
        policy_gains = recover_gain(sol).k
    elif layer == LAYER_NOMINAL:
        prob = build_nominal_lmi(sys_est)
        sol = solve(prob, tol=cfg.solver_tol)
        if sol.status != "optimal":
            raise SolverError(f"nominal layer returned status {sol.status}")
        policy_gains = recover_p(sol).k
    else:
        fh = solve_finite_horizon(
            sys_est.a_nom, sys_est.b_nom, sys_est.q, sys_est.r, cfg.train_horizon
        )
        policy_gains = fh.gains

    a_est, b_est = sys_est.a_nom, sys_est.b_nom
    loss_acc = 0.0
    if layer == LAYER_FINITE:
        grad_acc = {"a_nom": np.zeros((n, n)), "b_nom": np.zeros((n, m))}
        for j, demo_i in enumerate(idx):
            demo = demos.trajectories[demo_i]
            traj = rollout_given_noise((a_est, b_est), policy_gains,
                                       demos.initial_states[demo_i], fresh[j])
            dls = 2.0 * (traj.states - demo.states)
            if cfg.states_only:
                dlc = np.zeros_like(traj.controls)
                loss_acc += float(np.sum((traj.states - demo.states) ** 2))
            else:
                dlc = 2.0 * (traj.controls - demo.controls)
                loss_acc += float(np.sum((traj.stacked() - demo.stacked()) ** 2))
            g = finite_horizon_grad(a_est, b_est, sys_est.q, sys_est.r, fh, traj, dls, dlc)
            grad_acc["a_nom"] += g["a"]
            grad_acc["b_nom"] += g["b"]
        loss = loss_acc / len(idx)
        if scenario == SCENARIO_UNKNOWN_D:
            grads = _zero_gradient(n, m, state.trainable)
        else:
            grads = ParamGradient(
                d_a_nom=grad_acc["a_nom"] / len(idx),
                d_b_nom=grad_acc["b_nom"] / len(idx),
                d_q=np.zeros((n, n)), d_r=np.zeros((m, m)),
                d_d=np.zeros((n + m, n + m)), d_sigma=0.0,
                trainable=state.trainable, path="implicit",
            )
    else:
        dk_acc = np.zeros((m, n))
        da_acc = np.zeros((n, n))
        db_acc = np.zeros((n, m))
        for j, demo_i in enumerate(idx):
            li, dki, dai, dbi, *_ = _imitation_rollout_grads(
                a_est, b_est, policy_gains, demos.initial_states[demo_i],
                fresh[j], demos.trajectories[demo_i], cfg.states_only,
            )
            loss_acc += li
            dk_acc += dki
            da_acc += dai
            db_acc += dbi
        loss = loss_acc / len(idx)
        dk = dk_acc / len(idx)
        if scenario == SCENARIO_UNKNOWN_D:
            if layer == LAYER_ROBUST:
                grads = grad_robust_layer(dk, sys_est, unc_est, sol,
                                          trainable=("d",), prob=prob)
            else:
                # the nominal layer never sees D: exact zero gradient
                grads = _zero_gradient(n, m, state.trainable)
        else:
            if layer == LAYER_ROBUST:
                g = grad_robust_layer(dk, sys_est, unc_est, sol,
                                      trainable=("a_nom", "b_nom"), prob=prob)
            else:
                g = grad_nominal_layer(dk, sys_est, sol,
                                       trainable=("a_nom", "b_nom"), prob=prob)
            grads = dataclasses.replace(
                g,
                d_a_nom=g.d_a_nom + da_acc / len(idx),
                d_b_nom=g.d_b_nom + db_acc / len(idx),
            )

    rmsprop_step(state, grads, cfg)
    _commit_step(state, layer, cfg, entry, it)

    truth_params = {
        "a_nom": expert.sys.a_nom, "b_nom": expert.sys.b_nom,
        "q": expert.sys.q, "r": expert.sys.r,
        "d": expert.unc.d, "sigma": expert.sys.sigma,
    }
    blocks = ("d",) if scenario == SCENARIO_UNKNOWN_D else ("a_nom", "b_nom")
    val_mean, _ = validation_cost(
        policy_gains, expert, horizon=cfg.val_horizon,
        n_rollouts=cfg.val_rollouts, seed=val_seed,
        n_models=cfg.val_samples, cap=cfg.sentinel,
    )
    return IterationRecord(
        iteration=it,
        imitation_loss=loss,
        model_loss=model_loss(state.params, truth_params, blocks),
        validation_cost=val_mean,
        wall_time_s=0.0,
        gradient_path=grads.path,
    )


def _sample_interior_models(unc: UncertaintyEllipsoid, count: int, rng) -> list:
    """Models drawn inside the set: Haar frame direction, uniform radius."""
    n, mdim = unc.dims
    evals, evecs = np.linalg.eigh(unc.d)
    d_inv_half = (evecs / np.sqrt(evals)) @ evecs.T
    models = []
    for _ in range(count):
        g = rng.standard_normal((n + mdim, n))
        frame, rfac = np.linalg.qr(g)
        frame = frame * np.sign(np.diag(rfac))
        radius = rng.uniform(0.0, 1.0)
        x = (unc.center + radius * (d_inv_half @ frame)).T
        models.append((x[:, :n].copy(), x[:, n:].copy()))
    return models


def train_adp(
    layer: str,
    config: TrainConfig,
    expert: ExpertSpec | None = None,
    init_params: Mapping[str, np.ndarray | float] | None = None,
) -> TrainState:
    """Minimize empirical average rollout cost on the true uncertain system.

    Each iteration samples a fresh batch of models from the true ellipsoid
    plus noise and initial states, rolls out the current policy, and
    differentiates the average cost pathwise through the gain. The nominal
    and robust layers train their layer parameters; the linear baseline
    trains the gain matrix directly with no stabilization, which is what
    makes it diverge on hard draws.
    """
    if layer not in ADP_LAYERS:
        raise InputError(f"unknown layer {layer!r}, expected one of {ADP_LAYERS}")
    cfg = config
    n, m = cfg.n, cfg.m
    if expert is None:
        expert = generate_expert(
            cfg.seed, n, m, cfg.sigma, cfg.diag_uncertainty,
            d_range=cfg.d_range, max_attempts=cfg.max_attempts,
            boundary_count=cfg.boundary_count, solver_tol=cfg.solver_tol,
        )
    q_true, r_true = expert.sys.q, expert.sys.r

    init_rng = _rng(cfg.seed + _INIT_STREAM)
    a0, b0 = _stable_gaussian_model(init_rng, n, m)
    params = {
        "a_nom": a0, "b_nom": b0,
        "q": np.eye(n), "r": np.eye(m),
        "d": np.eye(n + m), "sigma": float(cfg.adp_sigma_init),
    }
    events = []
    if layer == LAYER_LINEAR:
        params["k_lin"] = init_rng.normal(size=(m, n))
        trainable = ()
        if init_params is not None and "k_lin" in init_params:
            params["k_lin"] = np.array(init_params["k_lin"], dtype=float)
    elif layer == LAYER_ROBUST:
        trainable = ("a_nom", "b_nom", "q", "r", "d", "sigma")
        if init_params is not None:
            for name in trainable:
                if name in init_params:
                    block = init_params[name]
                    params[name] = float(block) if np.isscalar(block) else np.array(block, dtype=float)
        if init_params is None or "d" not in init_params:
            scale, d0 = _feasible_uncertainty_scale(_learner_system(params), cfg)
            params["d"] = d0
            if scale != 1.0:
                events.append(f"init: identity uncertainty rescaled by {scale:g} for feasibility")
    else:
        trainable = ("a_nom", "b_nom", "q", "r")
        if init_params is not None:
            for name in trainable:
                if name in init_params:
                    params[name] = np.array(init_params[name], dtype=float)

    state = _new_state(params, trainable)
    state.events.extend(events)
    state.meta = {
        "scenario": "adp",
        "layer": layer,
        "config": cfg.as_dict(),
        "expert_seed": expert.seed,
    }
    if layer == LAYER_LINEAR:
        state.rms["k_lin"] = np.zeros((m, n))
        state.momentum["k_lin"] = np.zeros((m, n))

    truth_params = {"a_nom": expert.sys.a_nom, "b_nom": expert.sys.b_nom}
    adp_rng = _rng(cfg.seed + _ADP_STREAM)
    val_seed = cfg.seed + cfg.val_seed_offset
    last_good = {k: (v.copy() if hasattr(v, "copy") else v) for k, v in state.params.items()}

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        models = _sample_interior_models(expert.unc, cfg.adp_batch, adp_rng)
        x0s = adp_rng.standard_normal((cfg.adp_batch, n))
        noise = expert.sys.sigma * adp_rng.standard_normal(
            (cfg.adp_batch, cfg.train_horizon, n)
        )
        try:
            record = _adp_iteration(
                state, layer, cfg, expert, models, x0s, noise,
                q_true, r_true, truth_params, val_seed, it,
            )
            last_good = {k: (v.copy() if hasattr(v, "copy") else v)
                         for k, v in state.params.items()}
        except _LAYER_FAILURES as exc:
            state.params = {k: (v.copy() if hasattr(v, "copy") else v)
                            for k, v in last_good.items()}
            state.events.append(f"iter {it}: {type(exc).__name__}: {exc}")
            record = IterationRecord(
                iteration=it,
                imitation_loss=float("nan"),
                model_loss=(model_loss(state.params, truth_params, ("a_nom", "b_nom"))
                            if layer != LAYER_LINEAR else float("nan")),
                validation_cost=float("nan"),
                wall_time_s=time.perf_counter() - t0,
                gradient_path="skipped",
            )
        else:
            record = dataclasses.replace(record, wall_time_s=time.perf_counter() - t0)
        state.history.append(record)
        state.iteration = it + 1
    state.meta["model_loss_blocks"] = ("a_nom", "b_nom")
    _finalize(state, layer, cfg, expert, val_seed)
    return state


def _adp_iteration(
    state, layer, cfg, expert, models, x0s, noise, q_true, r_true,
    truth_params, val_seed, it,
) -> IterationRecord:
    n, m = cfg.n, cfg.m
    entry = {k: (v.copy() if hasattr(v, "copy") else v) for k, v in state.params.items()}
    prob = None
    sol = None
    unc_est = None
    if layer == LAYER_LINEAR:
        k = state.params["k_lin"]
    elif layer == LAYER_ROBUST:
        sys_est = _learner_system(state.params)
        unc_est = UncertaintyEllipsoid.from_system(sys_est, state.params["d"])
        prob = build_robust_sdp(sys_est, unc_est)
        sol = solve(prob, tol=cfg.solver_tol)
        if sol.status != "optimal":
            raise SolverError(f"robust layer returned status {sol.status}")
        k = recover_gain(sol).k
    else:
        sys_est = _learner_system(state.params)
        prob = build_nominal_lmi(sys_est)
        sol = solve(prob, tol=cfg.solver_tol)
        if sol.status != "optimal":
            raise SolverError(f"nominal layer returned status {sol.status}")
        k = recover_p(sol).k

    cost_acc = 0.0
    dk_acc = np.zeros((m, n))
    capped = 0
    for j, (a_m, b_m) in enumerate(models):
        cost_j, dk_j = _cost_rollout_grad(a_m, b_m, k, x0s[j], noise[j], q_true, r_true)
        # the batch loss is the mean of min(cost, sentinel), so rollouts at
        # or past the cap sit on the flat branch and contribute no gradient;
        # keeping their raw gradients would poison the RMS accumulators for
        # the rest of the run
        if not np.isfinite(cost_j) or cost_j >= cfg.sentinel:
            capped += 1
            cost_acc += cfg.sentinel
            continue
        cost_acc += cost_j
        dk_acc += dk_j
    avg_cost = cost_acc / len(models)
    dk = dk_acc / len(models)
    if capped:
        state.events.append(f"iter {it}: {capped}/{len(models)} rollouts at the cost cap")

    if layer == LAYER_LINEAR:
        if capped == len(models) or not np.all(np.isfinite(dk)):
            state.events.append(f"iter {it}: non-finite gradient, step rejected")
        else:
            s, mom = _rms_update(state.rms["k_lin"], state.momentum["k_lin"], dk, cfg)
            state.rms["k_lin"] = s
            state.momentum["k_lin"] = mom
            state.params["k_lin"] = state.params["k_lin"] - mom
        grads_path = "implicit"
    else:
        if layer == LAYER_ROBUST:
            grads = grad_robust_layer(dk, sys_est, unc_est, sol,
                                      trainable=state.trainable, prob=prob)
        else:
            grads = grad_nominal_layer(dk, sys_est, sol,
                                       trainable=state.trainable, prob=prob)
        rmsprop_step(state, grads, cfg)
        _commit_step(state, layer, cfg, entry, it)
        grads_path = grads.path

    policy = state.params["k_lin"] if layer == LAYER_LINEAR else k
    val_mean, _ = validation_cost(
        policy, expert, horizon=cfg.val_horizon, n_rollouts=cfg.val_rollouts,
        seed=val_seed, n_models=cfg.val_samples, cap=cfg.sentinel,
    )
    return IterationRecord(
        iteration=it,
        imitation_loss=avg_cost,
        model_loss=(model_loss(state.params, truth_params, ("a_nom", "b_nom"))
                    if layer != LAYER_LINEAR else float("nan")),
        validation_cost=val_mean,
        wall_time_s=0.0,
        gradient_path=grads_path,
    )
