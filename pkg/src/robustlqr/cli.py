"""Command-line harness for the solvers and the experiment loops.

Subcommands: solve (one encoding, printed gain), bench (solver timing
table), imitate / adp (training runs persisted as CSV), gradcheck
(implicit-vs-finite-difference audit). Configuration is resolved in
precedence order: built-in defaults, then the JSON config file, then
ROBUSTLQR_* environment variables, then explicit CLI flags. The resolved
config is written next to the results so any run can be replayed from its
own output directory.

Exit codes: 0 success, 1 acceptance failure (gradcheck over threshold),
2 input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import learning
from .autodiff import ALL_PARAMS, FD_STEP, _fd_resolve, fd_oracle, grad_robust_layer
from .errors import InputError, RobustLqrError, SolverError
from .learning import TrainConfig, generate_expert
from .linsys import LinearSystem, UncertaintyEllipsoid
from .lmi_layers import build_nominal_lmi, build_robust_sdp, recover_gain, recover_p, worst_case_cost
from .riccati import solve_finite_horizon
from .sdp import solve

ENV_PREFIX = "ROBUSTLQR_"

CSV_COLUMNS = ("iteration", "imitation_loss", "model_loss",
               "validation_cost", "wall_time_s", "gradient_path")

# short names on the command line, full constants inside the package
_LAYER_NAMES = {
    "nominal": learning.LAYER_NOMINAL,
    "robust": learning.LAYER_ROBUST,
    "finite": learning.LAYER_FINITE,
    "linear": learning.LAYER_LINEAR,
}
_SCENARIOS = {1: learning.SCENARIO_UNKNOWN_D, 2: learning.SCENARIO_UNKNOWN_MODEL}

_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def _train_defaults() -> dict:
    cfg = TrainConfig()
    out = {name: getattr(cfg, name) for name in _TRAIN_FIELDS}
    out["d_range"] = list(cfg.d_range)
    return out


def _defaults(command: str) -> dict:
    base = {"seed": 0, "out": None, "solver_tol": 1e-9}
    if command == "solve":
        base.update(layer="nominal", a_nom=[[1.0]], b_nom=[[1.0]],
                    q=[[1.0]], r=[[1.0]], sigma=1.0, d=None)
    elif command == "bench":
        base.update(n=3, m=3, horizons=[10, 50, 100], batch=128, repeats=3)
    elif command == "imitate":
        base.update(_train_defaults())
        base.update(layer="robust", scenario=1)
    elif command == "adp":
        base.update(_train_defaults())
        base.update(layer="robust")
    elif command == "gradcheck":
        base.update(n=3, m=3, sigma=0.1, d_range=[2.0, 6.0],
                    instances=20, threshold=1e-3)
    else:
        raise InputError(f"unknown command {command!r}")
    return base


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then environment, then CLI flags.

    Unknown keys in the config file are rejected so a typo cannot silently
    fall back to a default. Environment variables outside the command's
    schema are ignored, which lets CI export one ROBUSTLQR_SEED for a whole
    pipeline of different subcommands.
    """
    cfg = _defaults(command)
    schema = set(cfg)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise InputError(f"config file {path} must hold a JSON object")
        # resolved configs record their command, so replaying one is legal
        file_command = file_cfg.pop("command", None)
        if file_command is not None and file_command != command:
            raise InputError(
                f"config file {path} was resolved for {file_command!r}, "
                f"not {command!r}"
            )
        unknown = sorted(set(file_cfg) - schema)
        if unknown:
            raise InputError(
                f"unknown config keys for {command}: {', '.join(unknown)}"
            )
        cfg.update(file_cfg)
    for key in schema:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    for attr, key in (("seed", "seed"), ("out", "out"), ("layer", "layer"),
                      ("scenario", "scenario"), ("iters", "iterations"),
                      ("instances", "instances")):
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    horizon = getattr(args, "horizon", None)
    if horizon is not None:
        if command == "bench":
            cfg["horizons"] = [horizon]
        else:
            cfg["train_horizon"] = horizon
    cfg["command"] = command
    return cfg


def _layer_constant(name, allowed: tuple[str, ...]) -> str:
    """Accept either the CLI short name or the internal constant."""
    if name in _LAYER_NAMES:
        name = _LAYER_NAMES[name]
    if name not in allowed:
        raise InputError(f"layer {name!r} not valid here, expected one of {allowed}")
    return name


def _scenario_constant(value) -> str:
    if value in _SCENARIOS:
        return _SCENARIOS[value]
    if value in _SCENARIOS.values():
        return value
    raise InputError(f"scenario must be 1 or 2, got {value!r}")


def _matrix(cfg: dict, key: str, square: bool = False) -> np.ndarray:
    try:
        mat = np.array(cfg[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config key {key!r} is not a numeric matrix") from exc
    if mat.ndim != 2 or (square and mat.shape[0] != mat.shape[1]):
        raise InputError(f"config key {key!r} has shape {mat.shape}")
    return mat


def _fmt(value) -> str:
    return "%.12g" % float(value)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _ensure_out(cfg: dict) -> str:
    out = cfg.get("out") or os.path.join("runs", cfg["command"])
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return out


def _environment_metadata() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def _write_history(path: str, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in history:
            writer.writerow([
                rec.iteration, _fmt(rec.imitation_loss), _fmt(rec.model_loss),
                _fmt(rec.validation_cost), _fmt(rec.wall_time_s),
                rec.gradient_path,
            ])


def _write_summary(out: str, cfg: dict, state, wall_time: float) -> None:
    summary = {
        "command": cfg["command"],
        "replay_seed": cfg["seed"],
        "final": {k: v for k, v in state.meta.items() if k != "config"},
        "events": list(state.events),
        "iterations_run": state.iteration,
        "environment": _environment_metadata(),
        "timing": {"total_wall_time_s": wall_time},
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def cmd_solve(cfg: dict) -> int:
    layer = _layer_constant(cfg["layer"],
                            (learning.LAYER_NOMINAL, learning.LAYER_ROBUST))
    a = _matrix(cfg, "a_nom", square=True)
    b = _matrix(cfg, "b_nom")
    sys_ = LinearSystem(a_nom=a, b_nom=b, q=_matrix(cfg, "q", square=True),
                        r=_matrix(cfg, "r", square=True),
                        sigma=float(cfg["sigma"]))
    if layer == learning.LAYER_ROBUST:
        if cfg["d"] is None:
            raise InputError("robust solve needs an uncertainty matrix d")
        d = _matrix(cfg, "d", square=True)
        unc = UncertaintyEllipsoid.from_system(sys_, d)
        prob = build_robust_sdp(sys_, unc)
    else:
        prob = build_nominal_lmi(sys_)
    sol = solve(prob, tol=float(cfg["solver_tol"]))
    if sol.status != "optimal":
        raise SolverError(f"{layer} solve returned status {sol.status}")
    payload = {"layer": cfg["layer"], "status": sol.status,
               "iterations": sol.iterations, "objective": sol.objective,
               "residuals": sol.residuals}
    if layer == learning.LAYER_ROBUST:
        gain = recover_gain(sol)
        payload["k"] = gain.k
        payload["worst_case_cost"] = worst_case_cost(sol)
    else:
        are = recover_p(sol)
        payload["k"] = are.k
        payload["p"] = are.p
    print(f"layer: {cfg['layer']}")
    print("K =")
    for row in np.atleast_2d(payload["k"]):
        print("  [" + "  ".join(_fmt(v) for v in row) + "]")
    print(f"objective: {_fmt(sol.objective)}")
    if "worst_case_cost" in payload:
        print(f"worst-case cost: {_fmt(payload['worst_case_cost'])}")
    print("residuals: " + "  ".join(
        f"{k}={v:.3e}" for k, v in sorted(sol.residuals.items())))
    out = _ensure_out(cfg)
    with open(os.path.join(out, "solution.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return 0


def _bench_problems(cfg: dict):
    """Stable random instances; robust ones carry a feasible uncertainty."""
    n, m = int(cfg["n"]), int(cfg["m"])
    tol = float(cfg["solver_tol"])
    rng = learning._rng(int(cfg["seed"]))
    train_cfg = TrainConfig(solver_tol=tol)
    systems = []
    for _ in range(int(cfg["batch"])):
        a, b = learning._stable_gaussian_model(rng, n, m)
        systems.append(LinearSystem(a_nom=a, b_nom=b, q=np.eye(n),
                                    r=np.eye(m), sigma=0.1))
    robust_probs = []
    for sys_ in systems:
        _, d0 = learning._feasible_uncertainty_scale(sys_, train_cfg)
        robust_probs.append(
            build_robust_sdp(sys_, UncertaintyEllipsoid.from_system(sys_, d0)))
    nominal_probs = [build_nominal_lmi(sys_) for sys_ in systems]
    return systems, nominal_probs, robust_probs


def cmd_bench(cfg: dict) -> int:
    if int(cfg["batch"]) < 1:
        raise InputError("batch must be at least 1")
    horizons = [int(h) for h in cfg["horizons"]]
    if not horizons or any(h < 1 for h in horizons):
        raise InputError(f"bad horizons list {cfg['horizons']!r}")
    repeats = max(1, int(cfg["repeats"]))
    tol = float(cfg["solver_tol"])
    systems, nominal_probs, robust_probs = _bench_problems(cfg)

    def time_batch(tasks):
        # problem construction happens outside; this times solves only
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            with ThreadPoolExecutor(max_workers=min(8, len(tasks))) as pool:
                list(pool.map(lambda fn: fn(), tasks))
            samples.append(time.perf_counter() - t0)
        return statistics.median(samples)

    rows = []
    for horizon in horizons:
        finite_tasks = [
            (lambda s=s, h=horizon: solve_finite_horizon(s.a_nom, s.b_nom, s.q, s.r, h))
            for s in systems
        ]
        rows.append(("finite_horizon", horizon, len(systems),
                     time_batch(finite_tasks)))
        for method, probs in (("nominal_lmi", nominal_probs),
                              ("robust_lmi", robust_probs)):
            tasks = [(lambda p=p: solve(p, tol=tol)) for p in probs]
            rows.append((method, horizon, len(probs), time_batch(tasks)))

    out = _ensure_out(cfg)
    with open(os.path.join(out, "bench.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method", "horizon", "batch", "seconds"))
        for method, horizon, batch, seconds in rows:
            writer.writerow((method, horizon, batch, _fmt(seconds)))
    print(f"{'method':<16} {'horizon':>7} {'batch':>5} {'seconds':>12}")
    for method, horizon, batch, seconds in rows:
        print(f"{method:<16} {horizon:>7} {batch:>5} {seconds:>12.4f}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    kwargs = {name: cfg[name] for name in _TRAIN_FIELDS}
    kwargs["d_range"] = tuple(float(v) for v in cfg["d_range"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad training config: {exc}") from exc


def cmd_imitate(cfg: dict) -> int:
    layer = _layer_constant(cfg["layer"], learning.IMITATION_LAYERS)
    scenario = _scenario_constant(cfg["scenario"])
    train_cfg = _train_config(cfg)
    out = _ensure_out(cfg)
    t0 = time.perf_counter()
    state = learning.train_imitation(scenario, layer, train_cfg)
    wall = time.perf_counter() - t0
    _write_history(os.path.join(out, "results.csv"), state.history)
    _write_summary(out, cfg, state, wall)
    print(f"{cfg['command']}: layer {cfg['layer']}, scenario {cfg['scenario']}, "
          f"seed {cfg['seed']}, {state.iteration} iterations in {wall:.1f}s")
    print(f"final validation cost: {_fmt(state.meta['final_validation_cost'])}")
    print(f"results in {out}")
    return 0


def cmd_adp(cfg: dict) -> int:
    layer = _layer_constant(cfg["layer"], learning.ADP_LAYERS)
    train_cfg = _train_config(cfg)
    out = _ensure_out(cfg)
    t0 = time.perf_counter()
    state = learning.train_adp(layer, train_cfg)
    wall = time.perf_counter() - t0
    _write_history(os.path.join(out, "results.csv"), state.history)
    _write_summary(out, cfg, state, wall)
    print(f"adp: layer {cfg['layer']}, seed {cfg['seed']}, "
          f"{state.iteration} iterations in {wall:.1f}s")
    print(f"final average cost: {_fmt(state.meta['final_objective'])}")
    print(f"results in {out}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    instances = int(cfg["instances"])
    if instances < 1:
        raise InputError("gradcheck needs at least one instance")
    n, m = int(cfg["n"]), int(cfg["m"])
    threshold = float(cfg["threshold"])
    tol = float(cfg["solver_tol"])
    d_range = tuple(float(v) for v in cfg["d_range"])
    worst = {name: 0.0 for name in ALL_PARAMS}
    worst_seed = {name: None for name in ALL_PARAMS}
    fallbacks = 0
    offender = None
    for i in range(instances):
        inst_seed = int(cfg["seed"]) + i
        expert = generate_expert(inst_seed, n, m, float(cfg["sigma"]),
                                 d_range=d_range, solver_tol=tol)
        sys_, unc = expert.sys, expert.unc
        prob = build_robust_sdp(sys_, unc)
        sol = solve(prob, tol=tol)
        if sol.status != "optimal":
            raise SolverError(f"instance {inst_seed}: status {sol.status}")
        dl_dk = learning._rng(inst_seed + 500).standard_normal((m, n))
        got = grad_robust_layer(dl_dk, sys_, unc, sol, prob=prob)
        if got.path == "finite_diff":
            fallbacks += 1
        dpp, floor = sol.meta["dpp"], sol.meta["floor"]

        def loss(sys2, unc2):
            # same perturbed-solve routine the layer's own fallback uses,
            # so degenerate instances compare the identical quantity
            sol2 = _fd_resolve(build_robust_sdp(
                sys2, unc2, dpp_auxiliaries=dpp, xi_floor=floor))
            return float(np.sum(dl_dk * recover_gain(sol2).k))

        want = fd_oracle(loss, sys_, unc, step=FD_STEP,
                         trainable=ALL_PARAMS, strict=True)
        got_d, want_d = got.as_dict(), want.as_dict()
        bad_blocks = {}
        for name in ALL_PARAMS:
            g, w = np.asarray(got_d[name]), np.asarray(want_d[name])
            err = float(np.max(np.abs(g - w)) / max(1.0, float(np.max(np.abs(w)))))
            if worst_seed[name] is None or err > worst[name]:
                worst[name] = err
                worst_seed[name] = inst_seed
            if err > threshold:
                bad_blocks[name] = err
        if bad_blocks and offender is None:
            offender = {
                "seed": inst_seed, "a_nom": sys_.a_nom, "b_nom": sys_.b_nom,
                "q": sys_.q, "r": sys_.r, "d": unc.d, "sigma": sys_.sigma,
                "dl_dk": dl_dk, "block_errors": bad_blocks,
                "gradient_path": got.path,
            }
    print(f"gradcheck: {instances} instances, n={n}, m={m}, "
          f"threshold {threshold:g}")
    print(f"finite-difference fallback used on {fallbacks}/{instances} instances")
    for name in ALL_PARAMS:
        print(f"  {name:<6} max rel err {worst[name]:.3e}  (seed {worst_seed[name]})")
    out = _ensure_out(cfg)
    report = {"instances": instances, "threshold": threshold,
              "fallbacks": fallbacks, "max_rel_err": worst,
              "worst_seed": worst_seed,
              "passed": offender is None}
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    if offender is not None:
        path = os.path.join(out, "offending_instance.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(offender, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        print(f"FAIL: blocks over threshold, instance saved to {path}")
        return 1
    print("PASS: all blocks within threshold")
    return 0


_DISPATCH = {
    "solve": cmd_solve,
    "bench": cmd_bench,
    "imitate": cmd_imitate,
    "adp": cmd_adp,
    "gradcheck": cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustlqr",
        description="Robust LQR layers: solvers, experiments, gradient audit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default runs/<command>)")

    p_solve = sub.add_parser("solve", help="solve one encoding and print the gain")
    common(p_solve)
    p_solve.add_argument("--layer", choices=("nominal", "robust"))

    p_bench = sub.add_parser("bench", help="solver timing table across horizons")
    common(p_bench)
    p_bench.add_argument("--horizon", type=int, help="bench a single horizon")

    p_imit = sub.add_parser("imitate", help="imitation learning experiment")
    common(p_imit)
    p_imit.add_argument("--layer", choices=("nominal", "robust", "finite"))
    p_imit.add_argument("--scenario", type=int, choices=(1, 2))
    p_imit.add_argument("--iters", type=int)
    p_imit.add_argument("--horizon", type=int, help="training rollout horizon")

    p_adp = sub.add_parser("adp", help="average-cost policy optimization experiment")
    common(p_adp)
    p_adp.add_argument("--layer", choices=("nominal", "robust", "linear"))
    p_adp.add_argument("--iters", type=int)
    p_adp.add_argument("--horizon", type=int, help="training rollout horizon")

    p_grad = sub.add_parser("gradcheck", help="implicit vs finite-difference audit")
    common(p_grad)
    p_grad.add_argument("--instances", type=int)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return _DISPATCH[args.command](cfg)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except RobustLqrError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
