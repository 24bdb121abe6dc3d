"""Configuration-driven experiment runner.

``pctraj run <config>`` solves the configured problem and writes trajectory,
convergence, and summary artifacts (plus optional Monte-Carlo and
deterministic-baseline outputs); ``sweep-dt`` compares integrators across
step sizes by replaying solved controls on a fine reference grid; ``mc``
runs only the sampling oracle; ``check`` validates a configuration.

Configs are TOML: see ``configs/duffing.conf`` for the full schema.  Exit
codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from . import __version__
from .cost import build_weighted, momentum_weighted
from .ddp import SolverSettings, solve
from .discretize import DelStepper, EulerStepper
from .gpc import GpcCoefficients, PolynomialBasis, Uniform, moment
from .models import duffing, quadrotor
from .verify import mc_propagate

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "run_experiment", "compare_integrators", "main"]

_FLOAT_FMT = "{:.17g}"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    model: str
    integrator: str
    t_f: float
    dt: float
    order: int
    quad_level: int
    goal: list
    terminal_mean_weights: list
    terminal_variance_weights: list
    running_mean_weights: list
    running_variance_weights: list
    control_weight: list
    max_iterations: int
    cost_tolerance: float
    gradient_tolerance: float
    theta_max: float
    clamp_value_curvature: bool
    continuation: bool
    initial_controls: list
    deterministic_ddp: bool
    mc_samples: int
    mc_seed: int
    mc_enabled: bool
    out_dir: str
    threads: int
    model_options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def k_f(self) -> int:
        return int(round(self.t_f / self.dt))


def _get(section: dict, key: str, kind, default=None, required=False, path=""):
    full = f"{path}.{key}" if path else key
    if key not in section:
        if required:
            raise ConfigError(f"missing required key '{full}'")
        return default
    value = section[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if not isinstance(value, kind):
        raise ConfigError(f"key '{full}' must be of type {kind.__name__}")
    return value


def _state_weights(section: dict, key: str, n: int, default: float, path: str) -> list:
    value = section.get(key, default)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)] * n
    if isinstance(value, list) and len(value) == n:
        return [float(v) for v in value]
    raise ConfigError(f"key '{path}.{key}' must be a number or a list of {n} numbers")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc

    problem = raw.get("problem", {})
    model_name = _get(problem, "model", str, required=True, path="problem")
    if model_name not in ("duffing", "quadrotor"):
        raise ConfigError("key 'problem.model' must be 'duffing' or 'quadrotor'")
    integrator = _get(problem, "integrator", str, default="euler", path="problem")
    if integrator not in ("euler", "vi"):
        raise ConfigError("key 'problem.integrator' must be 'euler' or 'vi'")
    t_f = _get(problem, "t_f", float, required=True, path="problem")
    dt = _get(problem, "dt", float, required=True, path="problem")
    if dt <= 0:
        raise ConfigError("key 'problem.dt' must be positive")
    if t_f <= 0:
        raise ConfigError("key 'problem.t_f' must be positive")
    k_f = t_f / dt
    if abs(k_f - round(k_f)) > 1e-9 or round(k_f) < 2:
        raise ConfigError("key 'problem.dt' must divide t_f into at least 2 steps")

    basis_sec = raw.get("basis", {})
    order = _get(basis_sec, "order", int, default=2, path="basis")
    if order < 0:
        raise ConfigError("key 'basis.order' must be nonnegative")
    quad_level = _get(basis_sec, "quad_level", int, default=max(3, order + 1), path="basis")
    if quad_level < 1:
        raise ConfigError("key 'basis.quad_level' must be positive")

    n_states = 2 if model_name == "duffing" else 12
    n_controls = 1 if model_name == "duffing" else 4
    cost_sec = raw.get("cost", {})
    goal = cost_sec.get("goal")
    if not isinstance(goal, list) or len(goal) != n_states:
        raise ConfigError(f"key 'cost.goal' must be a list of {n_states} numbers")
    goal = [float(g) for g in goal]
    tmw = _state_weights(cost_sec, "terminal_mean_weights", n_states, 0.0, "cost")
    tvw = _state_weights(cost_sec, "terminal_variance_weights", n_states, 0.0, "cost")
    rmw = _state_weights(cost_sec, "running_mean_weights", n_states, 0.0, "cost")
    rvw = _state_weights(cost_sec, "running_variance_weights", n_states, 0.0, "cost")
    cw = cost_sec.get("control_weight", 1.0)
    if isinstance(cw, (int, float)) and not isinstance(cw, bool):
        cw = [float(cw)] * n_controls
    elif isinstance(cw, list) and len(cw) == n_controls:
        cw = [float(v) for v in cw]
    else:
        raise ConfigError(f"key 'cost.control_weight' must be a number or list of {n_controls}")
    if any(v <= 0 for v in cw):
        raise ConfigError("key 'cost.control_weight' entries must be positive")
    if any(v < 0 for v in tmw + tvw + rmw + rvw):
        raise ConfigError("cost weights must be nonnegative")

    solver_sec = raw.get("solver", {})
    max_iterations = _get(solver_sec, "max_iterations", int, default=200, path="solver")
    cost_tolerance = _get(solver_sec, "cost_tolerance", float, default=1e-9, path="solver")
    gradient_tolerance = _get(solver_sec, "gradient_tolerance", float, default=1e-6, path="solver")
    theta_max = _get(solver_sec, "theta_max", float, default=1e8, path="solver")
    continuation = bool(solver_sec.get("continuation", False))
    clamp = bool(solver_sec.get("clamp_value_curvature", False))
    for key, val in (
        ("max_iterations", max_iterations),
        ("cost_tolerance", cost_tolerance),
        ("gradient_tolerance", gradient_tolerance),
        ("theta_max", theta_max),
    ):
        if val <= 0:
            raise ConfigError(f"key 'solver.{key}' must be positive")

    init_sec = raw.get("initial", {})
    u0 = init_sec.get("controls", 0.0)
    if isinstance(u0, (int, float)) and not isinstance(u0, bool):
        u0 = [float(u0)] * n_controls
    elif isinstance(u0, list) and len(u0) == n_controls:
        u0 = [float(v) for v in u0]
    else:
        raise ConfigError(f"key 'initial.controls' must be a number or list of {n_controls}")

    base_sec = raw.get("baselines", {})
    det = bool(base_sec.get("deterministic_ddp", False))
    mc_sec = base_sec.get("monte_carlo", {})
    mc_enabled = bool(mc_sec)
    mc_samples = _get(mc_sec, "n_samples", int, default=10000, path="baselines.monte_carlo")
    if mc_samples < 2:
        raise ConfigError("key 'baselines.monte_carlo.n_samples' must be at least 2")
    mc_seed = _get(mc_sec, "seed", int, default=0, path="baselines.monte_carlo")

    out_sec = raw.get("output", {})
    out_dir = _get(out_sec, "directory", str, default="out", path="output")

    model_options = raw.get("model", {}).get(model_name, {})
    if not isinstance(model_options, dict):
        raise ConfigError(f"section 'model.{model_name}' must be a table")

    return ExperimentConfig(
        model=model_name,
        integrator=integrator,
        t_f=t_f,
        dt=dt,
        order=order,
        quad_level=quad_level,
        goal=goal,
        terminal_mean_weights=tmw,
        terminal_variance_weights=tvw,
        running_mean_weights=rmw,
        running_variance_weights=rvw,
        control_weight=cw,
        max_iterations=max_iterations,
        cost_tolerance=cost_tolerance,
        gradient_tolerance=gradient_tolerance,
        theta_max=theta_max,
        clamp_value_curvature=clamp,
        continuation=continuation,
        initial_controls=u0,
        deterministic_ddp=det,
        mc_samples=mc_samples,
        mc_seed=mc_seed,
        mc_enabled=mc_enabled,
        out_dir=out_dir,
        threads=1,
        model_options=dict(model_options),
        raw=raw,
    )


def _build_model(cfg: ExperimentConfig):
    opts = cfg.model_options
    if cfg.model == "duffing":
        return duffing(
            lambda_mean=float(opts.get("lambda_mean", 3.0)),
            lambda_std=float(opts.get("lambda_std", 0.1)),
            x1_mean=float(opts.get("x1_mean", 4.0)),
            x1_std=float(opts.get("x1_std", 0.08)),
            x2_init=float(opts.get("x2_init", 0.0)),
        )
    g_tr = opts.get("g_tr", [2.85e-5, 2.95e-5])
    g_rot = opts.get("g_rot", [1.05e-6, 1.15e-6])
    x0 = opts.get("initial_state", [-3.0, 3.0, 3.0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
    if not isinstance(x0, list) or len(x0) != 12:
        raise ConfigError("key 'model.quadrotor.initial_state' must be a list of 12 numbers")
    return quadrotor(
        g_tr=Uniform(float(g_tr[0]), float(g_tr[1])),
        g_rot=Uniform(float(g_rot[0]), float(g_rot[1])),
        initial_state=tuple(float(v) for v in x0),
    )


def _weight_matrix(mean_w, var_w, k1: int) -> np.ndarray:
    out = np.empty((len(mean_w), k1))
    out[:, 0] = mean_w
    for i, w in enumerate(var_w):
        out[i, 1:] = w
    return out


def _goal_mass_diag(model, goal, basis) -> np.ndarray:
    mech = model.mechanical
    n_cfg = mech.n_config
    q_goal = np.asarray(goal[:n_cfg], dtype=float)
    lam = basis.param_values(np.zeros(basis.d))
    hess = np.asarray(mech.lagrangian_hess(q_goal, np.zeros(n_cfg), lam))
    return np.diag(hess[n_cfg:, n_cfg:]).copy()


def _build_problem(cfg: ExperimentConfig, model, order: Optional[int] = None):
    """Stepper and cost for the configured problem (or an order override)."""
    order = cfg.order if order is None else order
    basis = model.basis(order)
    k1 = basis.n_terms
    quad_level = cfg.quad_level if order > 0 else 1
    s_run = _weight_matrix(cfg.running_mean_weights, cfg.running_variance_weights, k1)
    s_term = _weight_matrix(cfg.terminal_mean_weights, cfg.terminal_variance_weights, k1)
    r = np.diag(cfg.control_weight)
    if cfg.integrator == "vi":
        stepper = DelStepper(model, basis, cfg.dt, quad_level=quad_level)
        mass = _goal_mass_diag(model, cfg.goal, basis)
        cost = momentum_weighted(s_run, s_term, r, cfg.goal, basis, cfg.dt, mass)
    else:
        stepper = EulerStepper(model, basis, cfg.dt, quad_level=quad_level)
        cost = build_weighted(s_run, s_term, r, cfg.goal, basis, cfg.dt)
    return basis, stepper, cost


def _settings(cfg: ExperimentConfig) -> SolverSettings:
    return SolverSettings(
        max_iterations=cfg.max_iterations,
        cost_tolerance=cfg.cost_tolerance,
        gradient_tolerance=cfg.gradient_tolerance,
        theta_max=cfg.theta_max,
        clamp_value_curvature=cfg.clamp_value_curvature,
    )


def _initial_controls(cfg: ExperimentConfig, model, want_baseline: bool = False):
    """Nominal control trajectory, optionally via the zero-order solve.

    Under ``solver.continuation`` the deterministic (single-coefficient)
    problem is solved first and its controls warm-start the full expansion:
    that keeps the first full-order nominal inside a well-linearized regime.
    The zero-order solution doubles as the deterministic baseline.
    """
    u_init = np.tile(np.asarray(cfg.initial_controls), (cfg.k_f, 1))
    base_solution = base_basis = base_stepper = None
    if want_baseline or (cfg.continuation and cfg.order > 0):
        base_basis, base_stepper, base_cost = _build_problem(cfg, model, order=0)
        # The zero-order stage is cheap; let it converge even when the full
        # solve runs under a tighter iteration budget.
        base_settings = SolverSettings(
            max_iterations=max(100, cfg.max_iterations),
            cost_tolerance=cfg.cost_tolerance,
            gradient_tolerance=cfg.gradient_tolerance,
            theta_max=cfg.theta_max,
            clamp_value_curvature=cfg.clamp_value_curvature,
        )
        base_solution = solve(
            base_stepper, base_cost, cfg.k_f, u_init=u_init, settings=base_settings
        )
        if cfg.continuation and cfg.order > 0:
            u_init = base_solution.controls
    return u_init, (base_solution, base_basis, base_stepper)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    return _FLOAT_FMT.format(float(x))


def _csv(rows) -> str:
    return "\n".join(",".join(cells) for cells in rows) + "\n"


def _trajectory_rows(cfg, model, basis, stepper, states, controls):
    n = model.n
    k1 = basis.n_terms
    header = ["time"]
    header += [f"x{i + 1}_c{j}" for i in range(n) for j in range(k1)]
    header += [f"mean_x{i + 1}" for i in range(n)]
    header += [f"var_x{i + 1}" for i in range(n)]
    header += [f"m3_x{i + 1}" for i in range(n)]
    header += [f"u{j + 1}" for j in range(model.m)]
    rows = [header]
    for k, x in enumerate(states):
        coeffs = stepper.state_coefficients(np.asarray(x))
        cells = [_fmt(k * cfg.dt)]
        cells += [_fmt(v) for v in coeffs.coeffs.reshape(-1)]
        for order in (1, 2, 3):
            cells += [_fmt(moment(coeffs, i, order, basis)) for i in range(n)]
        if k < len(controls):
            cells += [_fmt(v) for v in controls[k]]
        else:
            cells += [""] * model.m
        rows.append(cells)
    return rows


def _convergence_rows(solution):
    rows = [["iteration", "cost", "control_distance", "gamma", "theta"]]
    for it, cost in enumerate(solution.cost_history):
        gamma = _fmt(solution.gammas[it - 1]) if 0 < it <= len(solution.gammas) else ""
        theta = _fmt(solution.thetas[it - 1]) if 0 < it <= len(solution.thetas) else ""
        rows.append(
            [str(it), _fmt(cost), _fmt(solution.control_distances[it]), gamma, theta]
        )
    return rows


def _mc_rows(est):
    n = est.mean.shape[1]
    header = ["time"]
    for name in ("mean", "var", "m3", "se_mean", "se_var", "se_m3"):
        header += [f"{name}_x{i + 1}" for i in range(n)]
    rows = [header]
    blocks = (est.mean, est.variance, est.third_central, est.se_mean, est.se_variance, est.se_third)
    for k, t in enumerate(est.times):
        cells = [_fmt(t)]
        for block in blocks:
            cells += [_fmt(v) for v in block[k]]
        rows.append(cells)
    return rows


def _terminal_moments(basis, coeffs: GpcCoefficients):
    n = coeffs.n
    return {
        "mean": [moment(coeffs, i, 1, basis) for i in range(n)],
        "variance": [moment(coeffs, i, 2, basis) for i in range(n)],
        "third_central": [moment(coeffs, i, 3, basis) for i in range(n)],
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_experiment(config_path, out_dir=None, seed=None) -> int:
    """Solve the configured problem and write all artifacts.

    Returns the process exit code (0 ok, 3 solver failure).
    """
    cfg = load_config(config_path)
    if seed is not None:
        cfg.mc_seed = int(seed)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    started = time.perf_counter()

    model = _build_model(cfg)
    basis, stepper, cost = _build_problem(cfg, model)
    u_init, base = _initial_controls(cfg, model, want_baseline=cfg.deterministic_ddp)
    base_solution, base_basis, base_stepper = base
    solution = solve(stepper, cost, cfg.k_f, u_init=u_init, settings=_settings(cfg))

    _atomic_write(
        out / "trajectory.csv",
        _csv(_trajectory_rows(cfg, model, basis, stepper, solution.states, solution.controls)),
    )
    _atomic_write(out / "convergence.csv", _csv(_convergence_rows(solution)))

    terminal = stepper.state_coefficients(np.asarray(solution.states[-1]))
    summary = {
        "version": __version__,
        "final_cost": float(solution.cost_history[-1]),
        "termination": solution.termination,
        "iterations": solution.iterations,
        "wall_time_s": time.perf_counter() - started,
        "terminal": _terminal_moments(basis, terminal),
        "config": cfg.raw,
    }

    if cfg.mc_enabled:
        est = mc_propagate(
            model, solution.controls, cfg.dt, cfg.k_f, cfg.mc_samples, cfg.mc_seed
        )
        _atomic_write(out / "mc.csv", _csv(_mc_rows(est)))
        summary["monte_carlo"] = {
            "n_samples": est.n_samples,
            "seed": est.seed,
            "n_failed": est.n_failed,
            "terminal_mean": est.mean[-1].tolist(),
            "terminal_variance": est.variance[-1].tolist(),
        }

    if cfg.deterministic_ddp and base_solution is not None:
        _atomic_write(
            out / "baseline_trajectory.csv",
            _csv(
                _trajectory_rows(
                    cfg, model, base_basis, base_stepper,
                    base_solution.states, base_solution.controls,
                )
            ),
        )
        _atomic_write(out / "baseline_convergence.csv", _csv(_convergence_rows(base_solution)))
        summary["baseline"] = {
            "final_cost": float(base_solution.cost_history[-1]),
            "termination": base_solution.termination,
            "iterations": base_solution.iterations,
        }
        if cfg.mc_enabled:
            base_est = mc_propagate(
                model, base_solution.controls, cfg.dt, cfg.k_f, cfg.mc_samples, cfg.mc_seed
            )
            _atomic_write(out / "baseline_mc.csv", _csv(_mc_rows(base_est)))
            summary["baseline"]["mc_terminal_variance"] = base_est.variance[-1].tolist()

    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0 if solution.termination in ("converged", "max_iterations") else 3


def _replay_fine(model, cfg: ExperimentConfig, controls: np.ndarray, dt: float, fine_dt: float = 0.001):
    """Zero-order-hold replay of solved controls on a fine Euler grid."""
    basis = model.basis(cfg.order)
    stepper = EulerStepper(model, basis, fine_dt, quad_level=cfg.quad_level)
    reps = int(round(dt / fine_dt))
    if abs(reps * fine_dt - dt) > 1e-9:
        raise ConfigError(f"sweep dt {dt} is not a multiple of the replay step {fine_dt}")
    x = stepper.initial_state()
    t = 0.0
    for u in controls:
        for _ in range(reps):
            x = stepper.step(x, u, t)
            t += fine_dt
    coeffs = stepper.state_coefficients(x)
    return np.array([moment(coeffs, i, 1, basis) for i in range(model.n)])


def compare_integrators(config_path, dt_values, out_dir=None) -> int:
    """Solve with each integrator at each step size and compare fine replays.

    Writes one ``dt_sweep.csv`` row per (integrator, dt) with the replayed
    terminal means and the discrepancy against the same integrator's
    finest-dt run.
    """
    cfg = load_config(config_path)
    dt_values = sorted(float(v) for v in dt_values)
    if len(dt_values) < 2:
        raise ConfigError("sweep needs at least two dt values")
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    model = _build_model(cfg)

    header = ["integrator", "dt"]
    header += [f"mean_x{i + 1}" for i in range(model.n)]
    header += ["discrepancy_vs_finest"]
    rows = [header]
    for integrator in ("euler", "vi"):
        reference = None
        for dt in dt_values:
            sub = ExperimentConfig(**{**cfg.__dict__, "integrator": integrator, "dt": dt})
            k_f = sub.k_f
            if abs(k_f - sub.t_f / dt) > 1e-9 or k_f < 2:
                raise ConfigError(f"sweep dt {dt} does not divide t_f {sub.t_f}")
            _, stepper, cost = _build_problem(sub, model)
            u_init, _ = _initial_controls(sub, model)
            solution = solve(stepper, cost, k_f, u_init=u_init, settings=_settings(sub))
            mean = _replay_fine(model, sub, solution.controls, dt)
            if reference is None:
                reference = mean
                disc = 0.0
            else:
                disc = float(np.linalg.norm(mean - reference))
            rows.append([integrator, _fmt(dt)] + [_fmt(v) for v in mean] + [_fmt(disc)])
    _atomic_write(out / "dt_sweep.csv", _csv(rows))
    return 0


def run_mc(config_path, out_dir=None, seed=None) -> int:
    """Run only the Monte-Carlo oracle (zero controls) and write mc.csv."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.mc_seed = int(seed)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    model = _build_model(cfg)
    est = mc_propagate(model, None, cfg.dt, cfg.k_f, cfg.mc_samples, cfg.mc_seed)
    _atomic_write(out / "mc.csv", _csv(_mc_rows(est)))
    return 0


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    here = Path(__file__).parent / "configs" / f"{name}.conf"
    if not here.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return here


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pctraj",
        description="Trajectory optimization under parametric uncertainty.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="path to a TOML experiment configuration")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="Monte-Carlo seed override")
        p.add_argument("--threads", type=int, default=1, help="reserved; computations are single-threaded")

    p_run = sub.add_parser("run", help="solve the configured problem and write artifacts")
    add_common(p_run)
    p_sweep = sub.add_parser("sweep-dt", help="compare integrators across time steps")
    add_common(p_sweep)
    p_sweep.add_argument("--dt", required=True, help="comma-separated list of step sizes")
    p_mc = sub.add_parser("mc", help="run the Monte-Carlo oracle only")
    add_common(p_mc)
    p_check = sub.add_parser("check", help="validate a configuration")
    p_check.add_argument("config")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run_experiment(args.config, args.out, args.seed)
        if args.command == "sweep-dt":
            dts = [v for v in args.dt.split(",") if v]
            return compare_integrators(args.config, dts, args.out)
        if args.command == "mc":
            return run_mc(args.config, args.out, args.seed)
        if args.command == "check":
            load_config(args.config)
            print("ok")
            return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
