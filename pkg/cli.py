"""Command-line entry point: solve, check, sweep, critical, export."""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from closure import GasModel, Profile, build_closure, dump_closure
from config import (
    CHECK_FD_STEP,
    CHECK_GRID,
    CHECK_RANDOM_FIELDS,
    CHECK_TRUNCATION_SAMPLES,
    CONFIG_ENV_VAR,
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_INTERNAL,
    EXIT_IO,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    FORMAT_TAG,
)
from data_loader import (
    build_model,
    build_nozzle_from_config,
    build_problem,
    energy_params,
    load_config,
    pbar_threshold,
    problem_factory,
)
from errors import (
    BracketError,
    ConfigurationError,
    ExportError,
    GeometryError,
    InvalidModelError,
    SubjetError,
)
from fields import export, recover_fields, write_table
from geometry import BoundaryDatum, build_domain, build_nozzle, export_mesh
from helpers import format_float, make_run_key, write_files_atomically
from jetfit import critical_pressure, load_bracket_state, pressure_sweep, solve_jet
from notifications import render_messages, reset_messages
from solver import EnergyParams, energy_and_gradient, minimize

logger = logging.getLogger(__name__)

CHECK_REL_TOL = 1e-5
GRADIENT_REL_TOL = 1e-6
STRIP_TOL = 1e-8
ROUND_TRIP_TOL = 1e-10


# =========================
# Invariant battery
# =========================
def _relative_error(approx, exact) -> float:
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    floor = max(1e-3 * float(np.max(np.abs(exact))), 1e-12)
    return float(np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), floor)))


def check_closure_identities(table) -> dict:
    """∂_t g, ∂_z g, ∂_t G and ∂_z G against central differences on a subsonic grid."""
    Q, eps = table.Q, table.epsilon
    z = np.linspace(0.02, 0.98, CHECK_GRID) * Q
    _, _, tc = table.critical_quantities(z)
    frac = np.linspace(0.02, 0.95, CHECK_GRID) * (1.0 - eps)
    T = frac[None, :] * tc[:, None]
    Z = np.repeat(z[:, None], CHECK_GRID, axis=1)

    g, gdt, gdz = table.g_eps(T, Z)
    G, _, dzG = (a.reshape(T.shape) for a in table.energy_density_terms(T, Z))
    dT = CHECK_FD_STEP * T
    dZ = CHECK_FD_STEP * Q
    fd_gt = (table.g_eps(T + dT, Z)[0] - table.g_eps(T - dT, Z)[0]) / (2.0 * dT)
    fd_gz = (table.g_eps(T, Z + dZ)[0] - table.g_eps(T, Z - dZ)[0]) / (2.0 * dZ)
    fd_Gt = (table.G_eps(T + dT, Z) - table.G_eps(T - dT, Z)) / (2.0 * dT)
    fd_Gz = (table.G_eps(T, Z + dZ) - table.G_eps(T, Z - dZ)) / (2.0 * dZ)

    errors = {
        "dt_g": _relative_error(fd_gt, gdt),
        "dz_g": _relative_error(fd_gz, gdz),
        "dt_G": _relative_error(fd_Gt, 0.5 * g),
        "dz_G": _relative_error(fd_Gz, dzG),
    }
    worst = max(errors.values())
    return {**errors, "max_rel": worst, "passed": worst <= CHECK_REL_TOL}


def check_truncation(table, rng) -> dict:
    """g_eps = g below (1−ε)t_c and g_eps = g* above (1−ε/2)t_c on random samples."""
    z = rng.uniform(0.0, table.Q, CHECK_TRUNCATION_SAMPLES)
    _, _, tc = table.critical_quantities(z)
    t = rng.uniform(0.0, 1.5, CHECK_TRUNCATION_SAMPLES) * tc
    g_eps, _, _ = table.g_eps(t, z)
    below = t <= (1.0 - table.epsilon) * tc
    above = t >= (1.0 - 0.5 * table.epsilon) * tc
    g = table.invert_density(t[below], z[below])
    low = int(np.sum(np.abs(g_eps[below] - g) > 1e-13 * g))
    high = int(np.sum(g_eps[above] != table.g_upper))
    return {
        "below": int(below.sum()),
        "above": int(above.sum()),
        "violations": low + high,
        "passed": low + high == 0,
    }


def check_phi(table, rng) -> dict:
    """Φ_eps(0, Q) = 0 and ∂_tΦ_eps > 0 on random samples."""
    phi0, _ = table.phi_eps(0.0, table.Q)
    z = rng.uniform(0.0, table.Q, CHECK_TRUNCATION_SAMPLES)
    _, _, tc = table.critical_quantities(z)
    t = rng.uniform(0.0, 1.5, CHECK_TRUNCATION_SAMPLES) * tc
    _, dphi = table.phi_eps(t, z)
    return {
        "phi_at_zero": float(phi0),
        "min_slope": float(dphi.min()),
        "passed": bool(abs(phi0) <= 1e-12 and dphi.min() > 0.0),
    }


def check_gradient(table, nozzle, h: float, rng, params: EnergyParams) -> dict:
    """Directional derivative of the discrete energy against central differences."""
    domain = build_domain(nozzle, 1.0, 1.0, h)
    Q = table.Q
    lam = 0.5 * float(np.sqrt(table.critical_quantities(Q)[2]))
    lam_eps = table.lambda_eps(lam)
    delta = params.delta_for(h, lam)
    base = np.minimum(Q, table.psi_bar(domain.nodes[:, 1]))
    worst = 0.0
    for _ in range(CHECK_RANDOM_FIELDS):
        psi = np.clip(base + 0.05 * Q * rng.standard_normal(domain.n_nodes), 0.0, Q)
        direction = rng.standard_normal(domain.n_nodes)
        _, gradient, _ = energy_and_gradient(domain, psi, table, lam_eps, params, delta)
        step = CHECK_FD_STEP * Q
        Jp, _, _ = energy_and_gradient(domain, psi + step * direction, table, lam_eps, params, delta, need_gradient=False)
        Jm, _, _ = energy_and_gradient(domain, psi - step * direction, table, lam_eps, params, delta, need_gradient=False)
        fd = (Jp - Jm) / (2.0 * step)
        exact = float(gradient @ direction)
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
    return {"fields": CHECK_RANDOM_FIELDS, "max_rel": worst, "passed": worst <= GRADIENT_REL_TOL}


def check_strip(gamma: float, epsilon: float, h: float) -> dict:
    """Constant data on the unit strip with linear boundary values returns the linear field."""
    model = GasModel(gamma, 2.0, Profile.constant(1.0), Profile.constant(1.0), 1.0)
    table = build_closure(model, epsilon)
    domain = build_domain(build_nozzle("strip"), 0.0, 1.0, h)
    datum = BoundaryDatum.from_function(domain, lambda x1, x2: table.Q * x2, table.Q)
    params = EnergyParams(grad_tol=1e-10)
    x1, x2 = domain.nodes[:, 0], domain.nodes[:, 1]
    start = table.Q * (x2 + 0.03 * np.sin(np.pi * x1) * np.sin(np.pi * x2))
    field = minimize(datum, table, 0.0, params, warm_start=start, lam=1.0)
    error = float(np.max(np.abs(field.psi - table.Q * domain.nodes[:, 1])))
    return {"nodes": domain.n_nodes, "max_error": error, "passed": error <= STRIP_TOL}


def check_round_trip(table) -> dict:
    """Λ -> P -> Λ on pressures inside the subsonic window."""
    lo, hi = table.pressure_window()
    worst = 0.0
    for p in lo + (hi - lo) * np.linspace(0.1, 0.9, 5):
        lam = table.momentum_on_fb(p)
        worst = max(worst, abs(table.pressure_from_fb(lam) - p) / p)
    return {"max_rel": worst, "passed": worst <= ROUND_TRIP_TOL}


def run_checks(config, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    table = build_closure(build_model(config), config.numerics.epsilon, nodes=config.numerics.table_nodes)
    params = energy_params(config)
    results = {
        "closure_identity": check_closure_identities(table),
        "truncation": check_truncation(table, rng),
        "phi_contract": check_phi(table, rng),
        "gradient_fd": check_gradient(table, build_nozzle("strip"), 0.1, rng, params),
        "strip_exactness": check_strip(config.gas.gamma, config.numerics.epsilon, 0.1),
        "round_trip": check_round_trip(table),
    }
    return results


def check_report(results: dict, run_key: str) -> str:
    lines = [FORMAT_TAG, f"run_key = {run_key}"]
    for name, values in results.items():
        for key, value in values.items():
            if isinstance(value, (bool, np.bool_)):
                text = "true" if value else "false"
            elif isinstance(value, (int, np.integer)):
                text = str(int(value))
            else:
                text = format_float(value)
            lines.append(f"{name}.{key} = {text}")
    return "\n".join(lines) + "\n"


# =========================
# Commands
# =========================
def cmd_solve(config, out: Path, args) -> int:
    problem = build_problem(config)
    solution = solve_jet(problem)
    fields = recover_fields(solution.field, problem.table)
    export(solution, problem.table, out, stations=config.output.stations or None, fields=fields)
    write_table(solution.stages, out / "stages.txt")
    write_table(solution.fit.probes, out / "fit_probes.txt")
    print(
        f"lambda = {format_float(solution.lam)}\n"
        f"mach_ratio = {format_float(solution.mach['mach_ratio'])}\n"
        f"accepted = {'true' if solution.accepted else 'false'}"
    )
    return EXIT_OK if solution.accepted else EXIT_NOT_CONVERGED


def cmd_check(config, out: Path, args) -> int:
    seed = config.numerics.seed
    results = run_checks(config, seed)
    report = check_report(results, make_run_key(config.text, "check", seed))
    sys.stdout.write(report)
    try:
        write_files_atomically({out / "check_report.txt": report})
    except OSError as exc:
        raise ExportError(f"could not write check report: {exc}") from exc
    failed = [name for name, values in results.items() if not values["passed"]]
    if failed:
        logger.error("failed invariant checks: %s", ", ".join(failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_sweep(config, out: Path, args) -> int:
    pressures = config.schedule.pressures
    if not pressures:
        raise ConfigurationError("sweep needs schedule.pressures", key="schedule.pressures")
    table = pressure_sweep(problem_factory(config), pressures, config.numerics.epsilon, threads=args.threads)
    table = table.sort_values("pbar", ascending=False, kind="mergesort").reset_index(drop=True)
    write_table(table, out / "sweep.txt")
    sys.stdout.write(table.to_string(index=False) + "\n")
    if not table["passed"].any():
        logger.error("no sweep pressure produced an accepted subsonic solution")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_critical(config, out: Path, args) -> int:
    schedule = config.schedule
    if schedule.pbar_lo is None or schedule.pbar_hi is None:
        raise ConfigurationError("critical needs schedule.pbar_lo and schedule.pbar_hi", key="schedule.pbar_lo")
    state_path = out / "critical_state.txt"
    resume = load_bracket_state(state_path) if args.resume and state_path.exists() else None
    report = critical_pressure(
        problem_factory(config),
        (schedule.pbar_lo, schedule.pbar_hi),
        config.numerics.epsilon,
        pbar_threshold(config),
        width=schedule.pbar_width,
        resume=resume,
        state_path=state_path,
    )
    comments = [
        f"pbar_lo = {format_float(report.pbar_lo)}",
        f"pbar_hi = {format_float(report.pbar_hi)}",
        f"pbar_c = {format_float(report.pbar_c)}",
        f"width = {format_float(report.width)}",
        f"monotone = {'true' if report.monotone else 'false'}",
    ]
    write_table(report.probes, out / "critical.txt", comments=comments)
    sys.stdout.write("\n".join(comments) + "\n")
    return EXIT_OK


def cmd_export(config, out: Path, args) -> int:
    """Closure snapshot and one mesh per schedule stage, without solving."""
    table = build_closure(build_model(config), config.numerics.epsilon, nodes=config.numerics.table_nodes)
    nozzle = build_nozzle_from_config(config)
    try:
        dump_closure(table, out / "closure.txt")
        for j, (mu, R) in enumerate(config.schedule.stages):
            export_mesh(build_domain(nozzle, mu, R, config.numerics.h), out / f"mesh_stage{j}.txt")
    except OSError as exc:
        raise ExportError(f"could not write to {out}: {exc}") from exc
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "check": cmd_check,
    "sweep": cmd_sweep,
    "critical": cmd_critical,
    "export": cmd_export,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigurationError, BracketError, InvalidModelError, GeometryError)):
        return EXIT_CONFIG
    if isinstance(exc, (ExportError, OSError)):
        return EXIT_IO
    if isinstance(exc, SubjetError):
        return EXIT_NOT_CONVERGED
    return EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjet", description="Subsonic jet free-boundary solver")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help=f"run description (falls back to ${CONFIG_ENV_VAR})")
    parser.add_argument("--out", help="output directory (default: output.directory)")
    parser.add_argument("--threads", type=int, default=1, help="parallel probes for sweep")
    parser.add_argument("--seed", type=int, help="seed for randomized checks")
    parser.add_argument("--resume", action="store_true", help="critical: continue from the saved bracket")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    reset_messages()
    try:
        path = args.config or os.environ.get(CONFIG_ENV_VAR)
        if not path:
            raise ConfigurationError(f"no config given; use --config or set {CONFIG_ENV_VAR}")
        config = load_config(path)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        out = Path(args.out or config.output.directory)
        code = COMMANDS[args.command](config, out, args)
    except Exception as exc:  # every failure leaves through the exit-code table
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            logger.exception("internal error")
        else:
            logger.error("%s: %s", type(exc).__name__, exc)
    render_messages(sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
