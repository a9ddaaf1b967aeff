"""Outer loops: continuous fit of Λ, domain continuation, and critical pressure."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
from matplotlib.tri import LinearTriInterpolator
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from config import (
    CONTINUATION_LAMBDA_TOL,
    CONTINUATION_PSI_TOL,
    CRITICAL_WIDTH_REL,
    DEFAULT_S_EXPONENT,
    DEFAULT_SCHEDULE,
    DOWNSTREAM_SAMPLES,
    FB_SAMPLE_FRACTION,
    FIT_BRACKET,
    FIT_GAP_CELLS,
    FIT_MAX_EXPANSIONS,
    FIT_MAX_PROBES,
    FIT_WIDTH_REL,
    FLUX_RTOL,
    FORMAT_TAG,
    UPSTREAM_PROBE_OFFSET,
)
from errors import (
    BracketError,
    DomainError,
    InconsistentLambdaError,
    SubjetError,
    UnfittableError,
)
from geometry import NozzleGeometry, TruncatedDomain, boundary_datum, build_domain
from helpers import format_float, write_files_atomically
from notifications import add_message
from solver import (
    EnergyParams,
    FreeBoundaryCurve,
    StreamField,
    el_residual,
    extract_free_boundary,
    fb_condition_check,
    minimize,
    monotonicity_check,
    outlet_gap,
    smooth_fit_check,
)

logger = logging.getLogger(__name__)


@dataclass
class JetProblem:
    """Everything a jet solve needs besides the truncation schedule."""

    table: object
    nozzle: NozzleGeometry
    h: float
    params: EnergyParams = field(default_factory=EnergyParams)
    s: float = DEFAULT_S_EXPONENT
    k_mu: Optional[float] = None
    lam_bracket: Optional[tuple] = None
    schedule: list = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    grading: float = 0.0


@dataclass
class FitReport:
    lam_fit: float
    gap: float
    probes: pd.DataFrame
    iterations: int
    bracket: tuple
    initial_bracket: tuple
    fitted: bool
    c_bound: float
    method: str = "bisection"


@dataclass
class DownstreamState:
    """Asymptotic one-dimensional jet far downstream."""

    lam: float
    P: float
    H: float
    profile: pd.DataFrame


@dataclass
class JetSolution:
    field: StreamField
    curve: Optional[FreeBoundaryCurve]
    lam: float
    mu: float
    R: float
    fit: FitReport
    stages: pd.DataFrame
    converged: bool
    mach: dict
    downstream: Optional[DownstreamState]
    datum: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def domain(self) -> TruncatedDomain:
        return self.field.domain

    @property
    def accepted(self) -> bool:
        return bool(self.converged and self.fit.fitted and self.mach.get("passed", False))


@dataclass
class CriticalReport:
    pbar_lo: float
    pbar_hi: float
    pbar_c: float
    epsilon: float
    width: float
    probes: pd.DataFrame
    monotone: bool


# =========================
# Continuous fit
# =========================
def _default_bracket(table) -> tuple:
    _, _, tc = table.critical_quantities(table.Q)
    root = float(np.sqrt(tc))
    return FIT_BRACKET[0] * root, FIT_BRACKET[1] * root


def _probe(domain, problem: JetProblem, lam: float, warm: Optional[StreamField]):
    table = problem.table
    lam_eps = table.lambda_eps(lam)
    datum = boundary_datum(domain, table, lam, s=problem.s, k_mu=problem.k_mu)
    result = minimize(datum, table, lam_eps, problem.params, warm_start=warm, lam=lam)
    gap = outlet_gap(result)
    logger.info("fit probe Lambda=%.8g: gap=%.4g (iterations=%d)", lam, gap, result.iterations)
    return gap, result, datum


def continuous_fit(
    domain: TruncatedDomain,
    problem: JetProblem,
    lam_bracket: tuple = None,
    warm_start: StreamField = None,
):
    """
    Bisection on the signed outlet gap Υ_Λ(1), assumed decreasing in Λ. When the
    bracket cannot be widened to a sign change, |Υ| is minimized over the sampled
    range instead and the fit fails only if that minimum stays above 2h.
    Returns (FitReport, field, datum).
    """
    table = problem.table
    _, _, tc = table.critical_quantities(table.Q)
    lam_max = float(np.sqrt(tc))
    lo, hi = lam_bracket or problem.lam_bracket or _default_bracket(table)
    lo, hi = float(lo), float(min(hi, lam_max * (1.0 - 1e-9)))
    if not (0.0 < lo < hi):
        raise DomainError(f"Lambda bracket ({lo:g}, {hi:g}) must satisfy 0 < lo < hi < sqrt(t_c(Q))")
    initial = (lo, hi)
    tol_gap = FIT_GAP_CELLS * domain.h
    tol_width = FIT_WIDTH_REL * table.Q

    rows = []
    fields = {}

    def run(lam, warm):
        gap, result, datum = _probe(domain, problem, lam, warm)
        rows.append((lam, gap, result.iterations, result.converged))
        fields[lam] = (result, datum)
        return gap, result

    def smallest_gap():
        return min(((abs(g), lam) for lam, g, _, _ in rows))[1]

    gap_lo, f_lo = run(lo, warm_start)
    gap_hi, f_hi = run(hi, f_lo)
    expansions = 0
    bracketed = True
    while not (gap_lo > 0.0 > gap_hi) and abs(gap_lo) > tol_gap and abs(gap_hi) > tol_gap:
        if expansions >= FIT_MAX_EXPANSIONS:
            bracketed = False
            break
        expansions += 1
        if gap_lo <= 0.0:
            lo *= 0.7
            gap_lo, f_lo = run(lo, f_lo)
        if gap_hi >= 0.0:
            hi = hi + 0.5 * (lam_max - hi)
            gap_hi, f_hi = run(hi, f_hi)

    method = "bisection"
    iterations = 0
    best = smallest_gap()
    if not bracketed:
        # no sign change: the gap may only touch zero, so minimize |gap| over the sampled range
        method = "bounded-scalar"
        warm = fields[best][0]
        remaining = max(FIT_MAX_PROBES - len(rows), 1)
        minimize_scalar(
            lambda lam: abs(run(lam, warm)[0]),
            bounds=(lo, hi),
            method="bounded",
            options={"maxiter": remaining, "xatol": tol_width},
        )
        best = smallest_gap()
        gap_best = next(g for lam, g, _, _ in rows if lam == best)
        if abs(gap_best) > tol_gap:
            raise UnfittableError(
                f"no sign change of the outlet gap in [{lo:.6g}, {hi:.6g}] after {expansions} expansions "
                f"and |gap| >= {abs(gap_best):.3g} > {tol_gap:.3g}",
                probes=pd.DataFrame(rows, columns=["lam", "gap", "iterations", "converged"]),
            )
        logger.warning("outlet gap keeps its sign on [%.6g, %.6g]; |gap| minimized at %.8g", lo, hi, best)
    elif abs(gap_lo) > tol_gap and abs(gap_hi) > tol_gap:
        warm = f_lo
        while len(rows) < FIT_MAX_PROBES and (hi - lo) > tol_width:
            mid = 0.5 * (lo + hi)
            gap_mid, warm = run(mid, warm)
            iterations += 1
            if abs(gap_mid) <= tol_gap:
                break
            if not (gap_hi <= gap_mid <= gap_lo):
                method = "bounded-scalar"
                remaining = max(FIT_MAX_PROBES - len(rows), 1)
                fallback = minimize_scalar(
                    lambda lam: abs(run(lam, warm)[0]),
                    bounds=(lo, hi),
                    method="bounded",
                    options={"maxiter": remaining, "xatol": tol_width},
                )
                logger.warning("outlet gap is not monotone in Lambda; bounded search ended at %.8g", fallback.x)
                break
            if gap_mid > 0.0:
                lo, gap_lo = mid, gap_mid
            else:
                hi, gap_hi = mid, gap_mid
        best = smallest_gap()

    probes = pd.DataFrame(rows, columns=["lam", "gap", "iterations", "converged"])
    gap = float(probes.loc[probes["lam"] == best, "gap"].iloc[0])
    result, datum = fields[best]
    Q = table.Q
    report = FitReport(
        lam_fit=float(best),
        gap=gap,
        probes=probes,
        iterations=iterations,
        bracket=(lo, hi),
        initial_bracket=initial,
        fitted=bool(abs(gap) <= tol_gap),
        c_bound=float(max(Q / best, best / Q)),
        method=method,
    )
    if not report.fitted:
        add_message("warning", f"continuous fit stopped with outlet gap {gap:.3g} > {tol_gap:.3g}")
    logger.info("continuous fit: Lambda=%.8g, gap=%.4g after %d probes", best, gap, len(probes))
    return report, result, datum


# =========================
# Continuation
# =========================
def transfer_field(previous: StreamField, domain: TruncatedDomain, table) -> np.ndarray:
    """Nodal values of a previous field on a new mesh; min(Q, ψ̄) where it does not reach."""
    interp = LinearTriInterpolator(previous.domain.triangulation, previous.psi)
    values = interp(domain.nodes[:, 0], domain.nodes[:, 1])
    fallback = np.minimum(table.Q, table.psi_bar(domain.nodes[:, 1]))
    return np.where(np.ma.getmaskarray(values), fallback, np.ma.getdata(values))


def _common_difference(previous: StreamField, current: StreamField) -> float:
    interp = LinearTriInterpolator(previous.domain.triangulation, previous.psi)
    values = interp(current.domain.nodes[:, 0], current.domain.nodes[:, 1])
    inside = ~np.ma.getmaskarray(values)
    if not np.any(inside):
        return float("inf")
    return float(np.max(np.abs(np.ma.getdata(values)[inside] - current.psi[inside])))


def upstream_residual(field: StreamField, table, offset: float = UPSTREAM_PROBE_OFFSET) -> float:
    """‖ψ(−μ + offset, ·) − ψ̄‖∞ along a vertical line near the inlet."""
    domain = field.domain
    x1 = -domain.mu + offset
    if x1 > domain.R:
        return float("nan")
    top = float(domain.top(x1))
    x2 = np.linspace(0.0, top, int(np.ceil(top / (FB_SAMPLE_FRACTION * domain.h))) + 1)
    interp = LinearTriInterpolator(domain.triangulation, field.psi)
    values = interp(np.full_like(x2, x1), x2)
    keep = ~np.ma.getmaskarray(values)
    diff = np.ma.getdata(values)[keep] - table.psi_bar(x2[keep])
    return float(np.max(np.abs(diff))) if diff.size else float("nan")


def continuation(problem: JetProblem, schedule: list = None):
    """
    Fit Λ on each (μ, R) of an increasing schedule, warm-starting from the previous
    stage. Stops once ψ and Λ stabilize; returns (field, fit, stages, converged, datum).
    """
    table = problem.table
    schedule = list(schedule or problem.schedule)
    if not schedule:
        raise DomainError("continuation schedule is empty")
    previous = None
    fit = datum = None
    rows = []
    converged = False
    for mu, R in schedule:
        domain = build_domain(problem.nozzle, mu, R, problem.h, grading=problem.grading)
        bracket = None
        warm = None
        if previous is not None:
            lam = fit.lam_fit
            bracket = (0.9 * lam, 1.1 * lam)
            warm = StreamField(
                domain, transfer_field(previous, domain, table), domain.boundary.copy(), table.Q, previous.tol_q,
                delta_chi=previous.delta_chi if previous.domain.h == domain.h else 0.0,
            )
        prev_lam = fit.lam_fit if fit is not None else None
        fit, current, datum = continuous_fit(domain, problem, lam_bracket=bracket, warm_start=warm)
        dpsi = _common_difference(previous, current) if previous is not None else float("inf")
        dlam = abs(fit.lam_fit - prev_lam) if prev_lam is not None else float("inf")
        residual = upstream_residual(current, table)
        rows.append((mu, R, fit.lam_fit, fit.gap, dpsi, dlam, residual, current.iterations, current.converged))
        logger.info("stage mu=%g R=%g: Lambda=%.8g, dpsi=%.3g, dLambda=%.3g", mu, R, fit.lam_fit, dpsi, dlam)
        if (
            previous is not None
            and dpsi <= CONTINUATION_PSI_TOL * table.Q
            and dlam <= CONTINUATION_LAMBDA_TOL * prev_lam
        ):
            previous = current
            converged = True
            break
        previous = current

    stages = pd.DataFrame(
        rows,
        columns=["mu", "R", "lam", "gap", "dpsi", "dlam", "upstream_residual", "iterations", "solver_converged"],
    )
    if not converged:
        add_message("warning", f"continuation did not stabilize over {len(schedule)} stages")
    return previous, fit, stages, converged, datum


# =========================
# Subsonic check and downstream state
# =========================
def subsonic_check(field: StreamField, table, epsilon: float = None) -> dict:
    """𝔐 = max over elements of |∇ψ|²/t_c(ψ); passes iff 𝔐 <= 1 − ε."""
    epsilon = table.epsilon if epsilon is None else epsilon
    domain = field.domain
    grad = domain.gradient(field.psi)
    t = np.sum(grad * grad, axis=1)
    z = field.psi[domain.elements].mean(axis=1)
    _, _, tc = table.critical_quantities(z)
    ratio = t / tc
    k = int(np.argmax(ratio))
    mach = float(ratio[k])
    return {
        "mach_ratio": mach,
        "passed": bool(mach <= 1.0 - epsilon),
        "epsilon": float(epsilon),
        "element": k,
    }


def downstream_state(table, lam: float, samples: int = DOWNSTREAM_SAMPLES) -> DownstreamState:
    """Constant pressure P from Λ; density, speed and height of the far jet."""
    P = table.pressure_from_fb(lam)
    gm = table.gamma

    def state(z):
        S = table.entropy(z)
        B = table.bernoulli(z)
        rho = (gm * P / ((gm - 1.0) * S)) ** (1.0 / gm)
        radicand = 2.0 * B - 2.0 * rho ** (gm - 1.0) * S
        return rho, radicand

    z = np.linspace(0.0, table.Q, samples)
    rho, radicand = state(z)
    if np.any(radicand < 0.0):
        k = int(np.argmax(radicand < 0.0))
        raise InconsistentLambdaError(f"negative squared speed at z={z[k]:.6g} for Lambda={lam:.6g}")
    u = np.sqrt(radicand)

    def inverse_flux(s):
        r, rad = state(s)
        if rad <= 0.0:
            raise InconsistentLambdaError(f"negative squared speed at z={s:.6g} for Lambda={lam:.6g}")
        return float(1.0 / (r * np.sqrt(rad)))

    pieces = [
        quad(inverse_flux, a, b, epsabs=0.0, epsrel=FLUX_RTOL, limit=100)[0] for a, b in zip(z[:-1], z[1:])
    ]
    x2 = np.concatenate([[0.0], np.cumsum(pieces)])
    H = float(x2[-1])
    profile = pd.DataFrame({"z": z, "x2": x2, "rho": rho, "u": u})
    logger.info("downstream state: P=%.10g, H=%.10g", P, H)
    return DownstreamState(float(lam), float(P), H, profile)


# =========================
# Full pipeline
# =========================
def solve_jet(problem: JetProblem, schedule: list = None) -> JetSolution:
    """Continuation, free boundary, subsonic verdict, downstream state and diagnostics."""
    table = problem.table
    field_, fit, stages, converged, datum = continuation(problem, schedule)
    lam = fit.lam_fit
    mach = subsonic_check(field_, table)
    curve = extract_free_boundary(field_, problem.params)
    down = downstream_state(table, lam)
    domain = field_.domain

    residual = el_residual(field_, table, problem.params)
    diagnostics = {
        "el_residual_max": residual["max"],
        "el_residual_l2": residual["l2"],
        "el_flagged": int(residual["flagged"].size),
        "fb_condition": fb_condition_check(field_, curve, table, lam),
        "monotonicity": monotonicity_check(field_),
        "smooth_fit": smooth_fit_check(curve, problem.nozzle),
        "fb_height_at_exit": curve.height_at(domain.R - 1.0),
        "wall_deviation": domain.wall_deviation(),
        "k_mu": datum.k_mu if datum is not None else float("nan"),
    }
    gap = abs(diagnostics["fb_height_at_exit"] - down.H)
    diagnostics["height_mismatch"] = gap
    if not diagnostics["monotonicity"]["monotone"]:
        add_message("warning", f"discrete d psi/d x1 dips to {diagnostics['monotonicity']['min_dx1_psi']:.3g}")
    solution = JetSolution(
        field=field_, curve=curve, lam=lam, mu=domain.mu, R=domain.R, fit=fit, stages=stages,
        converged=converged and field_.converged, mach=mach, downstream=down, datum=datum, diagnostics=diagnostics,
    )
    logger.info("jet solve: Lambda=%.8g, M=%.4g, accepted=%s", lam, mach["mach_ratio"], solution.accepted)
    return solution


# =========================
# Critical pressure
# =========================
PROBE_COLUMNS = ["pbar", "mach", "passed", "lam", "H", "failure"]


def _evaluate_pressure(make_problem: Callable, pbar: float, epsilon: float) -> dict:
    """Run one upstream pressure; any solver failure counts as not subsonic-solvable."""
    try:
        problem = make_problem(pbar)
        solution = solve_jet(problem)
        mach = solution.mach["mach_ratio"]
        passed = bool(solution.converged and solution.fit.fitted and mach <= 1.0 - epsilon)
        return {"pbar": pbar, "mach": mach, "passed": passed, "lam": solution.lam,
                "H": solution.downstream.H, "failure": "" if solution.converged else "not-converged"}
    except SubjetError as exc:
        logger.info("pressure %.6g failed: %s", pbar, exc)
        return {"pbar": pbar, "mach": float("nan"), "passed": False, "lam": float("nan"),
                "H": float("nan"), "failure": type(exc).__name__}


def _mach_monotone(probes: pd.DataFrame) -> bool:
    """𝔐 nondecreasing as the upstream pressure decreases, over finite samples."""
    finite = probes[np.isfinite(probes["mach"])].sort_values("pbar", ascending=False)
    values = finite["mach"].to_numpy()
    return bool(np.all(np.diff(values) >= -1e-12))


def pressure_sweep(make_problem: Callable, pressures, epsilon: float, threads: int = 1) -> pd.DataFrame:
    """Independent solves at each pressure; optionally dispatched on a thread pool."""
    pressures = [float(p) for p in pressures]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda p: _evaluate_pressure(make_problem, p, epsilon), pressures))
    else:
        rows = [_evaluate_pressure(make_problem, p, epsilon) for p in pressures]
    table = pd.DataFrame(rows, columns=PROBE_COLUMNS)
    if not _mach_monotone(table):
        add_message("warning", "Mach ratio is not nondecreasing as the upstream pressure decreases")
    return table


def critical_pressure(
    make_problem: Callable,
    pbar_bracket: tuple,
    epsilon: float,
    pbar_star: float,
    width: float = None,
    resume: dict = None,
    state_path=None,
) -> CriticalReport:
    """
    Bisection on "fit and continuation succeed with 𝔐 <= 1 − ε".
    The predicate must hold at the upper pressure and fail at the lower one.
    """
    width = CRITICAL_WIDTH_REL * pbar_star if width is None else float(width)
    if resume is not None:
        lo, hi = float(resume["pbar_lo"]), float(resume["pbar_hi"])
        rows = resume["probes"].to_dict("records")
    else:
        lo, hi = (float(p) for p in pbar_bracket)
        if not (pbar_star < lo < hi):
            raise BracketError(f"pressure bracket ({lo:g}, {hi:g}) must satisfy P_* = {pbar_star:.6g} < lo < hi")
        rows = [_evaluate_pressure(make_problem, hi, epsilon), _evaluate_pressure(make_problem, lo, epsilon)]
        if state_path is not None:
            dump_bracket_state(state_path, lo, hi, epsilon, width, pd.DataFrame(rows, columns=PROBE_COLUMNS))
        if rows[1]["passed"]:
            raise BracketError(f"predicate holds at both ends ({lo:g}, {hi:g}); lower the bracket")
        if not rows[0]["passed"]:
            raise BracketError(f"predicate fails at the upper pressure {hi:g}; raise the bracket")

    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        row = _evaluate_pressure(make_problem, mid, epsilon)
        rows.append(row)
        if row["passed"]:
            hi = mid
        else:
            lo = mid
        logger.info("critical bracket: [%.8g, %.8g] (M=%.4g at %.8g)", lo, hi, row["mach"], mid)
        if state_path is not None:
            dump_bracket_state(state_path, lo, hi, epsilon, width, pd.DataFrame(rows, columns=PROBE_COLUMNS))

    probes = pd.DataFrame(rows, columns=PROBE_COLUMNS)
    monotone = _mach_monotone(probes)
    if not monotone:
        add_message("warning", "recorded Mach ratios are not monotone in the upstream pressure")
    return CriticalReport(lo, hi, 0.5 * (lo + hi), float(epsilon), width, probes, monotone)


def dump_bracket_state(path, lo, hi, epsilon, width, probes: pd.DataFrame) -> Path:
    lines = [
        FORMAT_TAG,
        f"pbar_lo = {format_float(lo)}",
        f"pbar_hi = {format_float(hi)}",
        f"epsilon = {format_float(epsilon)}",
        f"width = {format_float(width)}",
        "probes",
        " ".join(PROBE_COLUMNS),
    ]
    for row in probes.itertuples(index=False):
        failure = row.failure or "-"
        lines.append(
            f"{format_float(row.pbar)} {format_float(row.mach)} {int(bool(row.passed))} "
            f"{format_float(row.lam)} {format_float(row.H)} {failure}"
        )
    path = Path(path)
    write_files_atomically({path: "\n".join(lines) + "\n"})
    return path


def load_bracket_state(path) -> dict:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise BracketError(f"{path}: missing '{FORMAT_TAG}' header")
    state = {}
    k = 1
    while k < len(lines) and lines[k] != "probes":
        key, _, value = lines[k].partition("=")
        state[key.strip()] = float(value)
        k += 1
    rows = []
    for line in lines[k + 2:]:
        if not line.strip():
            continue
        pbar, mach, passed, lam, H, failure = line.split()
        rows.append({"pbar": float(pbar), "mach": float(mach), "passed": passed == "1", "lam": float(lam),
                     "H": float(H), "failure": "" if failure == "-" else failure})
    state["probes"] = pd.DataFrame(rows, columns=PROBE_COLUMNS)
    return state
