"""Discrete truncated energy, its minimizer, and free-boundary diagnostics."""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from matplotlib.tri import LinearTriInterpolator
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from config import (
    ARMIJO_C1,
    BACKTRACK_FACTOR,
    DELTA_CHI_CELLS,
    DOWNSTREAM_WINDOW,
    EL_THRESHOLD,
    ENERGY_RTOL,
    FB_OFFSET_FRACTION,
    FB_SAMPLE_FRACTION,
    GRAD_TOL,
    LBFGS_HISTORY,
    MAX_BACKTRACKS,
    MAX_ITERATIONS,
    MAX_PRINCIPLE_SLACK,
    OUTLET_ROW_CELLS,
    QUADRATURE_ORDER,
    TOL_Q_REL,
)
from errors import DomainError, FreeBoundaryShapeError, LineSearchError, NoFreeBoundaryError
from geometry import INTERIOR, BoundaryDatum, TruncatedDomain
from helpers import smoothstep
from notifications import add_message

logger = logging.getLogger(__name__)

# barycentric quadrature rules on the reference triangle
QUADRATURE_RULES = {
    1: (np.full((1, 3), 1.0 / 3.0), np.array([1.0])),
    2: (
        np.array([[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]]),
        np.full(3, 1.0 / 3.0),
    ),
}


@dataclass(frozen=True)
class EnergyParams:
    """Discretization and optimizer settings; delta_chi=None means 2·h·Λ."""

    delta_chi: Optional[float] = None
    quadrature_order: int = QUADRATURE_ORDER
    max_iterations: int = MAX_ITERATIONS
    armijo_c1: float = ARMIJO_C1
    backtrack: float = BACKTRACK_FACTOR
    max_backtracks: int = MAX_BACKTRACKS
    history: int = LBFGS_HISTORY
    grad_tol: float = GRAD_TOL
    tol_q_rel: float = TOL_Q_REL
    el_threshold: float = EL_THRESHOLD
    include_z_terms: bool = True
    delta_continuation: bool = True

    def __post_init__(self):
        if self.delta_chi is not None and self.delta_chi <= 0.0:
            raise DomainError(f"delta_chi must be positive, got {self.delta_chi}")
        if self.quadrature_order not in QUADRATURE_RULES:
            raise DomainError(f"quadrature order must be one of {sorted(QUADRATURE_RULES)}")
        if self.tol_q_rel < 10.0 * np.finfo(float).eps:
            raise DomainError(f"tol_Q must be at least 10 machine epsilons relative to Q, got {self.tol_q_rel}")

    def delta_for(self, h: float, lam: float) -> float:
        if self.delta_chi is not None:
            return float(self.delta_chi)
        return DELTA_CHI_CELLS * h * max(lam, 1e-12)


@dataclass
class StreamField:
    """Nodal stream function on a domain, with Dirichlet mask and solve history."""

    domain: TruncatedDomain
    psi: np.ndarray
    dirichlet: np.ndarray
    Q: float
    tol_q: float
    converged: bool = False
    iterations: int = 0
    energies: list = field(default_factory=list)  # last smoothing pass only
    pass_energies: list = field(default_factory=list)
    log: pd.DataFrame = field(default=None, repr=False)
    delta_chi: float = 0.0
    lam: float = 0.0

    @property
    def coincidence(self) -> np.ndarray:
        return self.psi >= self.Q - self.tol_q

    @property
    def fb_level(self) -> float:
        """Level of Γ: mid-height of the smoothed indicator, or Q − tol_Q for sharp fields."""
        return self.Q - max(self.tol_q, 0.5 * self.delta_chi)

    @property
    def free(self) -> np.ndarray:
        return ~self.dirichlet

    def copy(self) -> "StreamField":
        return replace(
            self,
            psi=self.psi.copy(),
            energies=list(self.energies),
            pass_energies=[list(p) for p in self.pass_energies],
        )

    def bounds_excess(self) -> float:
        """How far ψ leaves [0, Q]; zero inside."""
        return float(max(-self.psi.min(), self.psi.max() - self.Q, 0.0))

    def bounds_ok(self, slack: float = 0.0) -> bool:
        return bool(self.bounds_excess() <= self.tol_q + slack * self.Q)


def initial_guess(datum: BoundaryDatum, table) -> np.ndarray:
    """min(Q, ψ̄(x₂)) on free nodes, ψ♯ on Dirichlet nodes."""
    psi = np.minimum(table.Q, table.psi_bar(datum.domain.nodes[:, 1]))
    psi[datum.mask] = datum.values[datum.mask]
    return psi


def make_field(datum: BoundaryDatum, table, params: EnergyParams = None, psi: np.ndarray = None) -> StreamField:
    params = params or EnergyParams()
    values = initial_guess(datum, table) if psi is None else np.array(psi, dtype=float)
    values[datum.mask] = datum.values[datum.mask]
    return StreamField(datum.domain, values, datum.mask.copy(), table.Q, params.tol_q_rel * table.Q)


# =========================
# Energy and gradient
# =========================
def _quadrature_state(domain: TruncatedDomain, psi: np.ndarray, table, order: int):
    bary, weights = QUADRATURE_RULES[order]
    grad = domain.gradient(psi)
    t = np.sum(grad * grad, axis=1)
    zq = psi[domain.elements] @ bary.T  # (M, nq)
    tq = np.repeat(t[:, None], len(weights), axis=1)
    G, g, dzG = table.energy_density_terms(tq.ravel(), zq.ravel())
    shape = zq.shape
    return grad, zq, G.reshape(shape), g.reshape(shape), dzG.reshape(shape), bary, weights


def _indicator(zq, Q, delta):
    value, slope, _ = smoothstep((Q - zq) / delta)
    return value, slope


def _as_array(field_or_psi):
    return field_or_psi.psi if isinstance(field_or_psi, StreamField) else np.asarray(field_or_psi, dtype=float)


def energy_and_gradient(domain, psi, table, lam_eps, params, delta, dirichlet=None, need_gradient=True):
    """
    J = Σ_e A_e Σ_q w_q [G_eps(|∇ψ|², ψ_q) + λ²·Hσ((Q − ψ_q)/δ)] and its exact nodal gradient.
    Dirichlet rows of the gradient are zero.
    """
    Q = table.Q
    grad, zq, G, g, dzG, bary, weights = _quadrature_state(domain, psi, table, params.quadrature_order)
    lam2 = lam_eps * lam_eps
    H, dH = _indicator(zq, Q, delta)
    J = float(np.sum(domain.area * ((G + lam2 * H) @ weights)))
    if not need_gradient:
        return J, None, g

    # ∂/∂ψ_k: g ∇ψ·∇φ_k + (∂_zG − λ²Hσ′/δ) φ_k(q)
    flux_weight = g @ weights
    stiff = np.einsum("md,mkd->mk", grad, domain.grads) * (domain.area * flux_weight)[:, None]
    source = -lam2 * dH / delta
    if params.include_z_terms:
        source = dzG + source
    load = ((source * weights[None, :]) @ bary) * domain.area[:, None]
    local = stiff + load
    gradient = np.bincount(domain.elements.ravel(), weights=local.ravel(), minlength=domain.n_nodes)
    if dirichlet is not None:
        gradient[dirichlet] = 0.0
    return J, gradient, g


def assemble_energy(field, table, lam_eps: float, params: EnergyParams = None, delta: float = None) -> float:
    params = params or EnergyParams()
    domain = field.domain
    psi = _as_array(field)
    delta = delta if delta is not None else _field_delta(field, params)
    J, _, _ = energy_and_gradient(domain, psi, table, lam_eps, params, delta, need_gradient=False)
    return J


def assemble_gradient(field, table, lam_eps: float, params: EnergyParams = None, delta: float = None) -> np.ndarray:
    params = params or EnergyParams()
    delta = delta if delta is not None else _field_delta(field, params)
    _, gradient, _ = energy_and_gradient(
        field.domain, _as_array(field), table, lam_eps, params, delta, dirichlet=field.dirichlet
    )
    return gradient


def _field_delta(field: StreamField, params: EnergyParams) -> float:
    if field.delta_chi > 0.0:
        return field.delta_chi
    return params.delta_for(field.domain.h, field.lam)


# =========================
# Optimizer
# =========================
def _preconditioner(domain: TruncatedDomain, free: np.ndarray):
    """LU factors of the free-free Laplacian block, cached per domain and mask."""
    key = ("precond", free.tobytes())
    if key not in domain.cache:
        K = domain.stiffness()
        idx = np.flatnonzero(free)
        domain.cache[key] = splu(K[idx][:, idx].tocsc())
    return domain.cache[key]


def _two_loop(gradient, s_hist, y_hist, solve, gamma):
    """L-BFGS direction −H·g with the scaled Laplacian inverse as initial matrix."""
    q = gradient.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        alpha = rho * np.dot(s, q)
        q -= alpha * y
        alphas.append((rho, alpha))
    r = gamma * solve(q)
    for (s, y), (rho, alpha) in zip(zip(s_hist, y_hist), reversed(alphas)):
        beta = rho * np.dot(y, r)
        r += (alpha - beta) * s
    return -r


def _stationarity(gradient, lumped, free):
    return float(np.max(np.abs(gradient[free]) / lumped[free])) if np.any(free) else 0.0


def _run_lbfgs(field: StreamField, table, lam_eps, params: EnergyParams, delta: float):
    domain = field.domain
    free = field.free
    lumped = domain.lumped
    psi = field.psi.copy()
    target = params.grad_tol * field.Q

    def evaluate(values):
        return energy_and_gradient(domain, values, table, lam_eps, params, delta, dirichlet=field.dirichlet)

    J, gradient, g = evaluate(psi)
    energies = [J]
    records = [(0, J, _stationarity(gradient, lumped, free), 0.0)]
    if records[0][2] <= target or not np.any(free):
        return psi, energies, records, True, 0

    lu = _preconditioner(domain, free)
    solve = lu.solve
    gamma = 1.0 / float(np.mean(g))
    s_hist, y_hist = [], []
    x = psi[free]
    gx = gradient[free]
    converged = False
    iteration = 0
    restarted = False

    while iteration < params.max_iterations:
        direction = _two_loop(gx, s_hist, y_hist, solve, gamma)
        slope = float(np.dot(gx, direction))
        if slope >= 0.0:
            s_hist.clear()
            y_hist.clear()
            direction = -gamma * solve(gx)
            slope = float(np.dot(gx, direction))

        step = 1.0
        accepted = False
        for _ in range(params.max_backtracks):
            trial = psi.copy()
            trial[free] = x + step * direction
            J_new, grad_new, g_new = evaluate(trial)
            gn = grad_new[free]
            if J_new <= J + params.armijo_c1 * step * slope:
                accepted = True
            elif J_new <= J and J - J_new <= ENERGY_RTOL * max(abs(J), 1.0):
                # roundoff regime: approximate Wolfe on the directional derivative, never uphill
                accepted = float(np.dot(gn, direction)) <= 0.8 * abs(slope)
            if accepted:
                break
            step *= params.backtrack

        if not accepted:
            if not restarted and s_hist:
                s_hist.clear()
                y_hist.clear()
                restarted = True
                continue
            stuck = field.copy()
            stuck.psi = psi
            stuck.energies = energies
            raise LineSearchError(f"line search failed after {iteration} iterations (J={J:.12g})", field=stuck)

        restarted = False
        iteration += 1
        s = step * direction
        y = gn - gx
        sy = float(np.dot(s, y))
        if sy > 1e-300:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > params.history:
                s_hist.pop(0)
                y_hist.pop(0)
            Ky = solve(y)
            gamma = sy / float(np.dot(y, Ky))

        x = x + s
        psi[free] = x
        J, gx = J_new, gn
        energies.append(J)
        norm = float(np.max(np.abs(gn) / lumped[free]))
        records.append((iteration, J, norm, step))
        logger.debug("iter %d: J=%.15g, residual=%.3e, step=%.3g", iteration, J, norm, step)
        if norm <= target:
            converged = True
            break

    return psi, energies, records, converged, iteration


def minimize(
    datum: BoundaryDatum,
    table,
    lam_eps: float,
    params: EnergyParams = None,
    warm_start=None,
    lam: float = None,
) -> StreamField:
    """
    Minimize the discrete energy over fields with ψ = ψ♯ on the boundary.

    `lam` (Λ) only sets the default smoothing width 2·h·Λ; when the width is
    derived that way a second pass runs at half the width.
    """
    params = params or EnergyParams()
    lam = lam_eps if lam is None else lam
    start = warm_start.psi if isinstance(warm_start, StreamField) else warm_start
    field = make_field(datum, table, params, psi=start)
    field.lam = float(lam)

    deltas = [params.delta_for(datum.domain.h, lam)]
    if params.delta_chi is None and params.delta_continuation:
        deltas.append(0.5 * deltas[0])
    if isinstance(warm_start, StreamField) and warm_start.delta_chi > 0.0:
        deltas = [d for d in deltas if d <= warm_start.delta_chi] or deltas[-1:]

    # each pass minimizes a different functional, so energies are kept per pass
    passes, records, total = [], [], 0
    converged = False
    for k, delta in enumerate(deltas):
        psi, stage_energies, stage_records, converged, iterations = _run_lbfgs(field, table, lam_eps, params, delta)
        field.psi = psi
        field.delta_chi = delta
        passes.append(stage_energies)
        records.extend((k, total + it, J, r, st) for it, J, r, st in stage_records)
        total += iterations

    field.pass_energies = passes
    field.energies = list(passes[-1])
    field.iterations = total
    field.converged = converged
    field.log = pd.DataFrame(records, columns=["pass", "iteration", "J", "grad_norm", "step"])
    if not converged:
        logger.warning("minimizer stopped at the iteration cap (%d) without converging", params.max_iterations)
    if not field.bounds_ok(MAX_PRINCIPLE_SLACK):
        add_message(
            "warning",
            f"maximum principle excursion of {field.bounds_excess():.3e} outside [0, {field.Q:.10g}]",
        )
    logger.info("minimize: %d iterations, converged=%s, J=%.12g", total, converged, field.energies[-1])
    return field


# =========================
# Diagnostics
# =========================
def nodal_gradient(domain: TruncatedDomain, psi: np.ndarray) -> np.ndarray:
    """Area-weighted average of element gradients at each node."""
    grad = domain.gradient(psi)
    return nodal_average(domain, grad)


def nodal_average(domain: TruncatedDomain, values: np.ndarray) -> np.ndarray:
    weights = np.repeat(domain.area, 3)
    idx = domain.elements.ravel()
    total = np.bincount(idx, weights=weights, minlength=domain.n_nodes)
    if values.ndim == 1:
        return np.bincount(idx, weights=np.repeat(values * domain.area, 3), minlength=domain.n_nodes) / total
    out = np.empty((domain.n_nodes, values.shape[1]))
    for d in range(values.shape[1]):
        out[:, d] = np.bincount(idx, weights=np.repeat(values[:, d] * domain.area, 3), minlength=domain.n_nodes) / total
    return out


def deep_interior(domain: TruncatedDomain) -> np.ndarray:
    """Interior nodes whose whole element patch avoids the boundary."""
    touches = np.zeros(domain.n_nodes, dtype=bool)
    bad = np.any(domain.tags[domain.elements] != INTERIOR, axis=1)
    touches[domain.elements[bad].ravel()] = True
    return (domain.tags == INTERIOR) & ~touches


def el_residual(field: StreamField, table, params: EnergyParams = None) -> dict:
    """
    Recovered strong residual ∇·(g_eps ∇ψ) − ∂_zG_eps on interior nodes with ψ < Q − 10δ,
    plus the weak (assembled) residual scaled by lumped areas.
    """
    params = params or EnergyParams()
    domain = field.domain
    psi = field.psi
    delta = _field_delta(field, params)

    grad_e = domain.gradient(psi)
    t_e = np.sum(grad_e * grad_e, axis=1)
    z_e = psi[domain.elements].mean(axis=1)
    _, g_e, _ = table.energy_density_terms(t_e, z_e)
    flux_nodes = nodal_average(domain, g_e[:, None] * grad_e)
    div_e = np.einsum("mkd,mkd->m", flux_nodes[domain.elements], domain.grads)
    div_nodes = nodal_average(domain, div_e)

    grad_n = nodal_average(domain, grad_e)
    t_n = np.sum(grad_n * grad_n, axis=1)
    _, _, dzG_n = table.energy_density_terms(t_n, psi)
    if not params.include_z_terms:
        dzG_n = np.zeros_like(dzG_n)
    strong = div_nodes - dzG_n

    _, weak_grad, _ = energy_and_gradient(domain, psi, table, 0.0, params, delta, dirichlet=field.dirichlet)
    weak = -weak_grad / domain.lumped

    mask = deep_interior(domain) & (psi < field.Q - 10.0 * delta)
    values = strong[mask]
    area = domain.lumped[mask]
    flagged = np.flatnonzero(mask)[np.abs(values) > params.el_threshold]
    report = {
        "count": int(mask.sum()),
        "max": float(np.max(np.abs(values))) if values.size else 0.0,
        "l2": float(np.sqrt(np.sum(values**2 * area) / np.sum(area))) if values.size else 0.0,
        "weak_max": float(np.max(np.abs(weak[mask]))) if values.size else 0.0,
        "flagged": flagged,
        "nodes": np.flatnonzero(mask),
        "residual": values,
    }
    logger.info("EL residual: max=%.3e, l2=%.3e over %d nodes", report["max"], report["l2"], report["count"])
    return report


def monotonicity_check(field: StreamField) -> dict:
    """min ∂_{x₁}ψ over interior nodes against −1e−6·Q/h."""
    domain = field.domain
    grad = nodal_gradient(domain, field.psi)
    interior = domain.tags == INTERIOR
    value = float(grad[interior, 0].min()) if np.any(interior) else 0.0
    bound = -1e-6 * field.Q / domain.h
    return {"min_dx1_psi": value, "bound": bound, "monotone": bool(value >= bound)}


# =========================
# Free boundary
# =========================
@dataclass
class FreeBoundaryCurve:
    """Γ as an x₂-graph Υ near the outlet and an x₁-graph f downstream."""

    upsilon: pd.DataFrame
    downstream: pd.DataFrame
    H_est: float
    h: float

    def polyline(self) -> pd.DataFrame:
        """All samples ordered by x₂ descending, then x₁ ascending."""
        frame = pd.concat([self.upsilon[["x1", "x2"]], self.downstream[["x1", "x2"]]], ignore_index=True)
        frame = frame.drop_duplicates()
        return frame.sort_values(["x2", "x1"], ascending=[False, True], kind="mergesort").reset_index(drop=True)

    def height_at(self, x1: float) -> float:
        if self.downstream.empty:
            return float("nan")
        return float(np.interp(x1, self.downstream["x1"], self.downstream["x2"]))


def _sampler(field: StreamField):
    return LinearTriInterpolator(field.domain.triangulation, field.psi)


def _crossings(positions: np.ndarray, values: np.ndarray, level: float):
    """Positions where the sampled state flips between fluid and coincidence."""
    state = values >= level
    flips = np.flatnonzero(state[1:] != state[:-1])
    points = []
    for k in flips:
        v0, v1 = values[k], values[k + 1]
        frac = (level - v0) / (v1 - v0) if v1 != v0 else 0.0
        points.append((positions[k] + frac * (positions[k + 1] - positions[k]), bool(state[k + 1])))
    return state, points


def _line_samples(sampler, x1, x2):
    values = sampler(x1, x2)
    keep = ~np.ma.getmaskarray(values)
    return np.asarray(np.ma.getdata(values), dtype=float), keep


def _row_heights(domain: TruncatedDomain) -> np.ndarray:
    right = domain.column_nodes(domain.columns[-1])
    heights = domain.nodes[right, 1]
    return heights[(heights > 0.0) & (heights < 1.0)]


def extract_free_boundary(field: StreamField, params: EnergyParams = None) -> FreeBoundaryCurve:
    """
    Level {ψ = fb_level} sampled on horizontal lines (Υ) and on vertical columns
    downstream of the outlet (f). For a minimized field the level sits halfway
    through the smoothing layer; the minimizer only approaches Q asymptotically
    there. A line with more than one fluid/coincidence transition aborts.
    """
    domain = field.domain
    level = field.fb_level
    interior = domain.tags == INTERIOR
    if not np.any(field.psi[interior] >= level):
        raise NoFreeBoundaryError(
            "coincidence set is empty",
            diagnostics={
                "max_interior_psi": float(field.psi[interior].max()) if np.any(interior) else float("nan"),
                "Q": field.Q,
                "level": level,
                "lambda": field.lam,
            },
        )

    h = domain.h
    spacing = FB_SAMPLE_FRACTION * h
    sampler = _sampler(field)
    x1_line = np.linspace(-domain.mu, domain.R, int(np.ceil((domain.R + domain.mu) / spacing)) + 1)
    wall_gap = domain.top(x1_line)

    rows = []
    for c in _row_heights(domain):
        x2_line = np.full_like(x1_line, c)
        values, keep = _line_samples(sampler, x1_line, x2_line)
        keep &= (x1_line >= 0.0) | (wall_gap - c >= 0.5 * h)
        if keep.sum() < 2:
            continue
        state, points = _crossings(x1_line[keep], values[keep], level)
        if len(points) > 1:
            raise FreeBoundaryShapeError(
                f"level line is not single-valued at x2={c:.6g} ({len(points)} crossings)",
                height=float(c),
                crossings=[p for p, _ in points],
            )
        if len(points) == 1:
            rows.append((points[0][0], float(c)))
    upsilon = pd.DataFrame(rows, columns=["x1", "x2"]).sort_values("x2", ascending=False, kind="mergesort")

    columns = domain.columns[domain.columns >= 0.0]
    x2_col = np.linspace(0.0, 1.0, int(np.ceil(1.0 / spacing)) + 1)
    heights = []
    for x1 in columns:
        values, keep = _line_samples(sampler, np.full_like(x2_col, x1), x2_col)
        if keep.sum() < 2:
            continue
        _, points = _crossings(x2_col[keep], values[keep], level)
        entries = [p for p, into in points if into]
        if entries:
            heights.append((float(x1), entries[0]))
    downstream = pd.DataFrame(heights, columns=["x1", "x2"])
    if len(downstream) >= 2:
        slope = np.gradient(downstream["x2"].to_numpy(), downstream["x1"].to_numpy())
        downstream = downstream[np.abs(slope) <= 1.0].reset_index(drop=True)

    window = downstream[downstream["x1"] >= (1.0 - DOWNSTREAM_WINDOW) * domain.R]
    if not window.empty:
        H_est = float(window["x2"].min())
    elif not downstream.empty:
        H_est = float(downstream["x2"].min())
    elif not upsilon.empty:
        H_est = float(upsilon["x2"].min())
    else:
        H_est = float("nan")

    logger.info("free boundary: %d horizontal, %d downstream samples, H_est=%.6g", len(upsilon), len(downstream), H_est)
    return FreeBoundaryCurve(upsilon.reset_index(drop=True), downstream, H_est, h)


def _wetted_position(field: StreamField, sampler, c: float) -> float:
    """−μ plus the fluid-covered length of the line x₂ = c, weighted by the smoothed indicator."""
    domain = field.domain
    spacing = FB_SAMPLE_FRACTION * domain.h
    x1 = np.linspace(-domain.mu, domain.R, int(np.ceil((domain.R + domain.mu) / spacing)) + 1)
    values, keep = _line_samples(sampler, x1, np.full_like(x1, c))
    if field.delta_chi > 0.0:
        wet, _ = _indicator(values, field.Q, field.delta_chi)
    else:
        wet = (values < field.fb_level).astype(float)
    wet = np.where(keep, wet, 0.0)
    return -domain.mu + float(trapezoid(wet, x1))


def outlet_gap(field: StreamField) -> float:
    """
    Signed Υ(1): where Γ meets the outlet height, −μ if the coincidence set reaches
    the inlet and R if the fluid fills the line up to the exit column.

    On two lines a few cells below x₂ = 1 the detachment point is the fluid-covered
    length, so a single sharp crossing gives its abscissa and a field still inside
    the smoothing layer gives a value that moves with Λ. Υ(1) is extrapolated
    linearly from the two lines.
    """
    domain = field.domain
    upper, lower = (1.0 - cells * domain.h for cells in OUTLET_ROW_CELLS)
    if lower <= 0.0:
        raise DomainError(f"mesh size h={domain.h:g} is too coarse to place the outlet gap lines")
    sampler = _sampler(field)
    near = _wetted_position(field, sampler, upper)
    far = _wetted_position(field, sampler, lower)
    gap = near + (near - far) * (1.0 - upper) / (upper - lower)
    return float(np.clip(gap, -domain.mu, domain.R))


def fb_condition_check(field: StreamField, curve: FreeBoundaryCurve, table, lam: float) -> dict:
    """Relative deviation of |∇ψ| from Λ, sampled just inside the fluid along Γ."""
    domain = field.domain
    offset = FB_OFFSET_FRACTION * domain.h
    pts = []
    if not curve.upsilon.empty:
        pts.append(np.column_stack([curve.upsilon["x1"] - offset, curve.upsilon["x2"]]))
    if not curve.downstream.empty:
        pts.append(np.column_stack([curve.downstream["x1"], curve.downstream["x2"] - offset]))
    if not pts:
        return {"count": 0, "median": float("nan"), "max": float("nan"), "lambda": float(lam)}
    pts = np.vstack(pts)
    interp = _sampler(field)
    gx, gy = interp.gradient(pts[:, 0], pts[:, 1])
    keep = ~(np.ma.getmaskarray(gx) | np.ma.getmaskarray(gy))
    norm = np.hypot(np.ma.getdata(gx)[keep], np.ma.getdata(gy)[keep])
    deviation = np.abs(norm - lam) / lam
    return {
        "count": int(deviation.size),
        "median": float(np.median(deviation)) if deviation.size else float("nan"),
        "max": float(np.max(deviation)) if deviation.size else float("nan"),
        "lambda": float(lam),
    }


def smooth_fit_check(curve: FreeBoundaryCurve, nozzle) -> dict:
    """Slope of Γ at the outlet against the wall tangent there; reported only."""
    top = curve.upsilon.head(2)
    if len(top) < 2 or nozzle is None:
        return {"fb_slope": float("nan"), "wall_slope": float("nan"), "mismatch": float("nan")}
    dx1 = float(top["x1"].iloc[0] - top["x1"].iloc[1])
    dx2 = float(top["x2"].iloc[0] - top["x2"].iloc[1])
    wall_slope = nozzle.outlet_slope()
    fb_slope = dx2 / dx1 if dx1 != 0.0 else -np.inf
    return {
        "fb_slope": float(fb_slope),
        "wall_slope": float(wall_slope),
        "mismatch": float(abs(np.arctan(fb_slope) - np.arctan(wall_slope))),
    }
