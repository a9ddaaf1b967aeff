"""Physical fields recovered from ψ, conservation diagnostics and text export."""

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from matplotlib.tri import LinearTriInterpolator
from scipy.integrate import trapezoid

from config import FB_OFFSET_FRACTION, FB_SAMPLE_FRACTION, FLOAT_FMT, FORMAT_TAG
from errors import ExportError, SonicExceededError
from geometry import INTERIOR
from helpers import format_float, station_filename, write_files_atomically
from solver import deep_interior, nodal_average, nodal_gradient

logger = logging.getLogger(__name__)

FIELD_COLUMNS = ["x1", "x2", "psi", "rho", "u1", "u2", "P", "M", "omega"]
PROFILE_COLUMNS = ["x2", "psi", "rho", "u1", "u2", "P", "M"]

# summary.txt keys, in output order
SUMMARY_KEYS = [
    "Q",
    "lambda",
    "P_down",
    "H_down",
    "mach_ratio",
    "epsilon",
    "accepted",
    "converged",
    "mu",
    "R",
    "h",
    "outlet_gap",
    "fit_probes",
    "el_residual_max",
    "el_residual_l2",
    "fb_condition_median",
    "fb_pressure_max_rel",
    "bernoulli_residual_max",
    "entropy_residual_max",
    "continuity_l2",
    "flux_rel_error",
    "height_mismatch",
    "smooth_fit_mismatch",
    "min_dx1_psi",
]


@dataclass
class PhysicalFields:
    """Nodal ρ, u₁, u₂, P, M, ω; `dead` marks nodes surrounded by the coincidence set."""

    rho: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    P: np.ndarray
    M: np.ndarray
    omega: np.ndarray
    dead: np.ndarray

    def to_frame(self, domain, psi) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "x1": domain.nodes[:, 0],
                "x2": domain.nodes[:, 1],
                "psi": psi,
                "rho": self.rho,
                "u1": self.u1,
                "u2": self.u2,
                "P": self.P,
                "M": self.M,
                "omega": self.omega,
            },
            columns=FIELD_COLUMNS,
        )


def _dead_nodes(domain, coincidence: np.ndarray) -> np.ndarray:
    """Nodes whose every neighbouring element lies in the coincidence set."""
    live = ~np.all(coincidence[domain.elements], axis=1)
    touched = np.zeros(domain.n_nodes, dtype=bool)
    touched[domain.elements[live].ravel()] = True
    return ~touched


def recover_fields(field, table) -> PhysicalFields:
    """
    State on each element from its constant ∇ψ and centroid ψ, then area-weighted
    nodal averages: ρ = 1/g(|∇ψ|², ψ), u = g·(∂₂ψ, −∂₁ψ), P from S(ψ).
    M = |u|/c and ω = ∂₁u₂ − ∂₂u₁ are taken from the nodal values.
    """
    domain = field.domain
    psi = field.psi
    gm = table.gamma
    grad = domain.gradient(psi)
    t = np.sum(grad * grad, axis=1)
    z = psi[domain.elements].mean(axis=1)
    try:
        g = table.invert_density(t, z)
    except SonicExceededError as exc:
        k = int(np.argmax(np.isclose(t, exc.t) & np.isclose(z, exc.z)))
        centroid = domain.nodes[domain.elements[k]].mean(axis=0)
        raise SonicExceededError(
            f"{exc} in element {k} ({centroid[0]:.6g}, {centroid[1]:.6g})",
            t=exc.t,
            z=exc.z,
            location=tuple(centroid),
        ) from exc

    rho = nodal_average(domain, 1.0 / g)
    u1 = nodal_average(domain, g * grad[:, 1])
    u2 = nodal_average(domain, -g * grad[:, 0])
    P = nodal_average(domain, (gm - 1.0) * table.entropy(z) / (gm * g**gm))
    speed = np.hypot(u1, u2)
    dead = _dead_nodes(domain, field.coincidence)
    M = np.where(dead, 0.0, speed / np.sqrt(gm * P / rho))
    omega = nodal_gradient(domain, u2)[:, 0] - nodal_gradient(domain, u1)[:, 1]
    logger.info("recovered fields: rho in [%.6g, %.6g], max M=%.4g", rho.min(), rho.max(), M.max())
    return PhysicalFields(rho, u1, u2, P, M, omega, dead)


def transport_residuals(fields: PhysicalFields, table, psi) -> dict:
    """Nodewise |B − B(ψ)| and |S − S(ψ)| with B, S rebuilt from the nodal averages of (ρ, u, P)."""
    gm = table.gamma
    B_point = 0.5 * (fields.u1**2 + fields.u2**2) + gm * fields.P / ((gm - 1.0) * fields.rho)
    S_point = gm * fields.P / ((gm - 1.0) * fields.rho**gm)
    bern = np.abs(B_point - table.bernoulli(psi))
    ent = np.abs(S_point - table.entropy(psi))
    return {
        "bernoulli_max": float(bern.max()),
        "bernoulli_l2": float(np.sqrt(np.mean(bern**2))),
        "entropy_max": float(ent.max()),
        "entropy_l2": float(np.sqrt(np.mean(ent**2))),
        "bernoulli": bern,
        "entropy": ent,
    }


def vorticity_consistency(fields: PhysicalFields, table, field) -> dict:
    """Discrete ω against −ρB′(ψ) + ρ^γ S′(ψ)/γ on deep interior fluid nodes."""
    domain = field.domain
    Bp, Sp = table.bs_derivatives(field.psi)
    expected = -fields.rho * Bp + fields.rho**table.gamma * Sp / table.gamma
    mask = deep_interior(domain) & ~fields.dead & ~field.coincidence
    if not np.any(mask):
        return {"count": 0, "max_abs": float("nan"), "rel": float("nan")}
    diff = np.abs(fields.omega[mask] - expected[mask])
    scale = max(float(np.max(np.abs(expected[mask]))), np.finfo(float).tiny)
    return {"count": int(mask.sum()), "max_abs": float(diff.max()), "rel": float(diff.max() / scale)}


def vertical_velocity_check(fields: PhysicalFields, domain, scale: float = 1.0) -> dict:
    """Largest interior u₂; the jet should turn downward everywhere."""
    interior = (domain.tags == INTERIOR) & ~fields.dead
    value = float(fields.u2[interior].max()) if np.any(interior) else 0.0
    return {"max_u2": value, "passed": bool(value <= 1e-6 * scale)}


def continuity_residual(fields: PhysicalFields, field) -> dict:
    """L² norm of the elementwise divergence of the nodal mass flux (ρu₁, ρu₂)."""
    domain = field.domain
    m1 = fields.rho * fields.u1
    m2 = fields.rho * fields.u2
    div = domain.gradient(m1)[:, 0] + domain.gradient(m2)[:, 1]
    live = ~np.all(field.coincidence[domain.elements], axis=1)
    area = domain.area[live]
    l2 = float(np.sqrt(np.sum(div[live] ** 2 * area))) if np.any(live) else 0.0
    return {"l2": l2, "max": float(np.max(np.abs(div[live]))) if np.any(live) else 0.0}


def _section(domain, x1: float):
    top = float(domain.top(x1))
    n = int(np.ceil(top / (FB_SAMPLE_FRACTION * domain.h))) * 4 + 1
    return np.linspace(0.0, top, n)


def section_profile(field, fields: PhysicalFields, x1: float) -> pd.DataFrame:
    """Fields interpolated along the vertical line x₁ = const."""
    domain = field.domain
    x2 = _section(domain, x1)
    x1s = np.full_like(x2, float(x1))
    tri = domain.triangulation
    data = {"x2": x2}
    sources = {"psi": field.psi, "rho": fields.rho, "u1": fields.u1, "u2": fields.u2, "P": fields.P, "M": fields.M}
    keep = np.ones_like(x2, dtype=bool)
    for name, values in sources.items():
        sampled = LinearTriInterpolator(tri, values)(x1s, x2)
        keep &= ~np.ma.getmaskarray(sampled)
        data[name] = np.ma.getdata(sampled)
    return pd.DataFrame(data, columns=PROFILE_COLUMNS)[keep].reset_index(drop=True)


def cross_section_flux(field, fields: PhysicalFields, x1: float) -> dict:
    """∫ ρu₁ dx₂ across x₁ = const and the exact ψ(top) − ψ(bottom)."""
    profile = section_profile(field, fields, x1)
    flux = float(trapezoid(profile["rho"] * profile["u1"], profile["x2"]))
    jump = float(profile["psi"].iloc[-1] - profile["psi"].iloc[0])
    return {"x1": float(x1), "flux": flux, "psi_jump": jump, "rel_error": abs(flux - field.Q) / field.Q}


def pressure_on_boundary(field, fields: PhysicalFields, curve, P_down: float) -> dict:
    """Recovered P just inside the jet along Γ against the downstream pressure."""
    domain = field.domain
    points = curve.polyline()
    if points.empty:
        return {"count": 0, "median_rel": float("nan"), "max_rel": float("nan")}
    x1 = points["x1"].to_numpy()
    x2 = points["x2"].to_numpy() - FB_OFFSET_FRACTION * domain.h
    sampled = LinearTriInterpolator(domain.triangulation, fields.P)(x1, x2)
    keep = ~np.ma.getmaskarray(sampled)
    rel = np.abs(np.ma.getdata(sampled)[keep] - P_down) / P_down
    if rel.size == 0:
        return {"count": 0, "median_rel": float("nan"), "max_rel": float("nan")}
    return {"count": int(rel.size), "median_rel": float(np.median(rel)), "max_rel": float(rel.max())}


# =========================
# Export
# =========================
def table_text(frame: pd.DataFrame, comments=()) -> str:
    """Versioned space-separated table with 17 significant digits."""
    buffer = io.StringIO()
    buffer.write(FORMAT_TAG + "\n")
    for line in comments:
        buffer.write(f"# {line}\n")
    frame.to_csv(buffer, sep=" ", index=False, float_format=FLOAT_FMT, lineterminator="\n")
    return buffer.getvalue()


def summary_text(values: dict) -> str:
    lines = [FORMAT_TAG]
    for key in SUMMARY_KEYS:
        value = values.get(key, float("nan"))
        if isinstance(value, (bool, np.bool_)):
            text = "true" if value else "false"
        elif isinstance(value, (int, np.integer)):
            text = str(int(value))
        else:
            text = format_float(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def solution_summary(solution, fields: PhysicalFields, table) -> dict:
    """Flatten a jet solution and its field diagnostics into the summary record."""
    field = solution.field
    domain = field.domain
    diag = solution.diagnostics
    transport = transport_residuals(fields, table, field.psi)
    continuity = continuity_residual(fields, field)
    flux = cross_section_flux(field, fields, domain.R - 1.0)
    pressure = pressure_on_boundary(field, fields, solution.curve, solution.downstream.P)
    return {
        "Q": table.Q,
        "lambda": solution.lam,
        "P_down": solution.downstream.P,
        "H_down": solution.downstream.H,
        "mach_ratio": solution.mach["mach_ratio"],
        "epsilon": table.epsilon,
        "accepted": solution.accepted,
        "converged": solution.converged,
        "mu": domain.mu,
        "R": domain.R,
        "h": domain.h,
        "outlet_gap": solution.fit.gap,
        "fit_probes": len(solution.fit.probes),
        "el_residual_max": diag.get("el_residual_max", float("nan")),
        "el_residual_l2": diag.get("el_residual_l2", float("nan")),
        "fb_condition_median": diag.get("fb_condition", {}).get("median", float("nan")),
        "fb_pressure_max_rel": pressure["max_rel"],
        "bernoulli_residual_max": transport["bernoulli_max"],
        "entropy_residual_max": transport["entropy_max"],
        "continuity_l2": continuity["l2"],
        "flux_rel_error": flux["rel_error"],
        "height_mismatch": diag.get("height_mismatch", float("nan")),
        "smooth_fit_mismatch": diag.get("smooth_fit", {}).get("mismatch", float("nan")),
        "min_dx1_psi": diag.get("monotonicity", {}).get("min_dx1_psi", float("nan")),
    }


def export(solution, table, out_dir, stations=None, fields: PhysicalFields = None) -> list:
    """
    Write field.txt, free_boundary.txt, one profile per station and summary.txt.
    All files are renamed into place together; nothing is left behind on failure.
    """
    out_dir = Path(out_dir)
    field = solution.field
    domain = field.domain
    fields = fields or recover_fields(field, table)
    stations = [domain.R - 1.0] if stations is None else list(stations)

    frame = fields.to_frame(domain, field.psi)
    elements = pd.DataFrame(domain.elements, columns=["a", "b", "c"])
    field_text = table_text(frame, comments=[f"nodes {domain.n_nodes}"])
    field_text += f"# elements {len(elements)}\n"
    field_text += elements.to_csv(sep=" ", index=False, header=False, lineterminator="\n")

    payloads = {
        out_dir / "field.txt": field_text,
        out_dir / "free_boundary.txt": table_text(solution.curve.polyline()),
        out_dir / "summary.txt": summary_text(solution_summary(solution, fields, table)),
    }
    for x1 in sorted(stations):
        profile = section_profile(field, fields, x1)
        payloads[out_dir / station_filename(x1)] = table_text(profile, comments=[f"x1 = {format_float(x1)}"])

    try:
        written = write_files_atomically(payloads)
    except OSError as exc:
        raise ExportError(f"could not write results to {out_dir}: {exc}") from exc
    logger.info("exported %d files to %s", len(written), out_dir)
    return written


def write_table(frame: pd.DataFrame, path, comments=()) -> Path:
    path = Path(path)
    try:
        write_files_atomically({path: table_text(frame, comments)})
    except OSError as exc:
        raise ExportError(f"could not write {path}: {exc}") from exc
    return path


def import_field(path):
    """Read field.txt back into (node DataFrame, element array)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ExportError(f"{path}: missing '{FORMAT_TAG}' header")
    split = next(k for k, line in enumerate(lines) if line.startswith("# elements"))
    body = "\n".join(line for line in lines[1:split] if not line.startswith("#"))
    frame = pd.read_csv(io.StringIO(body), sep=" ", float_precision="round_trip")
    elements = np.array([row.split() for row in lines[split + 1:] if row.strip()], dtype=np.int64)
    return frame, elements.reshape(-1, 3)


def read_summary(path) -> dict:
    path = Path(path)
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values
