"""Nozzle wall, truncated computational domains and the boundary datum."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
from matplotlib.tri import Triangulation
from scipy.integrate import solve_bvp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.sparse import coo_matrix

from config import (
    B_MU_TOL,
    BVP_MAX_NODES,
    BVP_TOL,
    DEFAULT_NOZZLE_K,
    DEFAULT_S_EXPONENT,
    FORMAT_TAG,
    H_TILDE_FLOOR,
    H_TILDE_START,
    K_MU_FRACTION,
    K_MU_MARGIN,
    MIN_MESH_ANGLE_DEG,
    THETA_OUTLET_TOL,
)
from errors import ConfigurationError, DomainError, GeometryError
from helpers import format_float, write_files_atomically
from notifications import add_message

logger = logging.getLogger(__name__)

# boundary tags
INTERIOR = 0
AXIS = 1
WALL = 2
INLET = 3
TOP = 4
EXIT = 5

TAG_NAMES = {INTERIOR: "interior", AXIS: "axis", WALL: "wall", INLET: "inlet", TOP: "top", EXIT: "exit"}


# =========================
# Nozzle
# =========================
@dataclass(frozen=True)
class NozzleGeometry:
    """
    Upper nozzle wall x₁ = Θ(x₂) for x₂ in (1, Hbar), with Θ(1) = 0.
    `wall_height` is the inverse map x₁ -> x₂ on x₁ <= 0 when the wall is monotone.
    """

    kind: str
    hbar: float
    h_star: float
    theta: Optional[Callable]
    theta_prime: Optional[Callable]
    wall_height: Optional[Callable]
    theta_min: float = -math.inf
    tail_monotone: bool = True

    def b_mu(self, mu: float) -> float:
        """Wall height at the inlet x₁ = −μ."""
        if mu < 0.0:
            raise DomainError(f"mu must be non-negative, got {mu}")
        if self.kind == "strip" or mu == 0.0:
            return 1.0
        if -mu < self.theta_min:
            raise DomainError(f"mu={mu:g} beyond the sampled wall range (down to x1={self.theta_min:g})")
        if self.wall_height is None:
            raise GeometryError("wall is not monotone; the inlet height is not single-valued")
        return float(self.wall_height(-mu))

    def top(self, x1):
        """Upper boundary height of the truncated domain at x₁."""
        x1 = np.asarray(x1, dtype=float)
        if self.kind == "strip":
            return np.ones_like(x1)
        wall = self.wall_height(np.minimum(x1, 0.0))
        return np.where(x1 < 0.0, wall, 1.0)

    def outlet_slope(self) -> float:
        """dx₂/dx₁ of the wall at the outlet A = (0, 1)."""
        if self.theta_prime is None:
            return 0.0
        return float(1.0 / self.theta_prime(1.0))


def _mirrored_exponential(hbar: float, k: float, h_star: float) -> NozzleGeometry:
    if hbar <= 1.0 or k <= 0.0:
        raise GeometryError(f"mirrored-exponential needs Hbar > 1 and k > 0 (got Hbar={hbar}, k={k})")
    scale = hbar - 1.0

    def theta(x2):
        return np.log((hbar - np.asarray(x2, dtype=float)) / scale) / k

    def theta_prime(x2):
        return -1.0 / (k * (hbar - np.asarray(x2, dtype=float)))

    def wall_height(x1):
        return hbar - scale * np.exp(k * np.asarray(x1, dtype=float))

    return NozzleGeometry("mirrored-exponential", hbar, h_star, theta, theta_prime, wall_height)


def _inverse_wall(theta: Callable, lo: float, hi: float) -> Callable:
    """x₁ -> x₂ on a strictly decreasing sampled wall, solved to B_MU_TOL."""
    x1_lo, x1_hi = float(theta(hi)), float(theta(lo))

    def wall_height(x1):
        x1 = np.asarray(x1, dtype=float)
        out = np.empty(x1.shape)
        for k, value in np.ndenumerate(np.clip(x1, x1_lo, x1_hi)):
            if value >= x1_hi:
                out[k] = lo
            elif value <= x1_lo:
                out[k] = hi
            else:
                out[k] = brentq(lambda s: float(theta(s)) - value, lo, hi, xtol=1e-3 * B_MU_TOL)
        return out

    return wall_height


def build_nozzle(
    preset: str = None,
    samples: pd.DataFrame = None,
    hbar: float = 2.0,
    k: float = DEFAULT_NOZZLE_K,
    h_star: float = 1.0,
) -> NozzleGeometry:
    """
    Nozzle from a preset name or from (x2, x1) wall samples.

    Sampled walls are interpolated by monotone cubics. Θ(1) must vanish; a
    rising tail above h_star only produces a warning.
    """
    if not (1.0 <= h_star < max(hbar, 1.0 + 1e-12)) and preset != "strip":
        raise GeometryError(f"h_star must lie in [1, Hbar), got {h_star}")

    if preset == "mirrored-exponential":
        nozzle = _mirrored_exponential(hbar, k, h_star)
    elif preset == "strip":
        nozzle = NozzleGeometry("strip", 1.0, 1.0, None, None, None)
    elif preset is not None:
        raise GeometryError(f"unknown nozzle preset '{preset}'")
    else:
        if samples is None or len(samples) < 2:
            raise GeometryError("a sampled nozzle needs at least two (x2, x1) rows")
        x2 = samples.iloc[:, 0].to_numpy(dtype=float)
        x1 = samples.iloc[:, 1].to_numpy(dtype=float)
        if np.any(np.diff(x2) <= 0.0):
            raise GeometryError("nozzle samples must have strictly increasing x2")
        if x2[0] < 1.0 - 1e-12 or x2[-1] >= hbar:
            raise GeometryError(f"nozzle samples must lie in [1, {hbar:g}), got [{x2[0]:g}, {x2[-1]:g}]")
        theta = PchipInterpolator(x2, x1, extrapolate=True)
        if abs(float(theta(1.0))) > THETA_OUTLET_TOL:
            raise GeometryError(f"wall must pass through the outlet: Theta(1) = {float(theta(1.0)):.6g}")

        tail = x2 > h_star
        rising = np.diff(x1)[tail[1:]] > THETA_OUTLET_TOL
        tail_monotone = not np.any(rising)
        if not tail_monotone:
            add_message("warning", f"nozzle wall is not monotone above h_star={h_star:g}")

        wall_height = None
        if np.all(np.diff(x1) < 0.0):
            wall_height = _inverse_wall(theta, float(x2[0]), float(x2[-1]))
        nozzle = NozzleGeometry(
            "samples", hbar, h_star, theta, theta.derivative(), wall_height,
            theta_min=float(x1.min()), tail_monotone=tail_monotone,
        )

    logger.info("nozzle '%s' ready (Hbar=%.6g, h_star=%.6g)", nozzle.kind, nozzle.hbar, nozzle.h_star)
    return nozzle


# =========================
# Truncated domain
# =========================
def _p1_operators(nodes: np.ndarray, elements: np.ndarray):
    """Element areas, barycentric basis gradients (M, 3, 2) and lumped nodal areas."""
    p = nodes[elements]
    x, y = p[:, :, 0], p[:, :, 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * det
    grads = np.empty(elements.shape + (2,))
    grads[:, 0, 0] = y[:, 1] - y[:, 2]
    grads[:, 1, 0] = y[:, 2] - y[:, 0]
    grads[:, 2, 0] = y[:, 0] - y[:, 1]
    grads[:, 0, 1] = x[:, 2] - x[:, 1]
    grads[:, 1, 1] = x[:, 0] - x[:, 2]
    grads[:, 2, 1] = x[:, 1] - x[:, 0]
    grads /= det[:, None, None]
    lumped = np.bincount(elements.ravel(), weights=np.repeat(area / 3.0, 3), minlength=len(nodes))
    return area, grads, lumped


def _min_angles(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    angles = []
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.min(np.column_stack(angles), axis=1)


@dataclass
class TruncatedDomain:
    """Ω ∩ {−μ < x₁ < R} as a tagged P1 triangulation."""

    mu: float
    R: float
    h: float
    b_mu: float
    nodes: np.ndarray
    elements: np.ndarray
    tags: np.ndarray
    nozzle: Optional[NozzleGeometry] = None
    area: np.ndarray = field(init=False, repr=False)
    grads: np.ndarray = field(init=False, repr=False)
    lumped: np.ndarray = field(init=False, repr=False)
    _triangulation: Optional[Triangulation] = field(default=None, init=False, repr=False)
    cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int64)
        self.area, self.grads, self.lumped = _p1_operators(self.nodes, self.elements)
        if np.any(self.area <= 0.0):
            raise GeometryError("mesh contains inverted or degenerate triangles")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def boundary(self) -> np.ndarray:
        return self.tags != INTERIOR

    @property
    def triangulation(self) -> Triangulation:
        if self._triangulation is None:
            self._triangulation = Triangulation(self.nodes[:, 0], self.nodes[:, 1], self.elements)
        return self._triangulation

    @property
    def hbar(self) -> float:
        return self.nozzle.hbar if self.nozzle is not None else float(self.nodes[:, 1].max())

    def top(self, x1):
        if self.nozzle is not None:
            return self.nozzle.top(x1)
        return np.interp(x1, *self._top_samples())

    def _top_samples(self):
        upper = self.tags == WALL
        upper |= self.tags == TOP
        pts = self.nodes[upper]
        order = np.argsort(pts[:, 0])
        return pts[order, 0], pts[order, 1]

    def gradient(self, psi: np.ndarray) -> np.ndarray:
        """Elementwise constant gradient of a P1 field, shape (M, 2)."""
        return np.einsum("mk,mkd->md", psi[self.elements], self.grads)

    def stiffness(self):
        """P1 Laplacian stiffness matrix in CSC form."""
        if "stiffness" not in self.cache:
            local = np.einsum("mid,mjd->mij", self.grads, self.grads) * self.area[:, None, None]
            rows = np.repeat(self.elements, 3, axis=1).ravel()
            cols = np.tile(self.elements, (1, 3)).ravel()
            n = self.n_nodes
            self.cache["stiffness"] = coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
        return self.cache["stiffness"]

    def min_angle(self) -> float:
        return float(_min_angles(self.nodes, self.elements).min())

    def wall_deviation(self) -> float:
        """Largest vertical gap between wall edge midpoints and the wall curve."""
        if self.nozzle is None or self.nozzle.kind == "strip":
            return 0.0
        wall = np.flatnonzero(self.tags == WALL)
        pts = self.nodes[wall]
        order = np.argsort(pts[:, 0])
        pts = pts[order]
        if len(pts) < 2:
            return 0.0
        mid = 0.5 * (pts[1:] + pts[:-1])
        return float(np.max(np.abs(self.nozzle.top(mid[:, 0]) - mid[:, 1])))

    def wall_node_deviation(self) -> float:
        if self.nozzle is None or self.nozzle.kind == "strip":
            return 0.0
        pts = self.nodes[self.tags == WALL]
        if len(pts) == 0:
            return 0.0
        return float(np.max(np.abs(self.nozzle.top(pts[:, 0]) - pts[:, 1])))

    def column_nodes(self, x1: float, tol: float = 1e-12) -> np.ndarray:
        """Node indices on the mesh column x₁ = const, ordered by x₂."""
        idx = np.flatnonzero(np.abs(self.nodes[:, 0] - x1) <= tol * max(1.0, abs(x1)))
        return idx[np.argsort(self.nodes[idx, 1])]

    @property
    def columns(self) -> np.ndarray:
        return np.unique(self.nodes[:, 0])

    def tag_counts(self) -> dict:
        counts = np.bincount(self.tags, minlength=len(TAG_NAMES))
        return {TAG_NAMES[k]: int(v) for k, v in enumerate(counts)}


def _column_coords(mu: float, R: float, h: float) -> np.ndarray:
    n1 = int(math.ceil(mu / h - 1e-9)) if mu > 0.0 else 0
    n2 = max(int(math.ceil(R / h - 1e-9)), 1)
    left = np.linspace(-mu, 0.0, n1 + 1)[:-1] if n1 else np.empty(0)
    right = np.linspace(0.0, R, n2 + 1)
    return np.concatenate([left, right])


def _split_quads(index: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Split each grid quad along the diagonal with the larger minimum angle."""
    a = index[:-1, :-1].ravel()
    b = index[1:, :-1].ravel()
    c = index[1:, 1:].ravel()
    d = index[:-1, 1:].ravel()
    first = np.stack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    second = np.stack([np.column_stack([a, b, d]), np.column_stack([b, c, d])])
    q1 = np.minimum(_min_angles(nodes, first[0]), _min_angles(nodes, first[1]))
    q2 = np.minimum(_min_angles(nodes, second[0]), _min_angles(nodes, second[1]))
    use_first = (q1 >= q2)[:, None]
    lower = np.where(use_first, first[0], second[0])
    upper = np.where(use_first, first[1], second[1])
    return np.concatenate([lower, upper])


def build_domain(nozzle: NozzleGeometry, mu: float, R: float, h: float, grading: float = 0.0) -> TruncatedDomain:
    """
    Mapped structured mesh of the truncated domain.

    Columns are uniform on [−μ, 0] and [0, R] so the outlet is a node; rows
    follow x₂ = η·top(x₁). `grading` > 0 clusters rows toward the top.
    """
    if h <= 0.0:
        raise DomainError(f"mesh size must be positive, got {h}")
    if R <= 0.0:
        raise DomainError(f"R must be positive, got {R}")
    b_mu = nozzle.b_mu(mu)

    x1 = _column_coords(mu, R, h)
    ny = max(int(math.ceil(b_mu / h - 1e-9)), 1)
    eta = 1.0 - (1.0 - np.linspace(0.0, 1.0, ny + 1)) ** (1.0 + grading)
    top = nozzle.top(x1)
    if nozzle.kind != "strip":
        top[0] = b_mu
    nx = len(x1)

    X1 = np.repeat(x1[:, None], ny + 1, axis=1)
    X2 = top[:, None] * eta[None, :]
    nodes = np.column_stack([X1.ravel(), X2.ravel()])
    index = np.arange(nx * (ny + 1)).reshape(nx, ny + 1)

    tags = np.zeros(len(nodes), dtype=np.int64)
    tags[index[:, -1]] = np.where(x1 < 0.0, WALL, TOP)
    tags[index[0, :]] = INLET
    tags[index[-1, :]] = EXIT
    tags[index[0, -1]] = WALL if x1[0] < 0.0 else TOP
    tags[index[-1, -1]] = TOP
    tags[index[:, 0]] = AXIS

    elements = _split_quads(index, nodes)
    domain = TruncatedDomain(mu, R, h, b_mu, nodes, elements, tags, nozzle=nozzle)
    angle = domain.min_angle()
    if angle < MIN_MESH_ANGLE_DEG:
        raise GeometryError(f"mesh minimum angle {angle:.1f} deg is below {MIN_MESH_ANGLE_DEG:g} deg")
    logger.info(
        "domain mu=%.4g R=%.4g h=%.4g: %d nodes, %d elements, b_mu=%.10g, min angle %.1f deg",
        mu, R, h, domain.n_nodes, len(elements), b_mu, angle,
    )
    return domain


def export_mesh(domain: TruncatedDomain, path) -> Path:
    """Indexed node/element text with a tag column."""
    lines = [
        FORMAT_TAG,
        f"# mesh mu={format_float(domain.mu)} R={format_float(domain.R)} "
        f"h={format_float(domain.h)} b_mu={format_float(domain.b_mu)}",
        f"nodes {domain.n_nodes}",
    ]
    lines.extend(
        f"{k} {format_float(x)} {format_float(y)} {int(t)}"
        for k, ((x, y), t) in enumerate(zip(domain.nodes, domain.tags))
    )
    lines.append(f"elements {len(domain.elements)}")
    lines.extend(f"{k} {a} {b} {c}" for k, (a, b, c) in enumerate(domain.elements))
    path = Path(path)
    write_files_atomically({path: "\n".join(lines) + "\n"})
    return path


def _read_sections(path: Path):
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise GeometryError(f"{path}: missing '{FORMAT_TAG}' header")
    sections, meta, current = {}, {}, None
    for line in lines[1:]:
        if line.startswith("# mesh "):
            for item in line[len("# mesh "):].split():
                key, _, value = item.partition("=")
                meta[key] = float(value)
            continue
        if not line.strip() or line.startswith("#"):
            continue
        head = line.split()
        if len(head) == 2 and not head[0].lstrip("-").isdigit():
            current = head[0]
            sections[current] = []
            continue
        sections.setdefault(current, []).append(line)
    return meta, sections


def import_mesh(path, nozzle: NozzleGeometry = None) -> TruncatedDomain:
    path = Path(path)
    meta, sections = _read_sections(path)
    if "nodes" not in sections or "elements" not in sections:
        raise GeometryError(f"{path}: expected 'nodes' and 'elements' sections")
    node_rows = np.array([row.split() for row in sections["nodes"]], dtype=float)
    elem_rows = np.array([row.split() for row in sections["elements"]], dtype=np.int64)
    return TruncatedDomain(
        meta.get("mu", 0.0), meta.get("R", 0.0), meta.get("h", 0.0), meta.get("b_mu", 1.0),
        node_rows[:, 1:3], elem_rows[:, 1:4], node_rows[:, 3].astype(np.int64), nozzle=nozzle,
    )


# =========================
# Downstream profile
# =========================
@dataclass
class DownstreamProfile:
    """One-dimensional minimizer ψ† on [0, H̃] and its fit diagnostics."""

    x: np.ndarray
    v: np.ndarray
    slope: np.ndarray
    H_tilde: float
    Q: float
    residual: float
    interpolant: Callable = field(repr=False, default=None)

    def __call__(self, x2):
        x2 = np.asarray(x2, dtype=float)
        inside = np.clip(x2, 0.0, self.H_tilde)
        values = self.interpolant(inside)[0] if self.interpolant is not None else np.interp(inside, self.x, self.v)
        return np.where(x2 >= self.H_tilde, self.Q, np.clip(values, 0.0, self.Q))

    @property
    def outlet_slope(self) -> float:
        return float(self.slope[-1])


def _solve_profile(table, H_tilde: float):
    Q = table.Q

    def rhs(x, y):
        v, p = y
        t = p * p
        _, g, dzG = table.energy_density_terms(t, v)
        _, gdt, gdz = table.g_eps(t, v)
        return np.vstack([p, (dzG - gdz * t) / (g + 2.0 * gdt * t)])

    def bc(ya, yb):
        return np.array([ya[0], yb[0] - Q])

    x = np.linspace(0.0, H_tilde, 41)
    guess = np.vstack([Q * x / H_tilde, np.full_like(x, Q / H_tilde)])
    sol = solve_bvp(rhs, bc, x, guess, tol=BVP_TOL, max_nodes=BVP_MAX_NODES)
    return sol


def downstream_profile_1d(table, lam: float, H_tilde: float = None) -> DownstreamProfile:
    """
    ψ† minimizing ∫ G_eps(|v′|², v) with v(0)=0, v(H̃)=Q, solved as a two-point BVP.
    Without an explicit H̃ the height is halved from min(0.9, 0.9Q/Λ) until v′(H̃) > Λ.
    """
    _, _, tcQ = table.critical_quantities(table.Q)
    if not (0.0 < lam * lam < float(tcQ)):
        raise DomainError(f"Lambda={lam:.6g} outside (0, sqrt(t_c(Q)))")
    Q = table.Q
    heights = [float(H_tilde)] if H_tilde is not None else []
    if not heights:
        H = min(H_TILDE_START, H_TILDE_START * Q / lam)
        while H >= H_TILDE_FLOOR:
            heights.append(H)
            H *= 0.5

    for H in heights:
        sol = _solve_profile(table, H)
        if not sol.success:
            logger.debug("downstream BVP failed at H=%.4g: %s", H, sol.message)
            continue
        slope_end = float(sol.y[1, -1])
        if H_tilde is not None or slope_end > lam:
            residual = float(np.max(sol.rms_residuals)) if sol.rms_residuals.size else 0.0
            logger.info("downstream profile: H_tilde=%.6g, slope at top %.6g, residual %.2e", H, slope_end, residual)
            return DownstreamProfile(sol.x, sol.y[0], sol.y[1], H, Q, residual, interpolant=sol.sol)

    raise ConfigurationError(
        f"no admissible downstream height with slope above Lambda={lam:.6g} down to {H_TILDE_FLOOR:g}",
        key="numerics.h",
    )


# =========================
# Boundary datum
# =========================
@dataclass
class BoundaryDatum:
    """Dirichlet values ψ♯ on every boundary node of a domain."""

    domain: TruncatedDomain
    values: np.ndarray
    mask: np.ndarray
    Q: float
    s: float = DEFAULT_S_EXPONENT
    b_mu: float = 1.0
    b_prime: float = 1.0
    k_mu: float = 0.0
    profile: Optional[DownstreamProfile] = None

    @classmethod
    def from_function(cls, domain: TruncatedDomain, fn: Callable, Q: float):
        """Dirichlet data sampled from fn(x1, x2) on the boundary nodes."""
        mask = domain.boundary.copy()
        values = np.zeros(domain.n_nodes)
        pts = domain.nodes[mask]
        values[mask] = fn(pts[:, 0], pts[:, 1])
        return cls(domain, values, mask, float(Q), b_mu=domain.b_mu)

    def on(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.domain.tags == tag)


def boundary_datum(
    domain: TruncatedDomain,
    table,
    lam: float,
    s: float = DEFAULT_S_EXPONENT,
    k_mu: float = None,
    profile: DownstreamProfile = None,
) -> BoundaryDatum:
    """Inlet power law, axis 0, wall and top Q, exit min(ψ†, Q)."""
    if not (0.5 < s < 1.0):
        raise DomainError(f"inlet exponent s must lie in (1/2, 1), got {s}")
    Q = table.Q
    b_mu = domain.b_mu
    if k_mu is None:
        k_mu = min(K_MU_FRACTION * (domain.hbar - 1.0), b_mu - 1.0 - K_MU_MARGIN)
        add_message("info", f"k_mu heuristic in use: k_mu={k_mu:.6g}")
    if k_mu <= 0.0:
        raise DomainError(f"inlet transition width k_mu={k_mu:.3g} is not positive (b_mu={b_mu:.10g})")
    b_prime = b_mu - k_mu
    if profile is None:
        profile = downstream_profile_1d(table, lam)

    tags = domain.tags
    x2 = domain.nodes[:, 1]
    values = np.zeros(domain.n_nodes)
    mask = domain.boundary.copy()

    inlet = tags == INLET
    ramp = np.clip((x2[inlet] - b_prime) / k_mu, 0.0, 1.0)
    values[inlet] = np.minimum(Q * ramp ** (1.0 + s), Q)
    exit_ = tags == EXIT
    values[exit_] = np.minimum(profile(x2[exit_]), Q)
    values[(tags == WALL) | (tags == TOP)] = Q
    values[tags == AXIS] = 0.0

    return BoundaryDatum(domain, values, mask, Q, s=s, b_mu=b_mu, b_prime=b_prime, k_mu=k_mu, profile=profile)

