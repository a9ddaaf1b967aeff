"""Gas closure built from upstream profiles.

Bernoulli and entropy functions of the stream value, the subsonic density
inversion g, its truncation g_eps, the energy density G_eps and the
free-boundary weight Phi_eps.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import brentq

from config import (
    BAND_GAUSS_POINTS,
    CLOSURE_FORMAT_TAG,
    DENSITY_MAX_ITER,
    DENSITY_RTOL,
    ENDPOINT_SLOPE_TOL,
    EPSILON_MAX,
    EXTENSION_BLEND_FRACTION,
    FLUX_RTOL,
    GAUSS_POINTS,
    HEIGHT_PANELS,
    KAPPA_BAR,
    PROFILE_SAMPLES,
    TABLE_NODES,
)
from errors import (
    DomainError,
    InconsistentTableError,
    InvalidModelError,
    SonicExceededError,
)
from helpers import format_float, smoothstep, write_files_atomically
from notifications import add_message

logger = logging.getLogger(__name__)


# =========================
# Upstream data
# =========================
@dataclass(frozen=True)
class Profile:
    """A C¹ upstream profile on [0, Hbar] with its derivative."""

    name: str
    value: Callable
    derivative: Callable

    def __call__(self, x):
        return self.value(x)

    @classmethod
    def constant(cls, c: float, name: str = None):
        c = float(c)
        return cls(
            name or f"constant({c:g})",
            lambda x: np.full_like(np.asarray(x, dtype=float), c),
            lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        )

    @classmethod
    def from_samples(cls, x, y, name: str = "samples"):
        """Monotone cubic through sampled values; derivative from the same interpolant."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 1 or x.size < 2 or x.shape != y.shape:
            raise InvalidModelError(f"profile '{name}' needs two matching columns with at least 2 rows")
        if np.any(np.diff(x) <= 0):
            raise InvalidModelError(f"profile '{name}' abscissae must be strictly increasing")
        spline = PchipInterpolator(x, y, extrapolate=True)
        slope = spline.derivative()
        return cls(name, lambda s: spline(np.asarray(s, dtype=float)), lambda s: slope(np.asarray(s, dtype=float)))


def _lipschitz_seminorm(fn: Callable, hbar: float) -> float:
    x = np.linspace(0.0, hbar, PROFILE_SAMPLES)
    values = np.asarray(fn(x), dtype=float)
    return float(np.max(np.abs(np.diff(values)) / np.diff(x)))


@dataclass(frozen=True)
class GasModel:
    """
    Upstream state of the nozzle flow.
    Q, kappa0 (Lip of u'), kappa1 (Lip of rho') are derived on construction.
    """

    gamma: float
    pbar: float
    rho_bar: Profile
    u_bar: Profile
    hbar: float
    Q: float = field(init=False)
    kappa0: float = field(init=False)
    kappa1: float = field(init=False)
    pbar_star: float = field(init=False)

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 1.0:
            raise InvalidModelError(f"gamma must exceed 1, got {self.gamma}")
        if not np.isfinite(self.hbar) or self.hbar <= 0.0:
            raise InvalidModelError(f"Hbar must be positive, got {self.hbar}")
        if not np.isfinite(self.pbar) or self.pbar <= 0.0:
            raise InvalidModelError(f"upstream pressure must be positive, got {self.pbar}")

        x = np.linspace(0.0, self.hbar, PROFILE_SAMPLES)
        rho = np.asarray(self.rho_bar(x), dtype=float)
        u = np.asarray(self.u_bar(x), dtype=float)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(u))):
            raise InvalidModelError("upstream profiles contain non-finite samples")
        if rho.min() <= 0.0 or u.min() <= 0.0:
            raise InvalidModelError(
                f"upstream profiles must stay positive (min rho={rho.min():.6g}, min u={u.min():.6g})"
            )

        pbar_star = float(np.max(rho * u * u) / self.gamma)
        if self.pbar <= pbar_star:
            raise InvalidModelError(
                f"upstream pressure {self.pbar:.6g} is not above the subsonic threshold {pbar_star:.6g}"
            )

        object.__setattr__(self, "pbar_star", pbar_star)
        object.__setattr__(self, "Q", mass_flux(self))
        object.__setattr__(self, "kappa0", _lipschitz_seminorm(self.u_bar.derivative, self.hbar))
        object.__setattr__(self, "kappa1", _lipschitz_seminorm(self.rho_bar.derivative, self.hbar))
        self._report_endpoint_conditions()

    def _report_endpoint_conditions(self):
        ends = np.array([0.0, self.hbar])
        drho = np.asarray(self.rho_bar.derivative(ends), dtype=float)
        du = np.asarray(self.u_bar.derivative(ends), dtype=float)
        if np.any(np.abs(drho) > ENDPOINT_SLOPE_TOL):
            add_message("warning", f"rho' does not vanish at the profile ends ({drho[0]:.3g}, {drho[1]:.3g})")
        if abs(du[0]) > ENDPOINT_SLOPE_TOL:
            add_message("warning", f"u'(0) = {du[0]:.3g} is not zero; the extension below the axis is only C0")
        if du[1] < -ENDPOINT_SLOPE_TOL:
            add_message("warning", f"u'(Hbar) = {du[1]:.3g} is negative; the extension above Hbar is clipped")

    def flux_density(self, x):
        return np.asarray(self.rho_bar(x), dtype=float) * np.asarray(self.u_bar(x), dtype=float)

    def condition_report(self, kappa_bar: float = KAPPA_BAR) -> dict:
        """P̄·‖ρ̄′‖ in the C^{0,1} norm against a threshold; diagnostic only."""
        x = np.linspace(0.0, self.hbar, PROFILE_SAMPLES)
        drho = np.asarray(self.rho_bar.derivative(x), dtype=float)
        norm = float(np.max(np.abs(drho))) + self.kappa1
        value = self.pbar * norm
        return {
            "pbar_rho_prime_norm": value,
            "kappa_bar": float(kappa_bar),
            "condition_holds": bool(value <= kappa_bar),
            "isentropic": bool(norm == 0.0),
        }


def mass_flux(model: GasModel) -> float:
    """Q = ∫₀^Hbar ρ̄ū dx₂ by adaptive quadrature."""
    x = np.linspace(0.0, model.hbar, PROFILE_SAMPLES)
    if np.any(model.flux_density(x) <= 0.0):
        raise InvalidModelError("non-positive mass flux density in the upstream profiles")
    value, _ = quad(lambda s: float(model.flux_density(s)), 0.0, model.hbar, epsabs=0.0, epsrel=FLUX_RTOL, limit=200)
    return float(value)


def streamline_height(model: GasModel, z: float) -> float:
    """Height h with z = ∫₀^h ρ̄ū, for 0 <= z <= Q."""
    z = float(z)
    if not (0.0 <= z <= model.Q):
        raise DomainError(f"stream value {z:.6g} outside [0, {model.Q:.6g}]")
    if z == 0.0:
        return 0.0
    if z == model.Q:
        return float(model.hbar)

    def residual(h):
        value, _ = quad(lambda s: float(model.flux_density(s)), 0.0, h, epsabs=0.0, epsrel=FLUX_RTOL, limit=200)
        return value - z

    return float(brentq(residual, 0.0, model.hbar, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200))


# =========================
# Extended profiles
# =========================
@dataclass(frozen=True)
class ExtendedProfiles:
    """
    C¹ continuation of the upstream profiles to the real line.
    Below the axis both are frozen; above Hbar the density is frozen and the
    velocity keeps rising through a cubic blend of width `blend`.
    """

    model: GasModel
    blend: float

    @classmethod
    def from_model(cls, model: GasModel, fraction: float = EXTENSION_BLEND_FRACTION):
        return cls(model, fraction * model.hbar)

    @property
    def _top_slope(self) -> float:
        return max(float(self.model.u_bar.derivative(self.model.hbar)), 0.0)

    def rho(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.model.rho_bar(np.clip(x, 0.0, self.model.hbar)), dtype=float)

    def rho_prime(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= 0.0) & (x <= self.model.hbar)
        return np.where(inside, self.model.rho_bar.derivative(np.clip(x, 0.0, self.model.hbar)), 0.0)

    def u(self, x):
        x = np.asarray(x, dtype=float)
        hbar, w, a = self.model.hbar, self.blend, self._top_slope
        base = np.asarray(self.model.u_bar(np.clip(x, 0.0, hbar)), dtype=float)
        s = np.clip(x - hbar, 0.0, w)
        return base + a * (s - s * s / w + s**3 / (3.0 * w * w))

    def u_prime(self, x):
        x = np.asarray(x, dtype=float)
        hbar, w, a = self.model.hbar, self.blend, self._top_slope
        inside = (x >= 0.0) & (x <= hbar)
        s = np.clip(x - hbar, 0.0, w)
        above = np.where(x > hbar, a * (1.0 - s / w) ** 2, 0.0)
        return np.where(inside, self.model.u_bar.derivative(np.clip(x, 0.0, hbar)), above)

    def flux_above(self, s):
        """∫_Hbar^{Hbar+s} ρu for s >= 0, in closed form."""
        hbar, w, a = self.model.hbar, self.blend, self._top_slope
        rho_top = float(self.model.rho_bar(hbar))
        u_top = float(self.model.u_bar(hbar))
        r = min(s, w)
        blend = u_top * r + a * (r * r / 2.0 - r**3 / (3.0 * w) + r**4 / (12.0 * w * w))
        tail = (u_top + a * w / 3.0) * max(s - w, 0.0)
        return rho_top * (blend + tail)

    def height_outside(self, z: float) -> float:
        """Streamline height for stream values outside [0, Q]."""
        model = self.model
        if z < 0.0:
            return z / float(model.flux_density(0.0))
        excess = z - model.Q
        if excess <= 0.0:
            return float(model.hbar)
        upper = max(self.blend, 1.0)
        while self.flux_above(upper) < excess:
            upper *= 2.0
        return model.hbar + brentq(lambda s: self.flux_above(s) - excess, 0.0, upper, xtol=1e-15, rtol=1e-15)


def _gauss_rule(points: int):
    nodes, weights = np.polynomial.legendre.leggauss(points)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _heights_on_flux_axis(model: GasModel, z: np.ndarray) -> np.ndarray:
    """Vectorized streamline heights for z in [0, Q] via Gauss panels and Newton."""
    xi, wi = _gauss_rule(GAUSS_POINTS)
    edges = np.linspace(0.0, model.hbar, HEIGHT_PANELS + 1)
    width = np.diff(edges)
    pts = edges[:-1, None] + width[:, None] * xi[None, :]
    panel_flux = width * (model.flux_density(pts) @ wi)
    cumulative = np.concatenate([[0.0], np.cumsum(panel_flux)])

    def flux_to(x):
        k = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, HEIGHT_PANELS - 1)
        left = edges[k]
        span = x - left
        inner = model.flux_density(left[:, None] + span[:, None] * xi[None, :]) @ wi
        return cumulative[k] + span * inner

    target = np.clip(z, 0.0, cumulative[-1])
    idx = np.clip(np.searchsorted(cumulative, target, side="right") - 1, 0, HEIGHT_PANELS - 1)
    frac = (target - cumulative[idx]) / panel_flux[idx]
    h = edges[idx] + np.clip(frac, 0.0, 1.0) * width[idx]
    for _ in range(50):
        step = (flux_to(h) - target) / model.flux_density(h)
        h = np.clip(h - step, 0.0, model.hbar)
        if np.max(np.abs(step)) <= 1e-15 * max(model.hbar, 1.0):
            break
    h[z <= 0.0] = 0.0
    h[z >= model.Q] = model.hbar
    return h


def _bs_from_heights(gamma, pbar, rho, u, drho, du):
    """B, S and their z-derivatives from profile values at the streamline height."""
    c = gamma * pbar / (gamma - 1.0)
    B = 0.5 * u * u + c / rho
    S = c / rho**gamma
    Bp = du / rho - c * drho / (rho**3 * u)
    Sp = -gamma * c * drho / (rho ** (gamma + 2.0) * u)
    return B, S, Bp, Sp


# =========================
# Closure table
# =========================
class ClosureTable:
    """
    Tabulated closure in the stream value z.

    B, S are Hermite cubics through exact nodal values and slopes on a
    uniform grid over [-Q, 2Q]; B', S' are the derivatives of those cubics.
    g is inverted on demand. The table is immutable once built.
    """

    def __init__(self, gamma, epsilon, Q, pbar, z, h, B, S, Bp, Sp, model: GasModel = None):
        if not (0.0 < epsilon < EPSILON_MAX):
            raise DomainError(f"epsilon must lie in (0, {EPSILON_MAX}), got {epsilon}")
        self.gamma = float(gamma)
        self.epsilon = float(epsilon)
        self.Q = float(Q)
        self.pbar = float(pbar)
        self.model = model
        self.z_nodes = np.asarray(z, dtype=float)
        self.h_nodes = np.asarray(h, dtype=float)
        self.B_nodes = np.asarray(B, dtype=float)
        self.S_nodes = np.asarray(S, dtype=float)
        self.Bp_nodes = np.asarray(Bp, dtype=float)
        self.Sp_nodes = np.asarray(Sp, dtype=float)

        if np.any(np.diff(self.z_nodes) <= 0) or np.any(self.B_nodes <= 0) or np.any(self.S_nodes <= 0):
            raise InconsistentTableError("closure nodes must have increasing z and positive B, S")

        self._B = CubicHermiteSpline(self.z_nodes, self.B_nodes, self.Bp_nodes)
        self._S = CubicHermiteSpline(self.z_nodes, self.S_nodes, self.Sp_nodes)
        self._dB = self._B.derivative()
        self._dS = self._S.derivative()
        self.z_min = float(self.z_nodes[0])
        self.z_max = float(self.z_nodes[-1])
        self.isentropic = bool(np.all(self.Sp_nodes == 0.0))

        inside = (self.z_nodes >= 0.0) & (self.z_nodes <= self.Q)
        zi, hi = self.z_nodes[inside], self.h_nodes[inside]
        self.hbar = float(hi[-1])
        self._psi_bar = PchipInterpolator(hi, zi, extrapolate=False)

        dense = np.linspace(self.z_min, self.z_max, 4 * self.z_nodes.size)
        rho_c, rho_m, _ = self.critical_quantities(dense)
        self.g_upper = float(1.0 / np.min(rho_c))
        self.g_lower = float(1.0 / np.max(rho_m))
        rho_mQ = self.critical_quantities(self.Q)[1]
        self._energy_shift = (self.gamma - 1.0) / self.gamma * float(rho_mQ) * float(self.bernoulli(self.Q))
        self._gauss = _gauss_rule(BAND_GAUSS_POINTS)

    # ---- stream-value maps ----
    def _clamp(self, z):
        z = np.asarray(z, dtype=float)
        return np.clip(z, self.z_min, self.z_max), (z >= self.z_min) & (z <= self.z_max)

    def bernoulli(self, z):
        zc, _ = self._clamp(z)
        return self._B(zc)

    def entropy(self, z):
        zc, _ = self._clamp(z)
        return self._S(zc)

    def bs_derivatives(self, z):
        zc, inside = self._clamp(z)
        return np.where(inside, self._dB(zc), 0.0), np.where(inside, self._dS(zc), 0.0)

    def psi_bar(self, x2):
        """Upstream stream function: z with h(z) = x₂, equal to Q above Hbar."""
        x2 = np.asarray(x2, dtype=float)
        inside = np.clip(x2, 0.0, self.hbar)
        return np.where(x2 >= self.hbar, self.Q, np.where(x2 <= 0.0, 0.0, self._psi_bar(inside)))

    def streamline_height(self, z):
        return np.interp(np.asarray(z, dtype=float), self.z_nodes, self.h_nodes)

    # ---- critical quantities ----
    def critical_quantities(self, z):
        """(rho_c, rho_m, t_c) at z."""
        gm = self.gamma
        B, S = self.bernoulli(z), self.entropy(z)
        rho_c = (2.0 * B / ((gm + 1.0) * S)) ** (1.0 / (gm - 1.0))
        rho_m = (B / S) ** (1.0 / (gm - 1.0))
        tc = (gm - 1.0) * (2.0 * B / (gm + 1.0)) ** ((gm + 1.0) / (gm - 1.0)) * S ** (-2.0 / (gm - 1.0))
        return rho_c, rho_m, tc

    def _tc_log_slope(self, z, B, S):
        gm = self.gamma
        Bp, Sp = self.bs_derivatives(z)
        return (gm + 1.0) / (gm - 1.0) * Bp / B - 2.0 / (gm - 1.0) * Sp / S, Bp, Sp

    def momentum_sq(self, rho, z):
        """t = 2ρ²(B − ρ^{γ−1}S) for 0 < ρ <= rho_m(z)."""
        rho = np.asarray(rho, dtype=float)
        B, S = self.bernoulli(z), self.entropy(z)
        if np.any(rho <= 0.0):
            raise DomainError("density must be positive")
        t = 2.0 * rho * rho * (B - rho ** (self.gamma - 1.0) * S)
        rho_m = (B / S) ** (1.0 / (self.gamma - 1.0))
        if np.any(rho > rho_m * (1.0 + 1e-14)):
            raise DomainError("density above the maximum density gives a negative squared momentum")
        return np.maximum(t, 0.0)

    # ---- density inversion ----
    def _invert(self, t, B, S):
        gm = self.gamma
        rho_c = (2.0 * B / ((gm + 1.0) * S)) ** (1.0 / (gm - 1.0))
        rho = (B / S) ** (1.0 / (gm - 1.0))
        lo = rho_c.copy()
        hi = rho.copy()
        for _ in range(DENSITY_MAX_ITER):
            f = 2.0 * rho * rho * (B - rho ** (gm - 1.0) * S) - t
            df = 4.0 * rho * B - 2.0 * (gm + 1.0) * rho**gm * S
            # f is concave and decreasing on [rho_c, rho_m]
            hi = np.where(f <= 0.0, np.minimum(hi, rho), hi)
            lo = np.where(f > 0.0, np.maximum(lo, rho), lo)
            with np.errstate(divide="ignore", invalid="ignore"):
                candidate = rho - f / df
            bad = ~np.isfinite(candidate) | (candidate < lo) | (candidate > hi)
            new = np.where(bad, 0.5 * (lo + hi), candidate)
            done = np.abs(new - rho) <= DENSITY_RTOL * rho
            rho = new
            if np.all(done):
                break
        return rho

    def invert_density(self, t, z):
        """g(t, z) = 1/ρ on the subsonic branch; t must stay below t_c(z)."""
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        B, S = self.bernoulli(z), self.entropy(z)
        _, _, tc = self.critical_quantities(z)
        if np.any(t < 0.0):
            raise DomainError("squared momentum must be non-negative")
        if np.any(t >= tc):
            k = int(np.argmax(t >= tc))
            raise SonicExceededError(
                f"t={t.flat[k]:.6g} reaches the sonic bound {np.ravel(tc)[k]:.6g} at z={z.flat[k]:.6g}",
                t=float(t.flat[k]),
                z=float(z.flat[k]),
            )
        rho = self._invert(np.atleast_1d(t).astype(float), np.atleast_1d(B), np.atleast_1d(S))
        return (1.0 / rho).reshape(t.shape)[()] if t.shape else float(1.0 / rho[0])

    def _g_partials(self, t, z, B, S, Bp, Sp):
        """g, ∂_t g, ∂_z g for subsonic (t, z); arrays of matching shape."""
        gm = self.gamma
        rho = self._invert(t, B, S)
        g = 1.0 / rho
        dtau = 4.0 * rho * B - 2.0 * (gm + 1.0) * rho**gm * S
        dt = -g * g / dtau
        dz = -2.0 * dt * (Bp - g ** (1.0 - gm) * Sp) / (g * g)
        return g, dt, dz

    # ---- truncation ----
    def _weight(self, s):
        """Truncation weight ϖ_eps(s) and its s-derivative."""
        sigma = (s - 1.0) / self.epsilon
        step, slope, _ = smoothstep(2.0 * (sigma + 1.0))
        return 1.0 - step, -2.0 * slope / self.epsilon

    def _g_eps_flat(self, t, z):
        """Flat arrays in, (g_eps, ∂_t g_eps, ∂_z g_eps, g) out."""
        B, S = self.bernoulli(z), self.entropy(z)
        gm = self.gamma
        tc = (gm - 1.0) * (2.0 * B / (gm + 1.0)) ** ((gm + 1.0) / (gm - 1.0)) * S ** (-2.0 / (gm - 1.0))
        log_slope, Bp, Sp = self._tc_log_slope(z, B, S)
        s = t / tc
        w, ws = self._weight(s)
        gstar = self.g_upper

        g_eps = np.full(t.shape, gstar)
        dt = np.zeros(t.shape)
        dz = np.zeros(t.shape)
        g_full = np.full(t.shape, gstar)
        live = w > 0.0
        if np.any(live):
            g, gdt, gdz = self._g_partials(t[live], z[live], B[live], S[live], Bp[live], Sp[live])
            wl, wsl, sl = w[live], ws[live], s[live]
            g_eps[live] = g * wl + (1.0 - wl) * gstar
            dt[live] = gdt * wl + (g - gstar) * wsl / tc[live]
            dz[live] = gdz * wl + (gstar - g) * wsl * sl * log_slope[live]
            g_full[live] = g
        return g_eps, dt, dz, g_full

    def g_eps(self, t, z):
        """(g_eps, ∂_t g_eps, ∂_z g_eps) for t >= 0."""
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        if np.any(t < 0.0):
            raise DomainError("squared momentum must be non-negative")
        shape = t.shape
        g_eps, dt, dz, _ = self._g_eps_flat(t.ravel(), z.ravel())
        return g_eps.reshape(shape)[()], dt.reshape(shape)[()], dz.reshape(shape)[()]

    # ---- energy density ----
    def energy_density_terms(self, t, z):
        """
        G_eps, g_eps and ∂_z G_eps in one pass over flat (t, z) arrays.

        Below (1-eps)t_c the energy is closed form in ρ = 1/g; across the band
        it is continued by Gauss quadrature of g_eps, and it is linear beyond.
        """
        t = np.asarray(t, dtype=float).ravel()
        z = np.asarray(z, dtype=float).ravel()
        gm = self.gamma
        B, S = self.bernoulli(z), self.entropy(z)
        tc = (gm - 1.0) * (2.0 * B / (gm + 1.0)) ** ((gm + 1.0) / (gm - 1.0)) * S ** (-2.0 / (gm - 1.0))
        Bp, Sp = self.bs_derivatives(z)
        t1 = (1.0 - self.epsilon) * tc
        t2 = (1.0 - 0.5 * self.epsilon) * tc
        gstar = self.g_upper

        # closed-form part evaluated at min(t, t1)
        tb = np.minimum(t, t1)
        rho = self._invert(tb, B, S)
        G = 2.0 * B * rho - (gm + 1.0) / gm * S * rho**gm - self._energy_shift
        dzG = rho * Bp - rho**gm * Sp / gm

        # the weight is exactly 1 up to t1, so g_eps = 1/rho there
        g_eps = 1.0 / rho
        band = t > t1
        if np.any(band):
            g_eps[band] = self._g_eps_flat(t[band], z[band])[0]
            xi, wi = self._gauss
            lo = t1[band]
            top = np.minimum(t[band], t2[band])
            span = top - lo
            tau = lo[:, None] + span[:, None] * xi[None, :]
            zb = np.repeat(z[band][:, None], xi.size, axis=1)
            ge, _, gez, _ = self._g_eps_flat(tau.ravel(), zb.ravel())
            ge = ge.reshape(tau.shape)
            gez = gez.reshape(tau.shape)
            G[band] += 0.5 * span * (ge @ wi) + 0.5 * gstar * np.maximum(t[band] - t2[band], 0.0)
            dzG[band] += 0.5 * span * (gez @ wi)
        return G, g_eps, dzG

    def G_eps(self, t, z):
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        if np.any(t < 0.0):
            raise DomainError("squared momentum must be non-negative")
        G, _, _ = self.energy_density_terms(t, z)
        return G.reshape(t.shape)[()]

    def dzG_eps(self, t, z):
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        if np.any(t < 0.0):
            raise DomainError("squared momentum must be non-negative")
        _, _, dzG = self.energy_density_terms(t, z)
        return dzG.reshape(t.shape)[()]

    # ---- free-boundary weight ----
    def phi_eps(self, t, z):
        """Φ_eps = −G_eps + g_eps·t and its t-derivative ½g_eps + t∂_t g_eps."""
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        shape = t.shape
        tf, zf = t.ravel(), z.ravel()
        G, g_eps, _ = self.energy_density_terms(tf, zf)
        _, dt, _, _ = self._g_eps_flat(tf, zf)
        phi = -G + g_eps * tf
        dphi = 0.5 * g_eps + dt * tf
        return phi.reshape(shape)[()], dphi.reshape(shape)[()]

    def lambda_eps(self, lam: float) -> float:
        lam = float(lam)
        if lam < 0.0:
            raise DomainError(f"free-boundary momentum must be positive, got {lam}")
        if lam == 0.0:
            return 0.0
        phi, _ = self.phi_eps(lam * lam, self.Q)
        if phi <= 0.0:
            raise InconsistentTableError(f"Phi_eps({lam * lam:.6g}, Q) = {phi:.3g} is not positive")
        return float(np.sqrt(phi))

    # ---- free-boundary pressure ----
    def pressure_window(self):
        gm = self.gamma
        S = float(self.entropy(self.Q))
        rho_c, rho_m, _ = self.critical_quantities(self.Q)
        return (gm - 1.0) * S * rho_c**gm / gm, (gm - 1.0) * S * rho_m**gm / gm

    def momentum_on_fb(self, p_down: float) -> float:
        """Λ from the downstream pressure on the subsonic branch."""
        gm = self.gamma
        B, S = float(self.bernoulli(self.Q)), float(self.entropy(self.Q))
        rho_c, rho_m, _ = self.critical_quantities(self.Q)
        if p_down <= 0.0:
            raise DomainError(f"downstream pressure must be positive, got {p_down}")
        rho0 = (gm * p_down / ((gm - 1.0) * S)) ** (1.0 / gm)
        if rho0 <= rho_c:
            lo, hi = self.pressure_window()
            raise DomainError(
                f"pressure {p_down:.6g} lies on the supersonic branch; subsonic window is ({lo:.6g}, {hi:.6g}]"
            )
        if rho0 > rho_m * (1.0 + 1e-14):
            raise DomainError(f"pressure {p_down:.6g} exceeds the stagnation pressure")
        return float(rho0 * np.sqrt(max(2.0 * B - 2.0 * rho0 ** (gm - 1.0) * S, 0.0)))

    def pressure_from_fb(self, lam: float) -> float:
        gm = self.gamma
        S = float(self.entropy(self.Q))
        _, _, tc = self.critical_quantities(self.Q)
        if not (0.0 < lam * lam < tc):
            raise DomainError(f"Lambda^2 = {lam * lam:.6g} outside (0, t_c(Q) = {tc:.6g})")
        rho0 = 1.0 / self.invert_density(lam * lam, self.Q)
        return float((gm - 1.0) * S * rho0**gm / gm)

    # ---- sampled bounds ----
    def convexity_bounds(self, samples: int = 64) -> dict:
        """Sampled eigenvalue bounds of the p-Hessian of G_eps(|p|², z) and Φ_eps slope bounds."""
        z = np.linspace(0.0, self.Q, samples)
        _, _, tc = self.critical_quantities(z)
        frac = np.linspace(0.0, 2.0, samples)
        T = frac[None, :] * tc[:, None]
        Z = np.repeat(z[:, None], samples, axis=1)
        g_eps, dt, _ = self.g_eps(T, Z)
        _, dphi = self.phi_eps(T, Z)
        lower = np.minimum(g_eps, g_eps + 2.0 * T * dt)
        upper = np.maximum(g_eps, g_eps + 2.0 * T * dt)
        return {
            "b_lower": float(lower.min()),
            "b_upper": float(upper.max()),
            "phi_slope_min": float(dphi.min()),
            "phi_slope_max": float(dphi.max()),
            "g_lower": self.g_lower,
            "g_upper": self.g_upper,
        }


def build_closure(model: GasModel, epsilon: float, nodes: int = TABLE_NODES) -> ClosureTable:
    """Tabulate B, S and their slopes on a uniform grid over [-Q, 2Q]."""
    if not (0.0 < epsilon < EPSILON_MAX):
        raise DomainError(f"epsilon must lie in (0, {EPSILON_MAX}), got {epsilon}")
    m = max((int(nodes) - 1) // 3, 4)
    Q = model.Q
    z = -Q + Q * np.arange(3 * m + 1) / m
    z[m] = 0.0
    z[2 * m] = Q

    ext = ExtendedProfiles.from_model(model)
    h = np.empty_like(z)
    inner = (z >= 0.0) & (z <= Q)
    h[inner] = _heights_on_flux_axis(model, z[inner])
    for k in np.flatnonzero(~inner):
        h[k] = ext.height_outside(z[k])

    rho, u = ext.rho(h), ext.u(h)
    drho, du = ext.rho_prime(h), ext.u_prime(h)
    B, S, Bp, Sp = _bs_from_heights(model.gamma, model.pbar, rho, u, drho, du)
    Bp[z < 0.0] = 0.0
    Sp[z < 0.0] = 0.0
    Sp[z > Q] = 0.0

    table = ClosureTable(model.gamma, epsilon, Q, model.pbar, z, h, B, S, Bp, Sp, model=model)
    logger.info(
        "closure table built: %d nodes, Q=%.6g, g in [%.6g, %.6g], eps=%.3g",
        z.size, Q, table.g_lower, table.g_upper, epsilon,
    )
    return table


def bernoulli(table: ClosureTable, z):
    return table.bernoulli(z)


def entropy(table: ClosureTable, z):
    return table.entropy(z)


def bs_derivatives(table: ClosureTable, z):
    return table.bs_derivatives(z)


def critical_quantities(table: ClosureTable, z):
    return table.critical_quantities(z)


def momentum_sq(table: ClosureTable, rho, z):
    return table.momentum_sq(rho, z)


def invert_density(table: ClosureTable, t, z):
    return table.invert_density(t, z)


def g_eps(table: ClosureTable, t, z):
    return table.g_eps(t, z)


def G_eps(table: ClosureTable, t, z):
    return table.G_eps(t, z)


def dzG_eps(table: ClosureTable, t, z):
    return table.dzG_eps(t, z)


def phi_eps(table: ClosureTable, t, z):
    return table.phi_eps(t, z)[0]


def lambda_eps(table: ClosureTable, lam: float) -> float:
    return table.lambda_eps(lam)


def momentum_on_fb(table: ClosureTable, p_down: float) -> float:
    return table.momentum_on_fb(p_down)


def pressure_from_fb(table: ClosureTable, lam: float) -> float:
    return table.pressure_from_fb(lam)


# =========================
# Snapshot
# =========================
SNAPSHOT_COLUMNS = ["z", "h", "B", "S", "Bprime", "Sprime"]


def dump_closure(table: ClosureTable, path) -> Path:
    """Write the nodal table as plain text; the model itself is not stored."""
    lines = [
        CLOSURE_FORMAT_TAG,
        f"gamma = {format_float(table.gamma)}",
        f"epsilon = {format_float(table.epsilon)}",
        f"Q = {format_float(table.Q)}",
        f"pbar = {format_float(table.pbar)}",
        " ".join(SNAPSHOT_COLUMNS),
    ]
    data = np.column_stack(
        [table.z_nodes, table.h_nodes, table.B_nodes, table.S_nodes, table.Bp_nodes, table.Sp_nodes]
    )
    lines.extend(" ".join(format_float(v) for v in row) for row in data)
    path = Path(path)
    write_files_atomically({path: "\n".join(lines) + "\n"})
    return path


def load_closure(path) -> ClosureTable:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        header = [handle.readline().strip() for _ in range(6)]
    if header[0] != CLOSURE_FORMAT_TAG:
        raise InconsistentTableError(f"{path}: expected '{CLOSURE_FORMAT_TAG}', found '{header[0]}'")
    meta = {}
    for line in header[1:5]:
        key, _, value = line.partition("=")
        meta[key.strip()] = float(value)
    frame = pd.read_csv(path, sep=r"\s+", skiprows=6, header=None, names=SNAPSHOT_COLUMNS, dtype=float, float_precision="round_trip")
    return ClosureTable(
        meta["gamma"], meta["epsilon"], meta["Q"], meta["pbar"],
        frame["z"].to_numpy(), frame["h"].to_numpy(),
        frame["B"].to_numpy(), frame["S"].to_numpy(),
        frame["Bprime"].to_numpy(), frame["Sprime"].to_numpy(),
    )
