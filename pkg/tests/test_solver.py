import numpy as np
import pytest

from config import MAX_PRINCIPLE_SLACK
from errors import DomainError, FreeBoundaryShapeError, NoFreeBoundaryError
from geometry import BoundaryDatum
from notifications import get_messages
from solver import (
    EnergyParams,
    StreamField,
    assemble_energy,
    el_residual,
    energy_and_gradient,
    extract_free_boundary,
    fb_condition_check,
    minimize,
    monotonicity_check,
    outlet_gap,
)


def field_from(domain, table, fn):
    psi = fn(domain.nodes[:, 0], domain.nodes[:, 1])
    return StreamField(domain, psi, domain.boundary.copy(), table.Q, 1e-8 * table.Q)


def test_params_validation():
    with pytest.raises(DomainError):
        EnergyParams(delta_chi=0.0)
    with pytest.raises(DomainError):
        EnergyParams(quadrature_order=5)
    with pytest.raises(DomainError):
        EnergyParams(tol_q_rel=1e-17)
    assert EnergyParams().delta_for(0.1, 0.5) == pytest.approx(0.1)
    assert EnergyParams(delta_chi=0.3).delta_for(0.1, 0.5) == 0.3


def test_strip_recovers_linear_field(strip_domain, unit_table):
    Q = unit_table.Q
    datum = BoundaryDatum.from_function(strip_domain, lambda x1, x2: Q * x2, Q)
    x1, x2 = strip_domain.nodes[:, 0], strip_domain.nodes[:, 1]
    start = Q * x2 + 0.03 * np.sin(np.pi * x1) * np.sin(np.pi * x2)
    field = minimize(datum, unit_table, 0.0, EnergyParams(grad_tol=1e-10), warm_start=start, lam=1.0)
    assert field.converged
    np.testing.assert_allclose(field.psi, Q * x2, atol=1e-8)
    assert field.log["iteration"].is_monotonic_increasing


def test_energy_never_increases(strip_domain, unit_table):
    Q = unit_table.Q
    lam = 0.5
    datum = BoundaryDatum.from_function(strip_domain, lambda x1, x2: Q * x2, Q)
    x1, x2 = strip_domain.nodes[:, 0], strip_domain.nodes[:, 1]
    start = Q * x2 + 0.05 * np.sin(np.pi * x1) * np.sin(2.0 * np.pi * x2)
    field = minimize(datum, unit_table, unit_table.lambda_eps(lam), EnergyParams(grad_tol=1e-9), warm_start=start, lam=lam)
    # two smoothing widths, each with its own energy sequence
    assert len(field.pass_energies) == 2
    for energies in field.pass_energies:
        assert np.all(np.diff(energies) <= 0.0)
    assert field.energies == field.pass_energies[-1]
    assert set(field.log["pass"]) == {0, 1}
    assert field.delta_chi == pytest.approx(0.5 * EnergyParams().delta_for(strip_domain.h, lam))


def test_energy_never_increases_without_free_boundary_term(strip_domain, unit_table):
    Q = unit_table.Q
    datum = BoundaryDatum.from_function(strip_domain, lambda x1, x2: Q * x2, Q)
    x1, x2 = strip_domain.nodes[:, 0], strip_domain.nodes[:, 1]
    start = Q * x2 + 0.05 * np.sin(np.pi * x1) * np.sin(2.0 * np.pi * x2)
    field = minimize(datum, unit_table, 0.0, EnergyParams(grad_tol=1e-9), warm_start=start, lam=1.0)
    assert np.all(np.diff(field.energies) <= 0.0)


def test_warm_start_is_a_fixed_point(strip_domain, unit_table):
    Q = unit_table.Q
    datum = BoundaryDatum.from_function(strip_domain, lambda x1, x2: Q * x2, Q)
    x1, x2 = strip_domain.nodes[:, 0], strip_domain.nodes[:, 1]
    start = Q * x2 + 0.03 * np.sin(np.pi * x1) * np.sin(np.pi * x2)
    params = EnergyParams(grad_tol=1e-9)
    first = minimize(datum, unit_table, 0.0, params, warm_start=start, lam=1.0)
    second = minimize(datum, unit_table, 0.0, params, warm_start=first, lam=1.0)
    assert second.iterations == 0
    assert np.array_equal(second.psi, first.psi)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_differences(strip_domain, shear_table, seed):
    rng = np.random.default_rng(seed)
    Q = shear_table.Q
    params = EnergyParams()
    psi = 0.8 * Q * strip_domain.nodes[:, 1] + 0.05 * Q * rng.uniform(-1.0, 1.0, strip_domain.n_nodes)
    direction = rng.uniform(-1.0, 1.0, strip_domain.n_nodes)
    lam_eps, delta = 0.5, 0.2
    _, gradient, _ = energy_and_gradient(strip_domain, psi, shear_table, lam_eps, params, delta)

    def central(step):
        J_plus, _, _ = energy_and_gradient(
            strip_domain, psi + step * direction, shear_table, lam_eps, params, delta, need_gradient=False
        )
        J_minus, _, _ = energy_and_gradient(
            strip_domain, psi - step * direction, shear_table, lam_eps, params, delta, need_gradient=False
        )
        return (J_plus - J_minus) / (2.0 * step)

    # Richardson extrapolation cancels the O(step²) term
    step = 1e-5
    slope = (4.0 * central(0.5 * step) - central(step)) / 3.0
    assert np.dot(gradient, direction) == pytest.approx(slope, rel=1e-6)


def test_coincident_field_has_zero_energy(strip_domain, uniform_table):
    field = field_from(strip_domain, uniform_table, lambda x1, x2: np.full_like(x1, uniform_table.Q))
    assert assemble_energy(field, uniform_table, 0.7, delta=0.1) == pytest.approx(0.0, abs=1e-10)


def test_dirichlet_rows_are_zero(strip_domain, uniform_table):
    psi = 0.5 * uniform_table.Q * strip_domain.nodes[:, 1] ** 2
    mask = strip_domain.boundary
    _, gradient, _ = energy_and_gradient(
        strip_domain, psi, uniform_table, 0.3, EnergyParams(), 0.1, dirichlet=mask
    )
    assert np.all(gradient[mask] == 0.0)
    assert np.any(gradient[~mask] != 0.0)


def test_z_terms_vanish_for_constant_data(strip_domain, uniform_table):
    psi = uniform_table.Q * strip_domain.nodes[:, 1] ** 2
    with_z = energy_and_gradient(strip_domain, psi, uniform_table, 0.3, EnergyParams(), 0.1)
    without_z = energy_and_gradient(strip_domain, psi, uniform_table, 0.3, EnergyParams(include_z_terms=False), 0.1)
    assert with_z[0] == without_z[0]
    np.testing.assert_array_equal(with_z[1], without_z[1])


def test_linear_field_diagnostics(strip_domain, unit_table):
    field = field_from(strip_domain, unit_table, lambda x1, x2: unit_table.Q * x2)
    assert outlet_gap(field) == pytest.approx(strip_domain.R, abs=1e-12)
    with pytest.raises(NoFreeBoundaryError):
        extract_free_boundary(field)
    report = el_residual(field, unit_table)
    assert report["count"] == 49
    assert report["max"] <= 1e-10
    assert monotonicity_check(field)["monotone"]


def test_synthetic_free_boundary(strip_domain, unit_table):
    Q = unit_table.Q
    field = field_from(strip_domain, unit_table, lambda x1, x2: np.minimum(Q, Q * x2 / 0.5))
    curve = extract_free_boundary(field)
    assert curve.upsilon.empty
    assert len(curve.downstream) >= 5
    assert curve.H_est == pytest.approx(0.5, abs=1e-6)
    assert curve.height_at(0.5) == pytest.approx(0.5, abs=1e-6)
    assert outlet_gap(field) == pytest.approx(-strip_domain.mu, abs=1e-12)
    polyline = curve.polyline()
    assert list(polyline.columns) == ["x1", "x2"]


def test_fb_condition_on_synthetic_boundary(strip_domain, unit_table):
    Q = unit_table.Q
    field = field_from(strip_domain, unit_table, lambda x1, x2: np.minimum(Q, Q * x2 / 0.5))
    curve = extract_free_boundary(field)
    # below the kink the field is exactly linear with slope 2Q
    report = fb_condition_check(field, curve, unit_table, 2.0 * Q)
    assert 0 < report["count"] <= len(curve.downstream)
    assert report["max"] == pytest.approx(0.0, abs=1e-9)
    assert fb_condition_check(field, curve, unit_table, Q)["median"] == pytest.approx(1.0, abs=1e-9)


def test_multiple_crossings_abort(strip_domain, unit_table):
    Q = unit_table.Q

    def bump(x1, x2):
        return np.minimum(Q, Q * (x2 + np.maximum(0.0, 1.0 - 10.0 * np.abs(x1 - 0.5))))

    field = field_from(strip_domain, unit_table, bump)
    with pytest.raises(FreeBoundaryShapeError):
        extract_free_boundary(field)


def test_outlet_gap_moves_inside_smoothing_layer(strip_domain, unit_table):
    # no node reaches Q, yet the gap still orders the fields by how close the top comes to Q
    Q = unit_table.Q
    gaps = []
    for scale in (1.0, 1.05, 1.1):
        psi = np.minimum(Q, scale * Q * strip_domain.nodes[:, 1])
        field = StreamField(strip_domain, psi, strip_domain.boundary.copy(), Q, 1e-8 * Q, delta_chi=0.2)
        gaps.append(outlet_gap(field))
    assert gaps[0] == pytest.approx(strip_domain.R, abs=1e-12)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[1] == pytest.approx(0.826, abs=0.01)
    assert gaps[2] == pytest.approx(0.048, abs=0.01)


def test_free_boundary_level_follows_smoothing(strip_domain, unit_table):
    Q = unit_table.Q
    sharp = field_from(strip_domain, unit_table, lambda x1, x2: Q * x2)
    assert sharp.fb_level == pytest.approx(Q - sharp.tol_q)
    sharp.delta_chi = 0.2
    assert sharp.fb_level == pytest.approx(Q - 0.1)


def test_roundoff_overshoot_passes_bounds(strip_domain, unit_table):
    Q = unit_table.Q
    field = field_from(strip_domain, unit_table, lambda x1, x2: Q * x2 * (1.0 + 1e-7))
    assert not field.bounds_ok()
    assert field.bounds_ok(MAX_PRINCIPLE_SLACK)
    field.psi = Q * strip_domain.nodes[:, 1] * 1.01
    assert field.bounds_excess() == pytest.approx(0.01 * Q)
    assert not field.bounds_ok(MAX_PRINCIPLE_SLACK)


def test_minimize_keeps_quiet_on_attained_bounds(strip_domain, unit_table):
    Q = unit_table.Q
    datum = BoundaryDatum.from_function(strip_domain, lambda x1, x2: Q * x2, Q)
    field = minimize(datum, unit_table, 0.0, EnergyParams(grad_tol=1e-9), lam=1.0)
    assert field.psi.max() == pytest.approx(Q)
    assert not [m for m in get_messages("warning") if "maximum principle" in m["text"]]
