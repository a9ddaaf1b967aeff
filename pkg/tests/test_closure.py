import numpy as np
import pytest

from closure import (
    GasModel,
    Profile,
    build_closure,
    dump_closure,
    load_closure,
    mass_flux,
    streamline_height,
)
from errors import DomainError, InvalidModelError, SonicExceededError
from notifications import get_messages


def linear_velocity(pbar=5.0, hbar=1.0):
    u = Profile("u=1+x2", lambda x: 1.0 + np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float)))
    return GasModel(1.4, pbar, Profile.constant(1.0), u, hbar)


def test_mass_flux_examples():
    uniform = GasModel(1.4, 2.0, Profile.constant(1.0), Profile.constant(1.0), 2.0)
    assert mass_flux(uniform) == pytest.approx(2.0, rel=1e-12)
    assert linear_velocity().Q == pytest.approx(1.5, rel=1e-12)
    heavy_slow = GasModel(1.4, 2.0, Profile.constant(2.0), Profile.constant(0.5), 1.0)
    assert heavy_slow.Q == pytest.approx(1.0, rel=1e-12)


def test_streamline_height():
    model = linear_velocity()
    assert streamline_height(model, 0.0) == 0.0
    assert streamline_height(model, model.Q) == 1.0
    assert streamline_height(model, 0.5) == pytest.approx(np.sqrt(2.0) - 1.0, abs=1e-12)
    with pytest.raises(DomainError):
        streamline_height(model, 1.6)


def test_tabulated_heights_match_direct_solve():
    table = build_closure(linear_velocity(), 0.1, nodes=301)
    assert float(table.streamline_height(0.5)) == pytest.approx(np.sqrt(2.0) - 1.0, abs=1e-4)
    assert float(table.psi_bar(np.sqrt(2.0) - 1.0)) == pytest.approx(0.5, abs=1e-4)
    assert float(table.psi_bar(2.0)) == table.Q


def test_uniform_bernoulli_and_entropy(uniform_table):
    z = np.linspace(0.0, uniform_table.Q, 7)
    np.testing.assert_allclose(uniform_table.bernoulli(z), 7.5, rtol=1e-12)
    np.testing.assert_allclose(uniform_table.entropy(z), 7.0, rtol=1e-12)
    Bp, Sp = uniform_table.bs_derivatives(z)
    assert np.all(Bp == 0.0)
    assert np.all(Sp == 0.0)
    assert uniform_table.isentropic


def test_bernoulli_slope_for_linear_velocity():
    table = build_closure(linear_velocity(), 0.1, nodes=301)
    Bp, Sp = table.bs_derivatives(0.5)
    assert float(Bp) == pytest.approx(1.0, rel=1e-8)
    assert float(Sp) == 0.0


def test_critical_quantities(uniform_table):
    rho_c, rho_m, tc = uniform_table.critical_quantities(0.75)
    assert float(rho_c) == pytest.approx((15.0 / 16.8) ** 2.5, rel=1e-12)
    assert float(rho_m) == pytest.approx((7.5 / 7.0) ** 2.5, rel=1e-12)
    assert float(tc) == pytest.approx(1.4185, rel=1e-3)
    assert float(uniform_table.momentum_sq(rho_c, 0.75)) == pytest.approx(float(tc), rel=1e-12)


def test_momentum_sq(uniform_table):
    assert float(uniform_table.momentum_sq(1.0, 0.5)) == pytest.approx(1.0, rel=1e-14)
    rho_m = (7.5 / 7.0) ** 2.5
    assert float(uniform_table.momentum_sq(rho_m, 0.5)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        uniform_table.momentum_sq(1.2, 0.5)
    with pytest.raises(DomainError):
        uniform_table.momentum_sq(0.0, 0.5)


def test_invert_density(uniform_table):
    assert uniform_table.invert_density(1.0, 0.5) == pytest.approx(1.0, rel=1e-12)
    rho_m = (7.5 / 7.0) ** 2.5
    assert uniform_table.invert_density(0.0, 0.5) == pytest.approx(1.0 / rho_m, rel=1e-12)
    _, _, tc = uniform_table.critical_quantities(0.5)
    with pytest.raises(SonicExceededError):
        uniform_table.invert_density(1.01 * float(tc), 0.5)
    with pytest.raises(DomainError):
        uniform_table.invert_density(-1.0, 0.5)


def test_truncation_regions(uniform_table):
    _, _, tc = uniform_table.critical_quantities(0.5)
    tc = float(tc)
    g, _, _ = uniform_table.g_eps(0.8 * tc, 0.5)
    assert g == pytest.approx(uniform_table.invert_density(0.8 * tc, 0.5), rel=1e-13)
    g_high, dt_high, dz_high = uniform_table.g_eps(2.0 * tc, 0.5)
    assert g_high == uniform_table.g_upper
    assert dt_high == 0.0
    assert dz_high == 0.0
    assert uniform_table.g_upper == pytest.approx((16.8 / 15.0) ** 2.5, rel=1e-12)


def test_z_derivatives_match_differences(shear_table):
    z = 0.5 * shear_table.Q
    _, _, tc = shear_table.critical_quantities(z)
    t = 0.5 * float(tc)
    step = 1e-6 * shear_table.Q
    g, _, dz_g = shear_table.g_eps(t, z)
    fd_g = (shear_table.g_eps(t, z + step)[0] - shear_table.g_eps(t, z - step)[0]) / (2.0 * step)
    assert dz_g == pytest.approx(fd_g, rel=1e-5)
    fd_G = (shear_table.G_eps(t, z + step) - shear_table.G_eps(t, z - step)) / (2.0 * step)
    assert shear_table.dzG_eps(t, z) == pytest.approx(fd_G, rel=1e-5)
    dt = 1e-6 * t
    fd_Gt = (shear_table.G_eps(t + dt, z) - shear_table.G_eps(t - dt, z)) / (2.0 * dt)
    assert fd_Gt == pytest.approx(0.5 * g, rel=1e-6)


def test_energy_continues_across_band(uniform_table):
    _, _, tc = uniform_table.critical_quantities(uniform_table.Q)
    t2 = (1.0 - 0.5 * uniform_table.epsilon) * float(tc)
    beyond = uniform_table.G_eps(t2 + 0.2, uniform_table.Q) - uniform_table.G_eps(t2, uniform_table.Q)
    assert beyond == pytest.approx(0.5 * uniform_table.g_upper * 0.2, rel=1e-10)


def test_phi_contract(uniform_table, shear_table):
    for table in (uniform_table, shear_table):
        assert table.G_eps(0.0, table.Q) == pytest.approx(0.0, abs=1e-12)
        phi0, _ = table.phi_eps(0.0, table.Q)
        assert phi0 == pytest.approx(0.0, abs=1e-12)
        _, _, tc = table.critical_quantities(table.Q)
        t = np.linspace(0.0, 1.5 * float(tc), 200)
        phi, slope = table.phi_eps(t, np.full_like(t, table.Q))
        assert np.all(slope > 0.0)
        assert np.all(np.diff(phi) > 0.0)


def test_lambda_eps(uniform_table):
    assert uniform_table.lambda_eps(0.0) == 0.0
    values = [uniform_table.lambda_eps(lam) for lam in (0.3, 0.6, 0.9)]
    assert all(v > 0.0 for v in values)
    assert values == sorted(values)
    with pytest.raises(DomainError):
        uniform_table.lambda_eps(-0.1)


def test_free_boundary_pressure(uniform_table):
    assert uniform_table.momentum_on_fb(2.0) == pytest.approx(1.0, rel=1e-12)
    assert uniform_table.pressure_from_fb(1.0) == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(DomainError):
        uniform_table.momentum_on_fb(1.0)
    with pytest.raises(DomainError):
        uniform_table.momentum_on_fb(3.0)
    for p in (1.5, 2.0, 2.5):
        lam = uniform_table.momentum_on_fb(p)
        assert uniform_table.pressure_from_fb(lam) == pytest.approx(p, rel=1e-10)


def test_pressure_window(uniform_table):
    lo, hi = uniform_table.pressure_window()
    assert lo == pytest.approx(1.345, abs=1e-3)
    assert hi == pytest.approx(2.546, abs=1e-3)


@pytest.mark.parametrize(
    "gamma, pbar, rho, u",
    [
        (1.0, 2.0, 1.0, 1.0),
        (1.4, 0.5, 1.0, 1.0),
        (1.4, 2.0, -1.0, 1.0),
        (1.4, 2.0, 1.0, 0.0),
    ],
)
def test_invalid_models(gamma, pbar, rho, u):
    with pytest.raises(InvalidModelError):
        GasModel(gamma, pbar, Profile.constant(rho), Profile.constant(u), 1.0)


def test_endpoint_warning_for_sloped_velocity():
    linear_velocity()
    texts = [m["text"] for m in get_messages("warning")]
    assert any("u'(0)" in text for text in texts)


def test_uniform_model_has_no_warnings(uniform_model):
    GasModel(1.4, 2.0, Profile.constant(1.0), Profile.constant(1.0), 1.5)
    assert get_messages("warning") == []


def test_epsilon_range(uniform_model):
    with pytest.raises(DomainError):
        build_closure(uniform_model, 0.0)
    with pytest.raises(DomainError):
        build_closure(uniform_model, 0.3)


def test_snapshot_round_trip(shear_table, tmp_path):
    path = dump_closure(shear_table, tmp_path / "closure.txt")
    loaded = load_closure(path)
    assert np.array_equal(loaded.z_nodes, shear_table.z_nodes)
    assert np.array_equal(loaded.B_nodes, shear_table.B_nodes)
    assert np.array_equal(loaded.Sp_nodes, shear_table.Sp_nodes)
    z = np.linspace(0.0, shear_table.Q, 11)
    np.testing.assert_array_equal(loaded.bernoulli(z), shear_table.bernoulli(z))
    assert loaded.g_upper == shear_table.g_upper


def test_convexity_bounds(uniform_table):
    bounds = uniform_table.convexity_bounds(samples=16)
    assert bounds["g_lower"] <= bounds["g_upper"]
    assert bounds["phi_slope_min"] > 0.0
    assert bounds["b_lower"] <= bounds["b_upper"]


def test_condition_report(uniform_model, shear_model):
    assert uniform_model.condition_report()["isentropic"]
    report = shear_model.condition_report()
    assert not report["isentropic"]
    assert report["pbar_rho_prime_norm"] > 0.0
