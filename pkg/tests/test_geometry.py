import numpy as np
import pandas as pd
import pytest

from errors import DomainError, GeometryError
from geometry import (
    AXIS,
    EXIT,
    INLET,
    TOP,
    WALL,
    boundary_datum,
    build_domain,
    build_nozzle,
    downstream_profile_1d,
    export_mesh,
    import_mesh,
)
from notifications import get_messages


def test_strip_domain(strip_domain):
    assert strip_domain.n_nodes == 121
    assert len(strip_domain.elements) == 200
    assert strip_domain.b_mu == 1.0
    assert strip_domain.area.sum() == pytest.approx(1.0, rel=1e-12)
    assert strip_domain.min_angle() == pytest.approx(45.0)
    counts = strip_domain.tag_counts()
    assert counts["interior"] == 81
    assert counts["wall"] == 0


def test_mirrored_exponential_wall():
    nozzle = build_nozzle("mirrored-exponential", hbar=2.0, k=1.0)
    assert nozzle.b_mu(0.0) == 1.0
    assert nozzle.b_mu(5.0) == pytest.approx(2.0 - np.exp(-5.0), abs=1e-12)
    assert float(nozzle.theta(1.5)) == pytest.approx(np.log(0.5), rel=1e-12)
    assert float(nozzle.theta(1.0)) == 0.0
    assert nozzle.outlet_slope() == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        nozzle.b_mu(-1.0)


def test_sampled_wall_must_reach_outlet():
    samples = pd.DataFrame({"x2": [1.0, 1.2, 1.4], "x1": [0.1, -0.5, -1.0]})
    with pytest.raises(GeometryError):
        build_nozzle(samples=samples, hbar=1.5)


def test_sampled_wall_inverse():
    samples = pd.DataFrame({"x2": [1.0, 1.2, 1.4], "x1": [0.0, -0.5, -1.2]})
    nozzle = build_nozzle(samples=samples, hbar=1.5)
    assert nozzle.b_mu(0.5) == pytest.approx(1.2, abs=1e-8)
    with pytest.raises(DomainError):
        nozzle.b_mu(2.0)


def test_sampled_wall_rising_tail_warns():
    samples = pd.DataFrame({"x2": [1.0, 1.2, 1.4], "x1": [0.0, -0.5, -0.3]})
    build_nozzle(samples=samples, hbar=1.5, h_star=1.1)
    assert any("not monotone" in m["text"] for m in get_messages("warning"))


def test_unknown_preset():
    with pytest.raises(GeometryError):
        build_nozzle("bell")


def test_nozzle_domain_follows_wall():
    nozzle = build_nozzle("mirrored-exponential", hbar=1.5, k=1.0)
    domain = build_domain(nozzle, 5.0, 5.0, 0.1)
    assert domain.b_mu == pytest.approx(1.5 - 0.5 * np.exp(-5.0), abs=1e-12)
    assert domain.min_angle() >= 20.0
    assert domain.wall_node_deviation() < 1e-12
    assert domain.wall_deviation() < 1e-3
    outlet = domain.nodes[(domain.nodes[:, 0] == 0.0) & (domain.nodes[:, 1] == 1.0)]
    assert len(outlet) == 1
    assert np.all(domain.nodes[domain.tags == WALL, 0] < 0.0)
    assert np.all(domain.nodes[domain.tags == TOP, 1] == 1.0)


def test_domain_rejects_bad_sizes(strip_nozzle):
    with pytest.raises(DomainError):
        build_domain(strip_nozzle, 0.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        build_domain(strip_nozzle, 0.0, -1.0, 0.1)


def test_mesh_round_trip(tmp_path):
    nozzle = build_nozzle("mirrored-exponential", hbar=1.5, k=1.0)
    domain = build_domain(nozzle, 2.0, 3.0, 0.25)
    path = export_mesh(domain, tmp_path / "mesh.txt")
    loaded = import_mesh(path, nozzle=nozzle)
    assert np.array_equal(loaded.nodes, domain.nodes)
    assert np.array_equal(loaded.elements, domain.elements)
    assert np.array_equal(loaded.tags, domain.tags)
    assert loaded.mu == domain.mu
    assert loaded.b_mu == domain.b_mu


def test_import_rejects_foreign_file(tmp_path):
    path = tmp_path / "mesh.txt"
    path.write_text("nodes 0\n", encoding="utf-8")
    with pytest.raises(GeometryError):
        import_mesh(path)


def test_downstream_profile_is_linear_for_uniform_data(uniform_table):
    profile = downstream_profile_1d(uniform_table, 1.0, H_tilde=1.0)
    assert profile.outlet_slope == pytest.approx(uniform_table.Q, rel=1e-6)
    x = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(profile(x), uniform_table.Q * x, atol=1e-6)
    assert float(profile(1.3)) == uniform_table.Q


def test_downstream_height_search(uniform_table):
    profile = downstream_profile_1d(uniform_table, 1.0)
    assert profile.H_tilde == pytest.approx(0.9)
    assert profile.outlet_slope > 1.0


def test_downstream_profile_rejects_sonic_lambda(uniform_table):
    with pytest.raises(DomainError):
        downstream_profile_1d(uniform_table, 2.0)


def test_boundary_datum(uniform_table):
    nozzle = build_nozzle("mirrored-exponential", hbar=1.5, k=1.0)
    domain = build_domain(nozzle, 2.0, 3.0, 0.25)
    datum = boundary_datum(domain, uniform_table, 1.0)
    Q = uniform_table.Q
    values = datum.values[datum.mask]
    assert values.min() >= 0.0
    assert values.max() <= Q
    assert np.all(datum.values[domain.tags == AXIS] == 0.0)
    assert np.all(datum.values[(domain.tags == WALL) | (domain.tags == TOP)] == Q)

    inlet = datum.on(INLET)
    heights = domain.nodes[inlet, 1]
    assert datum.values[inlet][np.argmin(heights)] == 0.0
    assert np.all(np.diff(datum.values[inlet][np.argsort(heights)]) >= 0.0)
    assert np.all(datum.values[inlet][heights <= datum.b_prime] == 0.0)

    assert datum.k_mu == pytest.approx(0.025)
    assert any("k_mu heuristic" in m["text"] for m in get_messages("info"))
    exit_values = datum.values[datum.on(EXIT)]
    assert exit_values.max() <= Q


def test_boundary_datum_validates_inputs(uniform_table):
    nozzle = build_nozzle("mirrored-exponential", hbar=1.5, k=1.0)
    domain = build_domain(nozzle, 2.0, 3.0, 0.25)
    with pytest.raises(DomainError):
        boundary_datum(domain, uniform_table, 1.0, s=0.4)
    with pytest.raises(DomainError):
        boundary_datum(domain, uniform_table, 1.0, k_mu=-0.1)
