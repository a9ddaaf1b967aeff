from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from errors import ExportError, SonicExceededError
from fields import (
    FIELD_COLUMNS,
    PROFILE_COLUMNS,
    SUMMARY_KEYS,
    continuity_residual,
    cross_section_flux,
    export,
    import_field,
    read_summary,
    recover_fields,
    section_profile,
    transport_residuals,
    vertical_velocity_check,
    vorticity_consistency,
)
from geometry import INTERIOR, build_domain
from solver import FreeBoundaryCurve, StreamField


@pytest.fixture
def long_strip(strip_nozzle):
    return build_domain(strip_nozzle, 0.0, 2.0, 0.1)


@pytest.fixture
def upstream_field(long_strip, unit_table):
    psi = unit_table.psi_bar(long_strip.nodes[:, 1])
    return StreamField(long_strip, psi, long_strip.boundary.copy(), unit_table.Q, 1e-8 * unit_table.Q)


def fake_solution(field):
    curve = FreeBoundaryCurve(
        pd.DataFrame(columns=["x1", "x2"], dtype=float),
        pd.DataFrame({"x1": [0.5, 1.0, 1.5], "x2": [0.95, 0.95, 0.95]}),
        0.95,
        field.domain.h,
    )
    return SimpleNamespace(
        field=field,
        curve=curve,
        lam=1.0,
        mach={"mach_ratio": 0.7, "passed": True},
        accepted=True,
        converged=True,
        downstream=SimpleNamespace(P=2.0, H=1.0),
        fit=SimpleNamespace(gap=0.0, probes=pd.DataFrame({"lam": [1.0]})),
        diagnostics={},
    )


def test_recovery_of_uniform_stream(upstream_field, unit_table):
    fields = recover_fields(upstream_field, unit_table)
    np.testing.assert_allclose(fields.rho, 1.0, rtol=1e-10)
    np.testing.assert_allclose(fields.u1, 1.0, rtol=1e-10)
    np.testing.assert_allclose(fields.u2, 0.0, atol=1e-10)
    np.testing.assert_allclose(fields.P, 2.0, rtol=1e-10)
    np.testing.assert_allclose(fields.M, 1.0 / np.sqrt(2.8), rtol=1e-10)
    np.testing.assert_allclose(fields.omega, 0.0, atol=1e-9)
    assert not fields.dead.any()
    assert list(fields.to_frame(upstream_field.domain, upstream_field.psi).columns) == FIELD_COLUMNS


def test_conservation_diagnostics(upstream_field, unit_table):
    fields = recover_fields(upstream_field, unit_table)
    transport = transport_residuals(fields, unit_table, upstream_field.psi)
    assert transport["bernoulli_max"] <= 1e-10
    assert transport["entropy_max"] <= 1e-10
    assert vorticity_consistency(fields, unit_table, upstream_field)["max_abs"] <= 1e-9
    assert vertical_velocity_check(fields, upstream_field.domain)["passed"]
    assert continuity_residual(fields, upstream_field)["l2"] <= 1e-9


def test_transport_residuals_see_a_rough_field(long_strip, upstream_field, unit_table):
    rng = np.random.default_rng(11)
    interior = long_strip.tags == INTERIOR
    psi = upstream_field.psi.copy()
    psi[interior] += 1e-3 * unit_table.Q * rng.uniform(-1.0, 1.0, int(interior.sum()))
    rough = StreamField(long_strip, psi, long_strip.boundary.copy(), unit_table.Q, 1e-8 * unit_table.Q)

    clean = transport_residuals(recover_fields(upstream_field, unit_table), unit_table, upstream_field.psi)
    noisy = transport_residuals(recover_fields(rough, unit_table), unit_table, psi)
    assert clean["bernoulli_max"] <= 1e-10
    assert clean["entropy_max"] <= 1e-10
    # nodal averages of the element states no longer satisfy B and S exactly
    assert noisy["bernoulli_max"] > 1e-8
    assert noisy["entropy_max"] > 1e-8


def test_cross_section(upstream_field, unit_table):
    fields = recover_fields(upstream_field, unit_table)
    profile = section_profile(upstream_field, fields, 0.5)
    assert list(profile.columns) == PROFILE_COLUMNS
    assert len(profile) > 10
    flux = cross_section_flux(upstream_field, fields, 0.5)
    assert flux["flux"] == pytest.approx(flux["psi_jump"], abs=1e-10)


def test_sonic_field_names_its_element(long_strip, unit_table):
    psi = 1.3 * long_strip.nodes[:, 1]
    field = StreamField(long_strip, psi, long_strip.boundary.copy(), unit_table.Q, 1e-8)
    with pytest.raises(SonicExceededError) as info:
        recover_fields(field, unit_table)
    assert info.value.location is not None


def test_export_round_trip(upstream_field, unit_table, tmp_path):
    solution = fake_solution(upstream_field)
    written = export(solution, unit_table, tmp_path, stations=[0.5])
    names = sorted(p.name for p in written)
    assert names == ["field.txt", "free_boundary.txt", "profile_x1_0p5.txt", "summary.txt"]

    frame, elements = import_field(tmp_path / "field.txt")
    assert list(frame.columns) == FIELD_COLUMNS
    assert np.array_equal(frame["psi"].to_numpy(), upstream_field.psi)
    assert np.array_equal(elements, upstream_field.domain.elements)


def test_summary_keys(upstream_field, unit_table, tmp_path):
    export(fake_solution(upstream_field), unit_table, tmp_path)
    summary = read_summary(tmp_path / "summary.txt")
    assert list(summary) == SUMMARY_KEYS
    assert summary["accepted"] == "true"
    assert summary["fit_probes"] == "1"
    assert float(summary["Q"]) == pytest.approx(unit_table.Q, rel=1e-15)
    assert float(summary["fb_pressure_max_rel"]) <= 1e-10


def test_export_to_unwritable_directory(upstream_field, unit_table, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(ExportError):
        export(fake_solution(upstream_field), unit_table, blocker / "out")
    assert list(tmp_path.iterdir()) == [blocker]
