import io

import numpy as np
import pytest

from helpers import content_hash, format_float, make_run_key, smoothstep, station_filename, write_files_atomically
from notifications import add_message, get_messages, render_messages


def test_format_float_round_trips():
    for value in (0.1, 1.0 / 3.0, 2.0 - np.exp(-5.0), 1e-300):
        assert float(format_float(value)) == value


def test_smoothstep():
    value, first, second = smoothstep(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
    np.testing.assert_allclose(value, [0.0, 0.0, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(first, [0.0, 0.0, 1.875, 0.0, 0.0])
    assert second[2] == pytest.approx(0.0)


@pytest.mark.parametrize(
    "x1, name",
    [(3.5, "profile_x1_3p5.txt"), (7.0, "profile_x1_7.txt"), (-1.25, "profile_x1_m1p25.txt")],
)
def test_station_filename(x1, name):
    assert station_filename(x1) == name


def test_run_key():
    key = make_run_key("[gas]\n", "check", 7)
    assert key == make_run_key("[gas]\n", "check", 7)
    assert key != make_run_key("[gas]\n", "check", 8)
    assert len(key) == 12
    assert content_hash(None) == ""


def test_write_files_atomically(tmp_path):
    written = write_files_atomically({tmp_path / "a.txt": "one\n", tmp_path / "sub" / "b.txt": "two\n"})
    assert [p.name for p in written] == ["a.txt", "b.txt"]
    assert (tmp_path / "sub" / "b.txt").read_text(encoding="utf-8") == "two\n"
    assert not any(p.name.startswith(".") for p in tmp_path.rglob("*"))


def test_messages_are_collected_once():
    add_message("warning", "wall is not monotone")
    add_message("warning", "wall is not monotone")
    add_message("info", "k_mu heuristic in use")
    assert len(get_messages()) == 2
    assert len(get_messages("info")) == 1
    stream = io.StringIO()
    assert render_messages(stream) == 2
    lines = stream.getvalue().splitlines()
    assert lines[0] == "Diagnostics (2)"
    assert lines[1] == "- Warning: wall is not monotone"


def test_no_messages_renders_nothing():
    stream = io.StringIO()
    assert render_messages(stream) == 0
    assert stream.getvalue() == ""
