# helpers.py
import hashlib
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from config import SIGNIFICANT_DIGITS


def format_float(value) -> str:
    """Render a float with enough digits to round-trip exactly."""
    return f"{float(value):.{SIGNIFICANT_DIGITS}g}"


def smoothstep(r):
    """
    Quintic C² step 10r³ − 15r⁴ + 6r⁵ on [0, 1], clamped outside.
    Returns (value, first derivative, second derivative).
    """
    r = np.clip(np.asarray(r, dtype=float), 0.0, 1.0)
    value = r**3 * (10.0 - 15.0 * r + 6.0 * r * r)
    first = 30.0 * r**2 * (1.0 - r) ** 2
    second = 60.0 * r * (1.0 - r) * (1.0 - 2.0 * r)
    return value, first, second


def station_filename(x1: float) -> str:
    """
    File name for a cross-section profile.
    Example: 3.5 -> profile_x1_3p5.txt
    """
    label = format(float(x1), "g").replace("-", "m").replace(".", "p")
    label = re.sub(r"[^a-z0-9_]+", "", label.lower())
    return f"profile_x1_{label or '0'}.txt"


def content_hash(text) -> str:
    """Return a short stable hash for a config text or bytes payload."""
    if text is None:
        return ""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return hashlib.sha1(data).hexdigest()[:10]


def make_run_key(config_text: str, command: str, seed) -> str:
    """
    Stable short hash identifying a run context.
    Context is defined by (config content, command, seed).
    """
    raw = f"{content_hash(config_text)}|{command}|{seed}"
    return hashlib.sha1(raw.encode("utf-8")).hexdigest()[:12]


def write_files_atomically(payloads: dict) -> list[Path]:
    """
    Write {path: text} so that either every file appears or none does.
    Each payload goes to a temporary sibling first and is renamed at the end.
    """
    staged = []
    try:
        for path, text in payloads.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
            staged.append((Path(tmp), path))
    except OSError:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)
    return [path for _, path in staged]
