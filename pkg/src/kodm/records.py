"""Run records and CSV output shared by every command that writes files."""
from __future__ import annotations

import hashlib
import io
import math
import os


def config_digest(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()[:16]


def run_record(digest: str, seed) -> str:
    return f"kodm run config={digest} seed={seed}"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def format_csv(header, rows, record: str | None = None) -> str:
    buf = io.StringIO()
    if record:
        buf.write(f"# {record}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, header, rows, record: str | None = None):
    from .kuramoto_sde import _atomic_write

    _atomic_write(os.fspath(path), format_csv(header, rows, record).encode("utf-8"))
