"""Deterministic CSV and JSON emission.

All output files are written atomically (temp file in the target directory,
then rename) and floats are formatted with 17 significant digits so values
round-trip exactly and repeated runs are byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable

__all__ = ["fmt", "write_csv_atomic", "write_json_atomic", "write_text_atomic"]


def fmt(value) -> str:
    """Render a cell: floats at 17 significant digits, None as empty."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_atomic(path: str, header: list[str], rows: Iterable[Iterable]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(cell) for cell in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_json_atomic(path: str, payload: dict) -> None:
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
