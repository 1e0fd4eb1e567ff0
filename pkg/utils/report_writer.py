"""
Report and artifact writing helpers.

Every output is written once: the content goes to a temporary file in the
target directory which is then renamed over the destination.
"""

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence, Union

PathLike = Union[str, os.PathLike]


def _ensure_parent(path: PathLike) -> Path:
    """Create the parent directory of path if needed"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write bytes to path atomically.

    Args:
        path: Destination file
        data: Full file content

    Returns:
        The destination path
    """
    path = _ensure_parent(path)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Render rows as CSV text with '\\n' line endings"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    return atomic_write_text(path, format_csv(header, rows))


def fmt_float(value, digits: int = 6) -> str:
    """Fixed-point text for a float; 'nan' for undefined values"""
    if value is None:
        return "nan"
    return f"{value:.{digits}f}"
