"""
File output helpers. Every file is written to a temporary sibling and renamed
into place, so an interrupted run never leaves a truncated result behind.
"""
import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write bytes to path atomically.

    Args:
        path: Destination file
        data: Payload

    Returns:
        The destination as a Path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write UTF-8 text to path atomically."""
    return atomic_write_bytes(path, text.encode('utf-8'))


def format_value(value: Any) -> str:
    """Render a CSV cell; floats use repr so values round-trip exactly."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]],
              preamble: Sequence[str] = ()) -> Path:
    """
    Write a CSV file atomically.

    Args:
        path: Destination file
        columns: Header row
        rows: Data rows, one value per column
        preamble: Comment lines written before the header (without the '#')
    """
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return atomic_write_text(path, buf.getvalue())
