"""Binary field dumps, trajectory dumps and CSV exports.

Binary layout (all little-endian), format version ``sbridge-field/1``::

    magic       4 bytes   b"SBFD"
    version    16 bytes   ASCII, NUL padded
    dim         uint32
    ncomp       uint32    values per cell (1 for scalar fields)
    cells       dim x uint32
    lower       dim x float64
    upper       dim x float64
    time        float64   NaN when the field has no time stamp
    payload     prod(cells) * ncomp x float64, row-major, component fastest
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .grid import Grid, ScalarField

MAGIC = b"SBFD"
FIELD_FORMAT = "sbridge-field/1"
CSV_FORMAT = "sbridge-csv/1"
TRAJECTORY_FORMAT = "sbridge-trajectory/1"


class FormatError(ValueError):
    pass


def write_field(path, grid: Grid, values: np.ndarray, time: float = float("nan")) -> None:
    values = np.asarray(values, dtype="<f8")
    ncomp = values.size // grid.size
    if ncomp * grid.size != values.size:
        raise FormatError("value count is not a multiple of the cell count")
    header = MAGIC + FIELD_FORMAT.encode("ascii").ljust(16, b"\0")
    header += struct.pack("<II", grid.dim, ncomp)
    header += struct.pack(f"<{grid.dim}I", *grid.cells)
    header += struct.pack(f"<{grid.dim}d", *grid.lower)
    header += struct.pack(f"<{grid.dim}d", *grid.upper)
    header += struct.pack("<d", float(time))
    Path(path).write_bytes(header + values.reshape(-1).tobytes())


def read_field(path) -> tuple[tuple, np.ndarray, float]:
    """Returns ``((cells, lower, upper), values, time)``; values keep a
    trailing component axis only when ``ncomp > 1``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a field dump")
    version = raw[4:20].rstrip(b"\0").decode("ascii")
    if version != FIELD_FORMAT:
        raise FormatError(f"{path}: unsupported format {version!r}")
    off = 20
    dim, ncomp = struct.unpack_from("<II", raw, off)
    off += 8
    cells = struct.unpack_from(f"<{dim}I", raw, off)
    off += 4 * dim
    lower = struct.unpack_from(f"<{dim}d", raw, off)
    off += 8 * dim
    upper = struct.unpack_from(f"<{dim}d", raw, off)
    off += 8 * dim
    (time,) = struct.unpack_from("<d", raw, off)
    off += 8
    count = int(np.prod(cells)) * ncomp
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(float)
    shape = tuple(cells) + ((ncomp,) if ncomp > 1 else ())
    return (tuple(cells), tuple(lower), tuple(upper)), values.reshape(shape), time


def read_scalar_field(path, grid: Grid) -> ScalarField:
    (cells, lower, upper), values, time = read_field(path)
    if cells != grid.cells or not (np.allclose(lower, grid.lower) and np.allclose(upper, grid.upper)):
        raise FormatError(f"{path}: grid does not match the configured grid")
    if values.shape != grid.shape:
        raise FormatError(f"{path}: expected a scalar field")
    return ScalarField(grid, values, time)


def write_trajectory(directory, grid: Grid, frames: np.ndarray, times: np.ndarray,
                     name: str = "field") -> None:
    """One field dump per time node plus ``index.txt`` listing file and time."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {TRAJECTORY_FORMAT}", "# index file time"]
    for k, (frame, t) in enumerate(zip(frames, times)):
        fname = f"{name}_{k:05d}.bin"
        write_field(directory / fname, grid, frame, t)
        lines.append(f"{k} {fname} {float(t)!r}")
    (directory / "index.txt").write_text("\n".join(lines) + "\n")


def read_trajectory(directory) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    index = directory / "index.txt"
    if not index.exists():
        raise FileNotFoundError(index)
    frames, times = [], []
    for line in index.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        _, fname, t = line.split()
        _, values, _ = read_field(directory / fname)
        frames.append(values)
        times.append(float(t))
    return np.array(frames), np.array(times)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_FORMAT}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    return header, data


def field_rows(grid: Grid, *columns: np.ndarray):
    """Rows of ``coordinates..., value(s)...`` in row-major cell order."""
    pts = grid.points().reshape(-1, grid.dim)
    cols = [np.asarray(c, dtype=float).reshape(grid.size, -1) for c in columns]
    block = np.hstack([pts] + cols)
    return [list(map(float, r)) for r in block]


def coordinate_names(grid: Grid) -> list[str]:
    return [f"x{i + 1}" for i in range(grid.dim)]


def export_field_csv(path, field: ScalarField, name: str = "value") -> None:
    write_csv(path, coordinate_names(field.grid) + [name], field_rows(field.grid, field.values))
