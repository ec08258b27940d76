"""Plain-text writers: legacy VTK structured points and deterministic CSV."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


def fmt(value):
    """Fixed, platform-independent float formatting used in every CSV."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    v = float(value)
    if v == 0.0:
        v = 0.0   # drop negative zero
    return f"{v:.12e}"


def write_csv(path, header, rows):
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def read_csv(path):
    """Return ``(header, float array)``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    return header, np.array(data, dtype=float).reshape(len(data), len(header))


def write_vtk_points(path, dims, origin, spacing, point_data, title="evodarcy field"):
    """ASCII legacy VTK STRUCTURED_POINTS file.

    ``point_data`` maps names to arrays of shape ``dims`` (scalars) or
    ``dims + (2,)`` (vectors, padded with a zero third component).  Arrays are
    indexed ``[i, j]`` and written with the first index fastest.
    """
    nx, ny = dims
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET STRUCTURED_POINTS",
             f"DIMENSIONS {nx} {ny} 1",
             f"ORIGIN {fmt(origin[0])} {fmt(origin[1])} 0",
             f"SPACING {fmt(spacing[0])} {fmt(spacing[1])} 1",
             f"POINT_DATA {nx * ny}"]
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=float)
        flat = arr.transpose(1, 0, *range(2, arr.ndim)).reshape(nx * ny, -1)
        if flat.shape[1] == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(fmt(v) for v in flat[:, 0])
        else:
            lines.append(f"VECTORS {name} double")
            lines.extend(f"{fmt(a)} {fmt(b)} 0" for a, b in flat[:, :2])
    path.write_text("\n".join(lines) + "\n")
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()
