"""
Field snapshot reader/writer.

Format (plain CSV text, documented in docs/field_format.md):

    # n=<cells per side>
    # time=<t>
    # component=u shape=<n+1>x<n>
    <n+1 rows of n comma-separated face values, row-major in (i, j)>
    # component=v shape=<n>x<n+1>
    <n rows of n+1 comma-separated face values>

Boundary faces are written (as zeros) so that the arrays keep their full
face shape. Nonzero boundary values are dropped on reading, with a warning.
"""

import io
import logging
import os
from typing import Dict, Optional, Tuple, Type

import numpy as np

from core.errors import DimensionError
from .grid import FaceField, ForceField, Grid, StaggeredVelocity

logger = logging.getLogger(__name__)


def write_field(path: str, field: FaceField, time: float = 0.0) -> str:
    """Write a face field snapshot; returns the path written."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    n = field.grid.n
    with open(path, "w") as f:
        f.write(f"# n={n}\n")
        f.write(f"# time={time!r}\n")
        f.write(f"# component=u shape={n + 1}x{n}\n")
        np.savetxt(f, field.u, delimiter=",", fmt="%.17g")
        f.write(f"# component=v shape={n}x{n + 1}\n")
        np.savetxt(f, field.v, delimiter=",", fmt="%.17g")
    return path


def _parse_header(line: str) -> Dict[str, str]:
    items = {}
    for token in line.lstrip("#").split():
        if "=" in token:
            key, value = token.split("=", 1)
            items[key] = value
    return items


def read_field(
    path: str,
    cls: Type[FaceField] = StaggeredVelocity,
    grid: Optional[Grid] = None,
) -> Tuple[FaceField, float]:
    """Read a snapshot written by write_field; returns (field, time)."""
    meta: Dict[str, str] = {}
    blocks: Dict[str, list] = {}
    current = None
    with open(path, "r") as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                header = _parse_header(line)
                if "component" in header:
                    current = header["component"]
                    blocks[current] = []
                else:
                    meta.update(header)
                continue
            if current is None:
                raise ValueError(f"{path}: data row before any component header")
            blocks[current].append(line)

    if "n" not in meta or "u" not in blocks or "v" not in blocks:
        raise ValueError(f"{path}: missing n, u or v block")
    n = int(meta["n"])
    file_grid = Grid(n)
    if grid is not None and grid != file_grid:
        raise DimensionError(f"{path}: snapshot has n={n}, expected n={grid.n}")

    u = np.loadtxt(io.StringIO("\n".join(blocks["u"])), delimiter=",", ndmin=2)
    v = np.loadtxt(io.StringIO("\n".join(blocks["v"])), delimiter=",", ndmin=2)
    if u.shape == (n + 1, n) and v.shape == (n, n + 1):
        wall = max(np.abs(u[[0, n], :]).max(), np.abs(v[:, [0, n]]).max())
        if wall > 0:
            logger.warning("%s: boundary faces hold values up to %.3e; no-slip sets them to zero", path, wall)
    return cls.from_components(file_grid, u, v), float(meta.get("time", 0.0))


def read_force(path: str, grid: Optional[Grid] = None) -> ForceField:
    field, _ = read_field(path, cls=ForceField, grid=grid)
    return field
