"""Parsing for the delimited files the simulation CLI writes.

A file starts with `# key = value` metadata lines, then one header row,
then comma-separated data rows.  Everything is kept as strings until a
renderer asks for a column as floats, because some files mix numeric
columns with a string `series` column.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TableError(Exception):
    """Input file missing, empty, malformed, or lacking a required column."""


@dataclass(frozen=True)
class Table:
    path: Path
    meta: dict
    names: list
    cells: dict

    def require(self, name: str) -> list:
        if name not in self.cells:
            raise TableError(
                f"{self.path.name}: missing required column '{name}' "
                f"(has: {', '.join(self.names)})"
            )
        return self.cells[name]

    def floats(self, name: str) -> np.ndarray:
        col = self.require(name)
        try:
            return np.array([float(cell) for cell in col])
        except ValueError:
            bad = next(cell for cell in col if not _is_float(cell))
            raise TableError(
                f"{self.path.name}: column '{name}' is not numeric "
                f"(first offending cell: {bad!r})"
            ) from None

    def strings(self, name: str) -> np.ndarray:
        return np.array(self.require(name))

    def meta_float(self, key: str) -> float:
        if key not in self.meta:
            raise TableError(f"{self.path.name}: missing metadata key '{key}'")
        try:
            return float(self.meta[key])
        except ValueError:
            raise TableError(
                f"{self.path.name}: metadata key '{key}' is not numeric "
                f"(value: {self.meta[key]!r})"
            ) from None


def _is_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_table(path) -> Table:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise TableError(f"{path}: {exc.strerror}") from None
    meta = {}
    names = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        cells = [cell.strip() for cell in line.split(",")]
        if names is None:
            names = cells
            continue
        if len(cells) != len(names):
            raise TableError(
                f"{path.name}:{lineno}: row has {len(cells)} cells, "
                f"header has {len(names)}"
            )
        rows.append(cells)
    if names is None:
        raise TableError(f"{path.name}: no header row (empty file?)")
    if not rows:
        raise TableError(f"{path.name}: header but no data rows")
    cells = {name: [row[i] for row in rows] for i, name in enumerate(names)}
    return Table(path=path, meta=meta, names=names, cells=cells)
