"""Dataset container with named, role-tagged numeric columns, plus strict
CSV round-tripping used by the command line harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

ROLES = ("outcome", "regressor", "instrument", "indicator", "next-state")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable (n, k) float64 table with per-column roles."""

    names: tuple
    roles: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2:
            raise DataError("values must be 2-D")
        if vals.shape[0] < 1:
            raise DataError("dataset needs at least one row")
        if len(self.names) != vals.shape[1] or len(self.roles) != vals.shape[1]:
            raise DataError("names/roles must match the column count")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate column names")
        for r in self.roles:
            if r not in ROLES:
                raise DataError(f"unknown role {r!r}; valid roles: {ROLES}")
        if not np.isfinite(vals).all():
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise DataError(
                f"non-finite value at row {bad[0]}, column {self.names[bad[1]]!r}"
            )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def col(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise DataError(f"no column named {name!r}") from None
        return self.values[:, j]

    def cols(self, names) -> np.ndarray:
        return np.column_stack([self.col(n) for n in names])

    def by_role(self, role: str):
        names = tuple(n for n, r in zip(self.names, self.roles) if r == role)
        if not names:
            raise DataError(f"no column with role {role!r}")
        return names, self.cols(names)

    def take(self, idx) -> "Dataset":
        return Dataset(self.names, self.roles, self.values[np.asarray(idx)])

    @classmethod
    def from_columns(cls, columns, roles) -> "Dataset":
        names = tuple(columns)
        vals = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
        return cls(names, tuple(roles[n] for n in names), vals)


def load_csv(path, schema) -> Dataset:
    """Read a CSV whose header must contain exactly the schema's columns.

    ``schema`` is an ordered sequence of (name, role) pairs. Missing or
    non-numeric cells abort with the offending row and column named.
    """
    names = [n for n, _ in schema]
    roles = {n: r for n, r in schema}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if set(header) != set(names):
            raise DataError(
                f"{path}: header {header} does not match schema columns {names}"
            )
        pos = [header.index(n) for n in names]
        rows = []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i + 1} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j, name in zip(pos, names):
                cell = row[j].strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {i + 1}, column {name!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {i + 1}, column {name!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(tuple(names), tuple(roles[n] for n in names), np.asarray(rows))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.names)
        for row in dataset.values:
            writer.writerow([repr(float(v)) for v in row])
