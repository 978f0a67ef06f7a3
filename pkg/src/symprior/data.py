"""Tabular datasets: an input matrix and a target vector."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .expr import VARIABLE_ROLES


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...] = ()
    roles: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i}" for i in range(X.shape[1])))
        if not self.roles:
            object.__setattr__(self, "roles", ("variable",) * X.shape[1])
        if len(self.names) != X.shape[1] or len(self.roles) != X.shape[1]:
            raise ValueError("names/roles must match the number of columns")
        for r in self.roles:
            if r not in VARIABLE_ROLES:
                raise ValueError(f"unknown column role {r!r}")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_vars(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.names, self.roles)


def _role_of(name: str) -> str:
    # f, f_x0, f_x0x1 naming for function-value and derivative channels
    if name == "f":
        return "function-value"
    if name.startswith("f_"):
        return "second-derivative" if name.count("x") >= 2 else "first-derivative"
    return "variable"


def load_csv(path, target: str | None = None) -> Dataset:
    """Read a headed CSV.  The target is the column named ``target`` (default ``y``,
    falling back to the last column)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body if r], dtype=float)
    if target is None:
        target = "y" if "y" in header else header[-1]
    t = header.index(target)
    cols = [i for i in range(len(header)) if i != t]
    names = tuple(header[i] for i in cols)
    return Dataset(data[:, cols], data[:, t], names, tuple(_role_of(n) for n in names))


def save_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*data.names, "y"])
        for xr, yv in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in xr] + [repr(float(yv))])
