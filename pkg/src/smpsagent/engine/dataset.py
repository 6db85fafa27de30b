from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

QUANTITY_KINDS = ("time", "voltage", "current")


class EngineError(Exception):
    """Base class for simulation and waveform-file errors."""


class NonMonotonicTime(EngineError):
    pass


class UnknownSignal(EngineError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = "voltage"


def quantity_kind(name: str) -> str:
    """Guess the quantity of a SPICE vector name: ``V(out)`` / ``I(L1)`` / ``time``."""
    low = name.lower()
    if low == "time":
        return "time"
    if low.startswith("i(") or low.startswith("ix("):
        return "current"
    return "voltage"


class Dataset:
    """Simulator output: named columns over a common, strictly increasing time axis.

    The first variable is always time. Columns are read-only float64 arrays.
    """

    def __init__(self, variables: Iterable[Variable], columns: Iterable[np.ndarray],
                 title: str = "", plotname: str = "Transient Analysis"):
        self.variables = tuple(variables)
        cols = []
        for c in columns:
            a = np.array(c, dtype=np.float64)
            a.setflags(write=False)
            cols.append(a)
        self.columns = tuple(cols)
        self.title = title
        self.plotname = plotname
        if not self.variables:
            raise ValueError("dataset needs at least a time variable")
        if len(self.variables) != len(self.columns):
            raise ValueError("one column per variable required")
        if self.variables[0].kind != "time":
            raise ValueError("first variable must be time")
        n = len(self.columns[0])
        if any(len(c) != n for c in self.columns):
            raise ValueError("all columns must have the same length")
        names = [v.name.lower() for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        if n > 1 and not np.all(np.diff(self.columns[0]) > 0):
            raise NonMonotonicTime("time column is not strictly increasing")

    @classmethod
    def from_columns(cls, time: np.ndarray, signals: Mapping[str, np.ndarray],
                     **kwargs) -> "Dataset":
        variables = [Variable("time", "time")]
        variables += [Variable(name, quantity_kind(name)) for name in signals]
        return cls(variables, [time, *signals.values()], **kwargs)

    @property
    def n_points(self) -> int:
        return len(self.columns[0])

    @property
    def time(self) -> np.ndarray:
        return self.columns[0]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def index(self, name: str) -> int:
        key = name.strip().lower()
        for i, v in enumerate(self.variables):
            if v.name.lower() == key:
                return i
        raise UnknownSignal(f"unknown signal {name!r}; available: {', '.join(self.names[1:])}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[self.index(name)]

    def __contains__(self, name: str) -> bool:
        try:
            self.index(name)
        except UnknownSignal:
            return False
        return True

    def renamed(self, mapping: Mapping[str, str]) -> "Dataset":
        """Copy with variables renamed (keys matched case-insensitively)."""
        low = {k.lower(): v for k, v in mapping.items()}
        variables = [Variable(low.get(v.name.lower(), v.name), v.kind) for v in self.variables]
        return Dataset(variables, self.columns, self.title, self.plotname)

    def window(self, t_start: float, t_end: Optional[float] = None) -> "Dataset":
        t = self.time
        mask = t >= t_start
        if t_end is not None:
            mask &= t <= t_end
        return Dataset(self.variables, [c[mask] for c in self.columns], self.title, self.plotname)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.variables == other.variables and all(
            np.array_equal(a, b) for a, b in zip(self.columns, other.columns)
        )

    def __repr__(self) -> str:
        return f"Dataset({', '.join(self.names)}; n_points={self.n_points})"
