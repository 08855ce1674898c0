"""Uniform grids over truncation boxes and functions sampled on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower_i, upper_i]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("box bounds have different dimensions")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("box must have positive extent in every direction")

    @classmethod
    def cube(cls, d: int, L: float = 8.0) -> "Box":
        return cls(tuple([-float(L)] * d), tuple([float(L)] * d))

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def radius(self) -> float:
        """Largest half-width; used for guard boxes."""
        return float(np.max(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def scaled(self, factor: float) -> "Box":
        return Box(tuple(float(v) * factor for v in self.lower),
                   tuple(float(v) * factor for v in self.upper))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= np.asarray(self.lower)) & (x <= np.asarray(self.upper)), axis=-1)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(tuple(data["lower"]), tuple(data["upper"]))


@dataclass(frozen=True)
class Grid:
    """Node grid with ``n`` points per axis, endpoints included.

    Each node owns the cell ``[x_j - h/2, x_j + h/2]``; integrals are cell
    sums, which agree with the trapezoid rule for functions vanishing at the
    box boundary.
    """

    box: Box
    n: tuple

    def __post_init__(self):
        if len(self.n) != self.box.d:
            raise ValueError("one node count per axis is required")
        if any(k < 3 for k in self.n):
            raise ValueError("need at least 3 nodes per axis")

    @classmethod
    def uniform(cls, box: Box, n: int) -> "Grid":
        return cls(box, tuple([int(n)] * box.d))

    @classmethod
    def with_spacing(cls, box: Box, h: float) -> "Grid":
        counts = []
        for lo, hi in zip(box.lower, box.upper):
            k = (hi - lo) / h
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ValueError(f"spacing {h} does not divide box extent {hi - lo}")
            counts.append(int(round(k)) + 1)
        return cls(box, tuple(counts))

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def h(self) -> np.ndarray:
        return np.array([(hi - lo) / (k - 1) for lo, hi, k in
                         zip(self.box.lower, self.box.upper, self.n)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, k) for lo, hi, k in
                zip(self.box.lower, self.box.upper, self.n)]

    @property
    def shape(self) -> tuple:
        return tuple(self.n)

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*n, d)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.points().reshape(-1, self.d)

    def index_of(self, x: np.ndarray) -> np.ndarray:
        """Nearest-node multi-index of points ``x`` (shape ``(..., d)``)."""
        x = np.asarray(x, dtype=float)
        return np.rint((x - np.asarray(self.box.lower)) / self.h).astype(np.int64)

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        return GridFunction(self, np.asarray(fn(self.points()), dtype=float))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Scalar (or vector, trailing axis) field values on a :class:`Grid`."""

    grid: Grid
    values: np.ndarray
    weight: Optional[dict] = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[: self.grid.d] != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def h(self) -> np.ndarray:
        return self.grid.h

    def integrate(self, values: Optional[np.ndarray] = None) -> float:
        v = self.values if values is None else values
        return float(np.sum(v) * self.grid.cell_volume)

    def gradient(self) -> np.ndarray:
        """Second-order central differences, one-sided at the boundary.

        Returns shape ``(*n, d)``.
        """
        if self.grid.d == 1:
            g = np.gradient(self.values, self.h[0], edge_order=2)
            return g[..., None]
        gs = np.gradient(self.values, *self.h, edge_order=2)
        return np.stack(gs, axis=-1)

    def derivative(self, beta: Sequence[int]) -> np.ndarray:
        """Mixed partial ``∂^beta`` with ``beta`` a count per axis."""
        out = self.values
        for axis, k in enumerate(beta):
            for _ in range(k):
                out = np.gradient(out, self.h[axis], axis=axis, edge_order=2)
        return out

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def at(self, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at points ``x`` of shape ``(..., d)``."""
        from scipy.interpolate import RegularGridInterpolator

        x = np.asarray(x, dtype=float)
        if self.grid.d == 1:
            return np.interp(x[..., 0], self.grid.axes[0], self.values, left=0.0, right=0.0)
        interp = RegularGridInterpolator(self.grid.axes, self.values,
                                         bounds_error=False, fill_value=0.0)
        return interp(x)

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values, self.weight)

    def __mul__(self, scalar: float) -> "GridFunction":
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__
