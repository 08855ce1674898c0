"""Reproducible Brownian paths, backward reversal and the tilde shift.

Every path is keyed by ``(seed, stream_id)``: the increments come from a
Philox counter generator whose key is exactly that pair, so path ``k`` is the
same no matter how many other paths are drawn, or in which order.  Normals are
produced by the inverse normal CDF, one uniform per draw.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")

    @classmethod
    def with_step(cls, T: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        n = int(round((T - t0) / dt))
        return cls(t0, T, max(n, 1))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time(self, k: int) -> float:
        return self.t0 + self.dt * k

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of grid time ``t``; raises for off-grid times."""
        k = (t - self.t0) / self.dt
        kr = int(round(k))
        if abs(k - kr) > tol * max(1.0, abs(k)) or not 0 <= kr <= self.n_steps:
            raise ValueError(f"time {t} is not a grid time")
        return kr


def _normals(seed: int, stream_id: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64))
    raw = bitgen.random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """``W`` at the grid times (``values[0] = 0``); the noise is ``sigma * W``."""

    grid: TimeGrid
    values: np.ndarray
    sigma: float
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_steps + 1:
            raise ValueError("one value per grid time is required")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def path_id(self) -> str:
        return f"{self.seed}:{self.stream_id}"

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def noise(self) -> np.ndarray:
        """``sigma * W`` at grid times."""
        return self.sigma * self.values


def sample_brownian(seed: int, stream_id: int, grid: TimeGrid, d: int, sigma: float,
                    deterministic: bool = False) -> BrownianPath:
    """Draw one path; ``deterministic=True`` permits ``sigma = 0`` (all-zero path)."""
    if sigma == 0 and not deterministic:
        raise ValueError("sigma = 0 requires the deterministic flag")
    if sigma == 0:
        return BrownianPath(grid, np.zeros((grid.n_steps + 1, d)), 0.0, seed, stream_id)
    z = _normals(seed, stream_id, grid.n_steps * d).reshape(grid.n_steps, d)
    w = np.zeros((grid.n_steps + 1, d))
    np.cumsum(z * math.sqrt(grid.dt), axis=0, out=w[1:])
    return BrownianPath(grid, w, float(sigma), seed, stream_id)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many paths on one grid; ``values`` has shape ``(P, n_steps + 1, d)``."""

    grid: TimeGrid
    values: np.ndarray
    sigma: float
    seed: int = 0
    stream_ids: tuple = ()

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def path(self, k: int) -> BrownianPath:
        return BrownianPath(self.grid, self.values[k], self.sigma, self.seed, self.stream_ids[k])

    def noise(self) -> np.ndarray:
        return self.sigma * self.values

    @classmethod
    def from_paths(cls, paths: Sequence[BrownianPath]) -> "PathBatch":
        if not paths:
            raise ValueError("no paths")
        grid, sigma = paths[0].grid, paths[0].sigma
        if any(p.grid != grid or p.sigma != sigma for p in paths):
            raise ValueError("paths must share grid and sigma")
        return cls(grid, np.stack([p.values for p in paths]), sigma, paths[0].seed,
                   tuple(p.stream_id for p in paths))


def sample_batch(seed: int, stream_ids: Iterable[int], grid: TimeGrid, d: int, sigma: float,
                 deterministic: bool = False) -> PathBatch:
    ids = tuple(int(s) for s in stream_ids)
    if sigma == 0 and not deterministic:
        raise ValueError("sigma = 0 requires the deterministic flag")
    if sigma == 0:
        return PathBatch(grid, np.zeros((len(ids), grid.n_steps + 1, d)), 0.0, seed, ids)
    vals = np.zeros((len(ids), grid.n_steps + 1, d))
    sq = math.sqrt(grid.dt)
    for j, s in enumerate(ids):
        z = _normals(seed, s, grid.n_steps * d).reshape(grid.n_steps, d)
        np.cumsum(z * sq, axis=0, out=vals[j, 1:])
    return PathBatch(grid, vals, float(sigma), seed, ids)


def as_batch(path) -> PathBatch:
    if isinstance(path, PathBatch):
        return path
    return PathBatch(path.grid, path.values[None], path.sigma, path.seed, (path.stream_id,))


@dataclass(frozen=True, eq=False)
class BackwardPath:
    """``B_t = W_t - W_{t_f}``, defined on the same grid."""

    base: BrownianPath
    t_f: float
    values: np.ndarray = field(repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.base.grid


def reverse(path: BrownianPath, t_f: float) -> BackwardPath:
    k = path.grid.index_of(t_f)
    vals = path.values - path.values[k]
    vals.setflags(write=False)
    return BackwardPath(path, path.grid.time(k), vals)


def rebase(back: BackwardPath) -> BrownianPath:
    """Read the backward path as a forward one on the reversed clock from ``t_f``."""
    k = back.grid.index_of(back.t_f)
    vals = back.values[k::-1].copy()
    grid = TimeGrid(0.0, back.t_f - back.grid.t0, max(k, 1)) if k > 0 else back.grid
    if k == 0:
        vals = back.values.copy()
    return BrownianPath(grid, vals, back.base.sigma, back.base.seed, back.base.stream_id)


class TildeField:
    """``b~(t_k, x) = b(t_k, x + sigma W_{t_k})`` for one fixed path."""

    def __init__(self, spec, path: BrownianPath):
        self.spec, self.path = spec, path
        self._shift = path.noise()

    def eval_index(self, k: int, x):
        return self.spec(self.path.grid.time(k), np.asarray(x, dtype=float) + self._shift[k])

    def __call__(self, t: float, x):
        return self.eval_index(self.path.grid.index_of(t), x)


def tilde_field(spec, path: BrownianPath) -> TildeField:
    return TildeField(spec, path)


def frozen_path(grid: TimeGrid, value, sigma: float = 1.0) -> BrownianPath:
    """Constant path ``W_t = value`` for all grid times (fixtures only)."""
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return BrownianPath(grid, np.tile(v, (grid.n_steps + 1, 1)), sigma, -1, -1)


def path_to_csv(path: BrownianPath, filename) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"W{i + 1}" for i in range(path.d)])
        for t, row in zip(path.grid.times, path.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def path_from_csv(filename, sigma: float = 1.0, seed: int = -1, stream_id: int = -1) -> BrownianPath:
    data = np.loadtxt(filename, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    steps = np.diff(t)
    if len(t) < 2 or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("imported path must lie on a uniform time grid")
    grid = TimeGrid(float(t[0]), float(t[-1]), len(t) - 1)
    if np.any(data[0, 1:] != 0):
        raise ValueError("imported path must start at zero")
    return BrownianPath(grid, data[:, 1:], sigma, seed, stream_id)
