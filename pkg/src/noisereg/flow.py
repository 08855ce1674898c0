"""Trajectories and grid flows of ``dX = b(t, X) dt + sigma dW`` for fixed noise.

Two schemes:

* ``euler_maruyama``: ``X' = X + b(t_k, X) dt + sigma dW``; strong order 1 for
  additive noise and smooth drift, order 1 when ``sigma = 0``.
* ``tilde_rk2``: Heun's method on the random ODE for ``X - sigma W``, which
  only reads the noise at grid times; order 2 when ``sigma = 0``.

Arrays of states have shape ``(P, N, d)``: ``P`` paths, ``N`` starting points.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator, RegularGridInterpolator

from .fields import DriftSpec
from .grid import Box, Grid, GridFunction
from .paths import BrownianPath, PathBatch, TimeGrid, as_batch

SCHEMES = ("euler_maruyama", "tilde_rk2")
DEFAULT_L = 8.0


@dataclass
class FlowResult:
    """Raw output of :func:`integrate_batch`."""

    times: np.ndarray          # stored times, shape (K,)
    positions: np.ndarray      # (K, P, N, d)
    jacobians: Optional[np.ndarray]  # (K, P, N, d, d) or None
    escaped: np.ndarray        # (P, N) bool


def integrate_batch(spec, x0, noise, grid: TimeGrid, scheme: str = "tilde_rk2",
                    with_jacobian: bool = False, store_every: Optional[int] = None,
                    guard: float = 10 * DEFAULT_L, backward: bool = False) -> FlowResult:
    """Integrate all starting points under all noise paths at once.

    ``noise`` is ``sigma * W`` with shape ``(P, n_steps + 1, d)``.  ``x0`` is
    ``(N, d)`` (shared by every path) or ``(P, N, d)``.  With ``store_every =
    None`` only the initial and final states are kept.  Trajectories leaving
    the ball of radius ``guard`` are frozen there and flagged.

    ``backward=True`` runs the same scheme from ``T`` down to ``t0``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose one of {SCHEMES}")
    noise = np.asarray(noise, dtype=float)
    P, n1, d = noise.shape
    if n1 != grid.n_steps + 1:
        raise ValueError("noise does not match the time grid")
    x = np.asarray(x0, dtype=float)
    if x.ndim == 2:
        x = np.broadcast_to(x, (P,) + x.shape)
    x = np.array(x, dtype=float)
    if x.shape[0] != P or x.shape[-1] != d:
        raise ValueError("initial points do not match the noise dimension")
    if with_jacobian and not getattr(spec, "smooth", False):
        raise ValueError("Jacobian needs mollified drift")
    N = x.shape[1]
    dt = grid.dt
    n = grid.n_steps
    order = range(n, 0, -1) if backward else range(n)
    sgn = -1.0 if backward else 1.0
    J = np.broadcast_to(np.eye(d), (P, N, d, d)).copy() if with_jacobian else None
    escaped = np.zeros((P, N), dtype=bool)
    start_k = n if backward else 0
    stored_t = [grid.time(start_k)]
    stored_x = [x.copy()]
    stored_j = [J.copy()] if with_jacobian else None
    for step, k in enumerate(order, start=1):
        kn = k - 1 if backward else k + 1
        t, tn = grid.time(k), grid.time(kn)
        dW = (noise[:, kn] - noise[:, k])[:, None, :]
        b1 = spec(t, x)
        if scheme == "euler_maruyama":
            xn = x + sgn * dt * b1 + dW
            if with_jacobian:
                J = J + sgn * dt * np.einsum("...ij,...jk->...ik", spec.jacobian(t, x), J)
        else:
            xp = x + sgn * dt * b1 + dW
            b2 = spec(tn, xp)
            xn = x + sgn * 0.5 * dt * (b1 + b2) + dW
            if with_jacobian:
                D1 = spec.jacobian(t, x)
                D2 = spec.jacobian(tn, xp)
                Jp = J + sgn * dt * np.einsum("...ij,...jk->...ik", D1, J)
                J = J + sgn * 0.5 * dt * (np.einsum("...ij,...jk->...ik", D1, J)
                                          + np.einsum("...ij,...jk->...ik", D2, Jp))
        out = np.sqrt(np.sum(xn * xn, axis=-1)) > guard
        newly = out & ~escaped
        if np.any(escaped):
            xn = np.where(escaped[..., None], x, xn)
        escaped |= newly
        x = xn
        if store_every and (step % store_every == 0 or step == n):
            stored_t.append(tn)
            stored_x.append(x.copy())
            if with_jacobian:
                stored_j.append(J.copy())
    if not store_every:
        stored_t.append(grid.time(0 if backward else n))
        stored_x.append(x.copy())
        if with_jacobian:
            stored_j.append(J.copy())
    jac = np.stack(stored_j) if with_jacobian else None
    return FlowResult(np.array(stored_t), np.stack(stored_x), jac, escaped)


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    scheme: str
    drift_id: str
    path_id: str
    escaped: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def integrate(spec: DriftSpec, x0, path: BrownianPath, scheme: str = "tilde_rk2",
              guard: float = 10 * DEFAULT_L) -> Trajectory:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.d,):
        raise ValueError(f"x0 must have dimension {spec.d}")
    res = integrate_batch(spec, x0[None, :], path.noise()[None], path.grid, scheme,
                          store_every=1, guard=guard)
    return Trajectory(path.grid, res.positions[:, 0, 0, :], scheme, spec.name, path.path_id,
                      bool(res.escaped[0, 0]))


def power_trajectory(x0: float, t, alpha: float = 0.5, sign: float = 1.0) -> np.ndarray:
    """Closed-form ``sigma = 0`` trajectory of the radial power field in d = 1.

    Inside the unit ball ``|Y|^(1-alpha)`` moves linearly at rate
    ``sign * (1 - alpha)``; outside, ``Y`` grows or decays exponentially.
    The inward field stops at 0.
    """
    t = np.asarray(t, dtype=float)
    a = abs(float(x0))
    s = np.sign(x0)
    k = 1.0 - alpha
    if a == 0.0:
        return np.zeros_like(t)
    if sign > 0:
        if a >= 1.0:
            return s * a * np.exp(t)
        t1 = (1.0 - a ** k) / k
        inner = (a ** k + k * np.minimum(t, t1)) ** (1.0 / k)
        return s * np.where(t <= t1, inner, np.exp(np.maximum(t - t1, 0.0)))
    t1 = np.log(a) if a > 1.0 else 0.0
    r1 = np.where(t <= t1, a * np.exp(-t), 1.0) if a > 1.0 else np.full_like(t, a)
    base = np.minimum(r1, 1.0) ** k - k * np.maximum(t - t1, 0.0)
    inner = np.maximum(base, 0.0) ** (1.0 / k)
    return s * np.where(t <= t1, r1, inner)


# ---------------------------------------------------------------------------
# flow tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowTable:
    nodes: np.ndarray              # (N, d)
    times: np.ndarray              # (K,)
    positions: np.ndarray          # (K, N, d)
    jacobians: Optional[np.ndarray] = None  # (K, N, d, d)
    path_id: str = ""
    escaped: Optional[np.ndarray] = None
    node_grid: Optional[Grid] = None
    scheme: str = "tilde_rk2"

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not stored in the flow table")
        return k

    def at(self, t: float) -> np.ndarray:
        return self.positions[self.time_index(t)]

    def save(self, filename) -> None:
        """Binary layout: int64 header ``(d, n_nodes, n_times)`` then row-major
        float64 positions ``[time][node][component]``; metadata in ``.json``."""
        filename = Path(filename)
        K, N, d = self.positions.shape
        with open(filename, "wb") as fh:
            np.array([d, N, K], dtype="<i8").tofile(fh)
            np.ascontiguousarray(self.positions, dtype="<f8").tofile(fh)
        meta = {"times": self.times.tolist(), "nodes": self.nodes.tolist(), "path_id": self.path_id,
                "scheme": self.scheme,
                "escaped": None if self.escaped is None else self.escaped.astype(int).tolist(),
                "node_grid": None if self.node_grid is None else
                {"box": self.node_grid.box.to_dict(), "n": list(self.node_grid.n)}}
        filename.with_suffix(filename.suffix + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, filename) -> "FlowTable":
        filename = Path(filename)
        with open(filename, "rb") as fh:
            d, N, K = np.fromfile(fh, dtype="<i8", count=3)
            pos = np.fromfile(fh, dtype="<f8", count=int(d * N * K)).reshape(int(K), int(N), int(d))
        meta = json.loads(filename.with_suffix(filename.suffix + ".json").read_text())
        grid = None
        if meta.get("node_grid"):
            g = meta["node_grid"]
            grid = Grid(Box.from_dict(g["box"]), tuple(g["n"]))
        esc = None if meta.get("escaped") is None else np.array(meta["escaped"], dtype=bool)
        return cls(np.array(meta["nodes"], dtype=float), np.array(meta["times"]), pos, None,
                   meta.get("path_id", ""), esc, grid, meta.get("scheme", "tilde_rk2"))


def solve_flow(spec: DriftSpec, initial, path: BrownianPath, scheme: str = "tilde_rk2",
               with_jacobian: bool = False, store_every: Optional[int] = None,
               guard: float = 10 * DEFAULT_L) -> FlowTable:
    """Flow of every node under one shared path.

    ``initial`` is a :class:`Grid` or an ``(N, d)`` array of nodes.
    """
    grid = initial if isinstance(initial, Grid) else None
    nodes = initial.flat_points() if grid is not None else np.asarray(initial, dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != spec.d:
        raise ValueError("initial nodes must have shape (N, d)")
    res = integrate_batch(spec, nodes, path.noise()[None], path.grid, scheme, with_jacobian,
                          store_every, guard)
    jac = res.jacobians[:, 0] if res.jacobians is not None else None
    return FlowTable(nodes, res.times, res.positions[:, 0], jac, path.path_id, res.escaped[0], grid,
                     scheme)


def finite_difference_jacobian(flow: FlowTable, t: float) -> np.ndarray:
    """Central-difference ``DΦ_t`` on the node grid, shape ``(*n, d, d)``."""
    if flow.node_grid is None:
        raise ValueError("flow nodes are not a grid")
    g = flow.node_grid
    pos = flow.at(t).reshape(g.shape + (g.d,))
    cols = []
    for axis in range(g.d):
        cols.append(np.gradient(pos, g.h[axis], axis=axis, edge_order=2))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# inverse flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InverseMap:
    points: np.ndarray          # query points (M, d)
    preimages: np.ndarray       # (M, d)
    set_valued: np.ndarray      # (M,) bool
    composition_residual: float


def _left_preimage_1d(xs: np.ndarray, ys: np.ndarray, q: np.ndarray) -> tuple:
    """Smallest ``x`` with ``Φ(x) = q`` for piecewise-linear ``Φ`` through ``(xs, ys)``."""
    run = np.maximum.accumulate(ys)
    j = np.searchsorted(run, q, side="left")
    j = np.clip(j, 1, len(xs) - 1)
    y0, y1 = ys[j - 1], ys[j]
    denom = np.where(y1 != y0, y1 - y0, 1.0)
    w = np.clip((q - y0) / denom, 0.0, 1.0)
    out = xs[j - 1] + w * (xs[j] - xs[j - 1])
    out = np.where(q <= ys[0], xs[0] - (ys[0] - q), out)
    out = np.where(q >= run[-1], xs[-1] + (q - run[-1]), out)
    return out


def inverse_flow(flow: FlowTable, t: float, points=None, coalesce_tol: float = 1e-6) -> InverseMap:
    """``Φ_t^{-1}`` at ``points`` (default: the flow nodes).

    In d=1 the node map is inverted piecewise linearly; non-monotone data
    (coalescence or folding) triggers a warning and the left-most preimage.
    Neighbouring images closer than ``coalesce_tol`` count as coalesced and
    queries within ``coalesce_tol`` of them are flagged set-valued.
    In d=2 the preimage is linearly interpolated over a Delaunay
    triangulation of the image points.  Outside the data hull the map is
    extended by translation (d=1) or nearest value (d=2).
    """
    if flow.d > 2:
        raise NotImplementedError("inverse flow is available for d <= 2")
    ys = flow.at(t)
    xs = flow.nodes
    q = xs if points is None else np.asarray(points, dtype=float).reshape(-1, flow.d)
    if flow.d == 1:
        order = np.argsort(xs[:, 0], kind="stable")
        x1, y1 = xs[order, 0], ys[order, 0]
        steps = np.diff(y1)
        monotone = bool(np.all(steps > coalesce_tol))
        pre = _left_preimage_1d(x1, y1, q[:, 0])
        set_valued = np.zeros(len(q), dtype=bool)
        if not monotone:
            warnings.warn("flow data are not monotone; returning the left-most preimage",
                          RuntimeWarning)
            bad = np.flatnonzero(steps <= coalesce_tol)
            lo = np.minimum(y1[bad + 1], y1[bad]) - coalesce_tol
            hi = np.maximum.accumulate(y1)[bad] + coalesce_tol
            for a, b in zip(lo, hi):
                set_valued |= (q[:, 0] >= a) & (q[:, 0] <= b)
        pre = pre[:, None]
        fwd = np.interp(pre[:, 0], x1, y1)[:, None]
    else:
        interp = LinearNDInterpolator(ys, xs)
        pre = interp(q)
        miss = np.isnan(pre[:, 0])
        if np.any(miss):
            nearest = np.argmin(((q[miss, None, :] - ys[None, :, :]) ** 2).sum(-1), axis=1)
            pre[miss] = xs[nearest] + (q[miss] - ys[nearest])
        set_valued = np.zeros(len(q), dtype=bool)
        if flow.node_grid is not None:
            g = flow.node_grid
            fwd_interp = RegularGridInterpolator(g.axes, ys.reshape(g.shape + (2,)),
                                                 bounds_error=False, fill_value=None)
            fwd = fwd_interp(pre)
        else:
            fwd = LinearNDInterpolator(xs, ys)(pre)
    resid = np.sqrt(np.sum((fwd - q) ** 2, axis=-1))
    resid = float(np.nanmax(resid[~set_valued])) if np.any(~set_valued) else float("nan")
    return InverseMap(q, pre, set_valued, resid)


# ---------------------------------------------------------------------------
# push-forward densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Density:
    u: GridFunction
    mass: float
    lost_mass: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.u.grid


def deposit(positions: np.ndarray, masses: np.ndarray, grid: Grid) -> Density:
    """Nearest-grid-point deposition of particle masses into node cells."""
    positions = np.asarray(positions, dtype=float).reshape(-1, grid.d)
    masses = np.asarray(masses, dtype=float).reshape(-1)
    idx = grid.index_of(positions)
    finite = np.all(np.isfinite(positions), axis=1)
    inside = finite & np.all((idx >= 0) & (idx < np.array(grid.shape)), axis=1)
    hist = np.zeros(grid.shape)
    np.add.at(hist, tuple(idx[inside].T), masses[inside])
    lost = float(np.sum(masses[~inside]))
    u = GridFunction(grid, hist / grid.cell_volume)
    return Density(u, float(np.sum(masses[inside])), lost)


def push_forward(u0, flow: FlowTable, t: float, grid: Optional[Grid] = None) -> Density:
    """Histogram of ``(Φ_t)_# (u0 dx)`` built from the flow nodes as particles.

    Each node carries mass ``u0(x_j) * cell`` of the node grid.  ``u0`` may be a
    :class:`GridFunction` (interpolated at nodes) or a callable on ``(N, d)``.
    """
    if flow.node_grid is None:
        raise ValueError("push-forward needs a flow on a node grid")
    if grid is None:
        grid = flow.node_grid
    if isinstance(u0, GridFunction):
        vals = u0.at(flow.nodes)
    else:
        vals = np.asarray(u0(flow.nodes), dtype=float)
    if np.any(vals < 0):
        raise ValueError("densities must be non-negative")
    masses = vals * flow.node_grid.cell_volume
    pos = flow.at(t)
    if flow.escaped is not None and np.any(flow.escaped):
        pos = np.where(flow.escaped[:, None], np.inf, pos)
    return deposit(pos, masses, grid)


@dataclass(frozen=True)
class ConcentrationRecord:
    max_cell_density: float
    lm_norm: float
    near_zero_mass_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def concentration_diagnostic(density: Density, m: float = 2.0,
                             radius: Optional[float] = None) -> ConcentrationRecord:
    """Peak cell density, ``L^m`` norm and mass fraction near the origin.

    ``radius`` defaults to half a cell, i.e. the cell containing 0.
    """
    u = density.u
    vals = u.values
    lm = u.integrate(np.abs(vals) ** m) ** (1.0 / m)
    pts = u.grid.points()
    r = np.sqrt(np.sum(pts * pts, axis=-1))
    rad = 0.5 * float(np.max(u.grid.h)) if radius is None else radius
    total = u.integrate()
    near = u.integrate(np.where(r <= rad + 1e-12, vals, 0.0))
    frac = near / total if total > 0 else 0.0
    return ConcentrationRecord(float(np.max(vals)), float(lm), float(frac))


def density_to_csv(density: Density, filename) -> None:
    g = density.grid
    pts = g.flat_points()
    data = np.column_stack([pts, density.u.values.reshape(-1)])
    header = ",".join([f"x{i + 1}" for i in range(g.d)] + ["u"])
    np.savetxt(filename, data, delimiter=",", header=header, comments="")
