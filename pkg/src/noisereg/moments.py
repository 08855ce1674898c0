"""Closed parabolic systems for expected products of derivatives.

If ``u`` solves the transport equation with Stratonovich transport noise,
each derivative factor ``ν_a`` (``u``, ``∂_i u``, ``∂_i∂_j u``) solves

    ∂_t ν_a + b·∇ν_a + sigma ∇ν_a ∘ Ẇ = -Σ_b A_ab ν_b

for a lower-triangular coefficient matrix ``A``.  Products over a multiset
``K`` of factors therefore satisfy the same equation with ``Σ_{a∈K}`` in front,
and after the Itô correction the expectations ``ω_K = E[Π_{a∈K} ν_a]`` solve

    ∂_t ω_K + b·∇ω_K + Σ_{a∈K} Σ_b A_ab ω_{K∖a∪b} = (sigma^2 / 2) Δω_K,

which is closed among multisets of the same size.  The first-order system
(factors ``u, ∂_1 u, …, ∂_d u``) and the 1-d second-order system (factors
``u, u', u''``) are two instances of one engine.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .fields import DriftSpec, ScalarSpec, hessian_drift, jacobian_drift
from .grid import Grid, GridFunction
from .paths import TimeGrid, sample_batch, PathBatch
from .transport import solve_sgte_points


# ---------------------------------------------------------------------------
# multi-indices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Multiset over factor labels, stored as a sorted tuple."""

    items: tuple

    def __init__(self, items):
        object.__setattr__(self, "items", tuple(sorted(items)))

    @property
    def order(self) -> int:
        return len(self.items)

    def counts(self, labels: Sequence) -> tuple:
        c = Counter(self.items)
        return tuple(c[a] for a in labels)

    def replace(self, a, b) -> "MultiIndex":
        """``K ∖ a ∪ b`` (one copy of ``a`` swapped for ``b``)."""
        items = list(self.items)
        items.remove(a)
        items.append(b)
        return MultiIndex(items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __repr__(self):
        return "I" + "".join(str(a) for a in self.items) if all(isinstance(a, int) for a in self.items) \
            else "K" + str(list(self.items))


def enumerate_indices(d: int, m: int, lower: bool = False) -> List[MultiIndex]:
    """Canonical multi-indices over ``{0, …, d}`` of order ``m`` (or ``<= m``)."""
    if d < 1 or m < 0:
        raise ValueError("need d >= 1 and m >= 0")
    orders = range(1 if lower else m, m + 1)
    out = []
    for k in orders:
        out.extend(MultiIndex(c) for c in itertools.combinations_with_replacement(range(d + 1), k))
    return out


def pair_labels(d: int = 1) -> list:
    """Second-order factor labels ``(i, j)``, ``i >= j``: ``(0,0)=u``, ``(i,0)=∂_i u``, ``(i,j)=∂_i∂_j u``."""
    labels = [(0, 0)]
    labels += [(i, 0) for i in range(1, d + 1)]
    labels += [(i, j) for i in range(1, d + 1) for j in range(1, i + 1)]
    return labels


def canonical_pair(i: int, j: int) -> tuple:
    return (max(i, j), min(i, j))


def enumerate_pair_indices(d: int, m: int, lower: bool = False) -> List[MultiIndex]:
    labels = pair_labels(d)
    orders = range(1 if lower else m, m + 1)
    return [MultiIndex(c) for k in orders for c in itertools.combinations_with_replacement(labels, k)]


@dataclass
class MomentState:
    t: float
    values: Dict[MultiIndex, GridFunction]

    def __getitem__(self, key) -> GridFunction:
        return self.values[key if isinstance(key, MultiIndex) else MultiIndex(key)]


MomentState2 = MomentState


def _factor_values(u0: GridFunction, label) -> np.ndarray:
    d = u0.grid.d
    if isinstance(label, tuple):
        i, j = label
        beta = [0] * d
        if i:
            beta[i - 1] += 1
        if j:
            beta[j - 1] += 1
        return u0.derivative(beta)
    if label == 0:
        return np.asarray(u0.values)
    beta = [0] * d
    beta[label - 1] = 1
    return u0.derivative(beta)


def initial_moments(u0: GridFunction, d: int, m: int, all_orders: bool = True,
                    indices: Optional[Sequence[MultiIndex]] = None) -> MomentState:
    """``w_I(0) = Π_{i∈I} ∂_i u0`` by central differences (``∂_0`` is the identity)."""
    if u0.grid.d != d:
        raise ValueError("grid dimension does not match d")
    idx = indices if indices is not None else enumerate_indices(d, m, lower=all_orders)
    cache = {}
    vals = {}
    for I in idx:
        prod = np.ones(u0.grid.shape)
        for a in I:
            if a not in cache:
                cache[a] = _factor_values(u0, a)
            prod = prod * cache[a]
        vals[I] = GridFunction(u0.grid, prod)
    return MomentState(0.0, vals)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass
class Term:
    target: MultiIndex
    coef: np.ndarray
    tag: str
    note: str = ""


@dataclass
class MomentSystem:
    grid: Grid
    indices: List[MultiIndex]
    terms: Dict[MultiIndex, List[Term]]
    b: np.ndarray       # (*n, d)
    sigma: float

    def coupling_count(self, I: MultiIndex) -> int:
        return sum(1 for t in self.terms[I] if t.tag == "coupling")


def _coefficients(spec: DriftSpec, c: Optional[ScalarSpec], grid: Grid, t: float, second: bool):
    pts = grid.points()
    d = grid.d
    b = spec(t, pts)
    Db = jacobian_drift(spec, t, pts)  # [k, i] = ∂_i b_k
    if c is None or c.is_zero:
        cv = np.zeros(grid.shape)
        gc = np.zeros(grid.shape + (d,))
        hc = np.zeros(grid.shape + (d, d)) if second else None
    else:
        cv = c(t, pts)
        gc = c.gradient(t, pts)
        hc = c.hessian(t, pts) if second else None
    Hb = hessian_drift(spec, t, pts) if second else None
    return b, Db, cv, gc, Hb, hc


def assemble_first_order(spec: DriftSpec, c: Optional[ScalarSpec], sigma: float, grid: Grid,
                         m: int, t: float = 0.0) -> MomentSystem:
    """Terms of the first-order system for every ``|I| <= m``."""
    d = grid.d
    b, Db, cv, gc, _, _ = _coefficients(spec, c, grid, t, False)
    indices = enumerate_indices(d, m, lower=True)
    terms = {}
    for I in indices:
        lst = [Term(I, cv * I.order, "reaction", "c|I|")]
        for i in I.items:
            if i == 0:
                continue
            for k in range(1, d + 1):
                lst.append(Term(I.replace(i, k), Db[..., k - 1, i - 1], "coupling", f"d{i} b{k}"))
            lst.append(Term(I.replace(i, 0), gc[..., i - 1], "coupling", f"d{i} c"))
        terms[I] = lst
    _check_closure(indices, terms)
    return MomentSystem(grid, indices, terms, b, sigma)


def assemble_second_order(spec: DriftSpec, c: Optional[ScalarSpec], sigma: float, grid: Grid,
                          m: int, t: float = 0.0) -> MomentSystem:
    """Terms of the 1-d second-order system for every ``1 <= |K| <= m``.

    Factor equations (``b_0 := c``)::

        L u   = -c u
        L u'  = -(c' u + (b' + c) u')
        L u'' = -(c'' u + (b'' + 2c') u' + (2b' + c) u'')
    """
    if grid.d != 1:
        raise NotImplementedError("second-order moments are implemented for d = 1")
    b, Db, cv, gc, Hb, hc = _coefficients(spec, c, grid, t, True)
    b1 = Db[..., 0, 0]
    b2 = Hb[..., 0, 0, 0]
    c1 = gc[..., 0]
    c2 = hc[..., 0, 0]
    U, V, Z = (0, 0), (1, 0), (1, 1)
    A = {U: [(U, cv, "reaction")],
         V: [(U, c1, "coupling"), (V, b1 + cv, "reaction")],
         Z: [(U, c2, "coupling"), (V, b2 + 2 * c1, "coupling"), (Z, 2 * b1 + cv, "reaction")]}
    indices = enumerate_pair_indices(1, m, lower=True)
    terms = {}
    for K in indices:
        lst = []
        for a in K.items:
            for target, coef, tag in A[a]:
                lst.append(Term(K.replace(a, target), coef, tag, f"{a}->{target}"))
        terms[K] = lst
    _check_closure(indices, terms)
    return MomentSystem(grid, indices, terms, b, sigma)


def _check_closure(indices, terms):
    known = set(indices)
    for I, lst in terms.items():
        for t in lst:
            if t.target not in known or t.target.order != I.order:
                raise AssertionError(f"system not closed: {I} references {t.target}")


# ---------------------------------------------------------------------------
# IMEX time stepping
# ---------------------------------------------------------------------------


def max_stable_dt(h: float, sigma: float, bmax: float, safety: float = 1.0) -> float:
    lim = h / (bmax + 1.0)
    if sigma != 0:
        lim = min(lim, safety * h * h / sigma ** 2)
    return lim


def _laplacian(shape, h):
    """Dirichlet Laplacian on interior nodes."""
    mats = []
    for n, hh in zip(shape, h):
        k = n - 2
        mats.append(sparse.diags([np.ones(k - 1), -2 * np.ones(k), np.ones(k - 1)], [-1, 0, 1]) / hh ** 2)
    if len(mats) == 1:
        return mats[0].tocsc()
    eye = [sparse.identity(n - 2) for n in shape]
    L = sparse.kron(mats[0], eye[1]) + sparse.kron(eye[0], mats[1])
    return L.tocsc()


@dataclass
class MomentRun:
    timeline: List[MomentState]
    boundary_flag: bool
    boundary_max: float
    system: MomentSystem
    dt: float


def run_system(system: MomentSystem, init: MomentState, dt: float, T: float,
               save_times: Optional[Sequence[float]] = None, safety: float = 1.0,
               boundary_tol: float = 1e-8) -> MomentRun:
    """Advance ``∂_t w + b·∇w + Σ coef w_J = (σ²/2) Δw`` with implicit diffusion."""
    grid = system.grid
    if grid.d > 2:
        raise NotImplementedError("moment systems are implemented for d <= 2")
    h = grid.h
    bmax = float(np.max(np.abs(system.b))) if system.b.size else 0.0
    lim = max_stable_dt(float(np.min(h)), system.sigma, bmax, safety)
    if dt > lim * (1 + 1e-12):
        raise ValueError(f"time step {dt:g} violates the stability bound; use dt <= {lim:.3g}")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a multiple of dt")
    idx = system.indices
    pos = {I: j for j, I in enumerate(idx)}
    inner = tuple(slice(1, -1) for _ in range(grid.d))
    shape_in = tuple(n - 2 for n in grid.shape)
    nin = int(np.prod(shape_in))
    W = np.stack([np.asarray(init.values[I].values, dtype=float) for I in idx])
    # homogeneous Dirichlet data
    Wb = np.zeros_like(W)
    Wb[(slice(None),) + inner] = W[(slice(None),) + inner]
    W = Wb
    L = _laplacian(grid.shape, h)
    lu = splu((sparse.identity(nin, format="csc") - dt * 0.5 * system.sigma ** 2 * L).tocsc())
    # coupling as (target position, coefficient on the interior)
    couplings = [[(pos[t.target], np.asarray(t.coef)[inner]) for t in system.terms[I]] for I in idx]
    bin_ = [system.b[inner + (a,)] for a in range(grid.d)]
    saves = sorted(set(save_times)) if save_times is not None else [T]
    save_steps = {int(round(s / dt)): s for s in saves}
    timeline = []
    if 0 in save_steps:
        timeline.append(_state(grid, idx, W, 0.0))
    bmax_seen = 0.0
    edge = _edge_mask(grid.shape)
    his, los = [], []
    for a in range(grid.d):
        hi = [slice(None)] + [slice(1, -1)] * grid.d
        lo = [slice(None)] + [slice(1, -1)] * grid.d
        hi[1 + a] = slice(2, None)
        lo[1 + a] = slice(0, -2)
        his.append(tuple(hi))
        los.append(tuple(lo))
    full_inner = (slice(None),) + inner
    for step in range(1, n_steps + 1):
        Win = W[full_inner]
        adv = 0.0
        for a in range(grid.d):
            adv = adv + bin_[a] * (W[his[a]] - W[los[a]]) / (2 * h[a])
        rhs = Win - dt * adv
        for j in range(len(idx)):
            for k, coef in couplings[j]:
                rhs[j] -= dt * coef * Win[k]
        sol = lu.solve(rhs.reshape(len(idx), nin).T).T
        W[(slice(None),) + inner] = sol.reshape((len(idx),) + shape_in)
        bmax_seen = max(bmax_seen, float(np.max(np.abs(W[:, edge]))))
        if step in save_steps:
            timeline.append(_state(grid, idx, W, save_steps[step]))
    return MomentRun(timeline, bmax_seen > boundary_tol, bmax_seen, system, dt)


def _edge_mask(shape):
    """Nodes adjacent to the boundary (first interior layer)."""
    m = np.zeros(shape, dtype=bool)
    for a, n in enumerate(shape):
        sl = [slice(1, -1)] * len(shape)
        sl[a] = 1
        m[tuple(sl)] = True
        sl[a] = n - 2
        m[tuple(sl)] = True
    return m


def _state(grid, idx, W, t):
    return MomentState(t, {I: GridFunction(grid, W[j].copy()) for j, I in enumerate(idx)})


def solve_moment_system(spec: DriftSpec, c: Optional[ScalarSpec], sigma: float, u0: GridFunction,
                        m: int, dt: float, T: float, save_times: Optional[Sequence[float]] = None,
                        safety: float = 1.0) -> MomentRun:
    """Evolve ``w_I`` for all ``|I| <= m`` from ``u0``'s derivative products."""
    if sigma == 0:
        raise ValueError("the moment system needs sigma != 0")
    if not spec.smooth or spec.time_dependent:
        raise ValueError("the moment system needs a smooth autonomous (mollified) drift")
    system = assemble_first_order(spec, c, sigma, u0.grid, m)
    init = initial_moments(u0, u0.grid.d, m, indices=system.indices)
    return run_system(system, init, dt, T, save_times, safety)


def solve_moment_system_order2(spec: DriftSpec, c: Optional[ScalarSpec], sigma: float,
                               u0: GridFunction, m: int, dt: float, T: float,
                               save_times: Optional[Sequence[float]] = None,
                               safety: float = 1.0) -> MomentRun:
    if sigma == 0:
        raise ValueError("the moment system needs sigma != 0")
    if not spec.smooth or spec.time_dependent:
        raise ValueError("the moment system needs a smooth autonomous (mollified) drift")
    system = assemble_second_order(spec, c, sigma, u0.grid, m)
    init = initial_moments(u0, 1, m, indices=system.indices)
    return run_system(system, init, dt, T, save_times, safety)


# ---------------------------------------------------------------------------
# Monte Carlo cross-check
# ---------------------------------------------------------------------------


@dataclass
class MCEstimate:
    index: MultiIndex
    t: float
    probe: tuple
    mean: float
    se: float


def _stencil(d: int, delta: float):
    """Offsets: centre, ±δ e_i, and ±δ e_i ± δ e_j (i < j)."""
    offs = [np.zeros(d)]
    for i in range(d):
        for s in (1, -1):
            e = np.zeros(d)
            e[i] = s * delta
            offs.append(e)
    for i in range(d):
        for j in range(i + 1, d):
            for si in (1, -1):
                for sj in (1, -1):
                    e = np.zeros(d)
                    e[i], e[j] = si * delta, sj * delta
                    offs.append(e)
    return np.array(offs)


def _factors_from_stencil(u: np.ndarray, d: int, delta: float) -> dict:
    """Finite-difference factors from stencil values ``u`` of shape ``(P, Q, S)``."""
    f = {0: u[..., 0], (0, 0): u[..., 0]}
    for i in range(d):
        up, um = u[..., 1 + 2 * i], u[..., 2 + 2 * i]
        f[i + 1] = (up - um) / (2 * delta)
        f[(i + 1, 0)] = f[i + 1]
        f[(i + 1, i + 1)] = (up - 2 * u[..., 0] + um) / delta ** 2
    k = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            pp, pm, mp, mm = (u[..., k], u[..., k + 1], u[..., k + 2], u[..., k + 3])
            f[(j + 1, i + 1)] = (pp - pm - mp + mm) / (4 * delta ** 2)
            k += 4
    return f


def mc_moments(spec: DriftSpec, c: Optional[ScalarSpec], sigma: float, u0, indices,
               n_paths: int, times: Sequence[float], probes, time_grid: TimeGrid,
               seed: int = 0, delta: float = 1e-3, scheme: str = "tilde_rk2",
               chunk: int = 2000) -> List[MCEstimate]:
    """Monte-Carlo ``E[Π ∂ u]`` at probe points from per-path representation solutions.

    Index entries may be integer labels (first order) or pair labels
    ``(i, j)`` (second order); sequences are canonicalised to multisets.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    d = probes.shape[1]
    idx = [I if isinstance(I, MultiIndex) else MultiIndex(I) for I in indices]
    offs = _stencil(d, delta)
    pts = (probes[:, None, :] + offs[None, :, :]).reshape(-1, d)
    Q, S = probes.shape[0], offs.shape[0]
    deterministic = sigma == 0
    n_eff = 1 if deterministic else n_paths
    sums = {(I, t): np.zeros(Q) for I in idx for t in times}
    sq = {(I, t): np.zeros(Q) for I in idx for t in times}
    for start in range(0, n_eff, chunk):
        ids = range(start, min(start + chunk, n_eff))
        batch = sample_batch(seed, ids, time_grid, d, sigma, deterministic=deterministic)
        for t in times:
            if t == time_grid.t0:
                vals = np.asarray(u0(pts) if callable(u0) else u0.at(pts))[None].repeat(len(ids), 0)
            else:
                vals, _ = solve_sgte_points(u0, c, spec, batch, t, pts, scheme)
            fac = _factors_from_stencil(vals.reshape(len(ids), Q, S), d, delta)
            for I in idx:
                prod = np.ones((len(ids), Q))
                for a in I.items:
                    prod = prod * fac[a]
                sums[(I, t)] += prod.sum(axis=0)
                sq[(I, t)] += (prod ** 2).sum(axis=0)
    out = []
    for I in idx:
        for t in times:
            mean = sums[(I, t)] / n_eff
            if n_eff > 1:
                var = np.maximum(sq[(I, t)] / n_eff - mean ** 2, 0.0) * n_eff / (n_eff - 1)
                se = np.sqrt(var / n_eff)
            else:
                se = np.zeros(Q)
            for q in range(Q):
                out.append(MCEstimate(I, float(t), tuple(probes[q]), float(mean[q]), float(se[q])))
    return out


def compare_with_mc(run: MomentRun, estimates: Sequence[MCEstimate]) -> List[dict]:
    """Rows ``{index, t, probe, pde, mc, se, z}``."""
    by_t = {round(s.t, 12): s for s in run.timeline}
    rows = []
    for e in estimates:
        state = by_t.get(round(e.t, 12))
        if state is None or e.index not in state.values:
            continue
        pde = float(state.values[e.index].at(np.array([e.probe]))[0])
        z = (pde - e.mean) / e.se if e.se > 0 else (0.0 if pde == e.mean else math.inf)
        rows.append({"index": repr(e.index), "t": e.t, "probe": list(e.probe), "pde": pde,
                     "mc": e.mean, "se": e.se, "z": z})
    return rows


def timeline_to_columnar(run: MomentRun, filename) -> None:
    """Persist a moment timeline in the flow-table binary layout.

    Header ``(d, n_nodes, n_times)`` where the node axis stacks all indices;
    the JSON sidecar lists index order, times and the grid.
    """
    import json
    from pathlib import Path

    grid = run.timeline[0].values[run.system.indices[0]].grid
    idx = run.system.indices
    data = np.stack([np.stack([s.values[I].values.reshape(-1) for I in idx]) for s in run.timeline])
    K = data.shape[0]
    flat = data.reshape(K, -1, 1)
    filename = Path(filename)
    with open(filename, "wb") as fh:
        np.array([1, flat.shape[1], K], dtype="<i8").tofile(fh)
        np.ascontiguousarray(flat, dtype="<f8").tofile(fh)
    meta = {"indices": [list(I.items) for I in idx], "times": [s.t for s in run.timeline],
            "grid": {"box": grid.box.to_dict(), "n": list(grid.n)}}
    filename.with_suffix(filename.suffix + ".json").write_text(json.dumps(meta))
