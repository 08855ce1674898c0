"""Stochastic transport / continuity equations along characteristics.

For one noise path the generalised transport equation

    du + (b·∇u + c u) dt + sigma ∇u ∘ dW = 0

is solved by ``u(t, x) = u0(X_0) exp(-∫_0^t c(s, X_s) ds)`` where ``X_s`` is
the characteristic through ``(t, x)`` run backwards:
``dX_s = b(s, X_s) ds + sigma dW_s`` with ``X_t = x``.  The sign of the
exponent is checked against a discrete weak-form residual in
:func:`validate_exponent_sign` (``c = div b`` must reproduce the push-forward
density).  ``c = 0`` gives the transport equation, ``c = div b`` the
continuity equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import DriftSpec, ScalarSpec
from .flow import DEFAULT_L, SCHEMES
from .grid import Grid, GridFunction
from .paths import BrownianPath, PathBatch, TimeGrid, as_batch, sample_batch


@dataclass(frozen=True)
class WeightSpec:
    """``chi(x) = (1 + |x|^2)^(s/2)``."""

    s: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return (1.0 + np.sum(x * x, axis=-1)) ** (0.5 * self.s)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return (self.s * (1.0 + r2) ** (0.5 * self.s - 1.0))[..., None] * x


# ---------------------------------------------------------------------------
# backward characteristics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Characteristics:
    """Feet ``X_0`` of backward characteristics and the accumulated ``∫ c``."""

    feet: np.ndarray        # (P, M, d)
    c_integral: np.ndarray  # (P, M)
    touched: np.ndarray     # (P, M) bool: entered a singular ball
    escaped: np.ndarray     # (P, M) bool


def backward_characteristics(spec: DriftSpec, c: Optional[ScalarSpec], noise: np.ndarray,
                             grid: TimeGrid, t: float, points: np.ndarray,
                             scheme: str = "tilde_rk2", guard: float = 10 * DEFAULT_L,
                             touch_radius: float = 0.0) -> Characteristics:
    """Run ``dX = b dt + sigma dW`` backwards from ``X_t = points`` to ``t0``.

    ``noise`` is ``sigma W`` with shape ``(P, n + 1, d)``; ``points`` is
    ``(M, d)`` or ``(P, M, d)``.  ``∫_0^t c(s, X_s) ds`` uses the trapezoid
    rule on the visited states.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    k_end = grid.index_of(t)
    P = noise.shape[0]
    x = np.asarray(points, dtype=float)
    if x.ndim == 2:
        x = np.broadcast_to(x, (P,) + x.shape)
    x = np.array(x)
    dt = grid.dt
    use_c = c is not None and not c.is_zero
    acc = np.zeros(x.shape[:2])
    touched = np.zeros(x.shape[:2], dtype=bool)
    escaped = np.zeros(x.shape[:2], dtype=bool)
    sing = [np.asarray(s) for s in getattr(spec, "singular_points", ())]
    rad = max(touch_radius, getattr(spec, "h_sing", 0.0))

    def mark(y):
        nonlocal touched
        for s in sing:
            touched |= np.sqrt(np.sum((y - s) ** 2, axis=-1)) < rad

    mark(x)
    c_prev = c(grid.time(k_end), x) if use_c else None
    for k in range(k_end, 0, -1):
        tk, tp = grid.time(k), grid.time(k - 1)
        dW = (noise[:, k] - noise[:, k - 1])[:, None, :]
        b1 = spec(tk, x)
        if scheme == "euler_maruyama":
            xn = x - dt * b1 - dW
        else:
            xp = x - dt * b1 - dW
            xn = x - 0.5 * dt * (b1 + spec(tp, xp)) - dW
        out = np.sqrt(np.sum(xn * xn, axis=-1)) > guard
        escaped |= out
        xn = np.where(escaped[..., None], x, xn)
        if use_c:
            c_new = c(tp, xn)
            acc += 0.5 * dt * (c_prev + c_new)
            c_prev = c_new
        x = xn
        if sing:
            mark(x)
    return Characteristics(x, acc, touched, escaped)


@dataclass(frozen=True, eq=False)
class TransportSolution:
    u: GridFunction
    shock_mask: np.ndarray
    t: float
    path_id: str = ""


def _u0_eval(u0, pts):
    if isinstance(u0, GridFunction):
        return u0.at(pts)
    return np.asarray(u0(pts), dtype=float)


def solve_sgte_points(u0, c: Optional[ScalarSpec], spec: DriftSpec, batch: PathBatch, t: float,
                      points: np.ndarray, scheme: str = "tilde_rk2", exponent_sign: float = -1.0):
    """Representation-formula values ``u(t, points)`` for every path, shape ``(P, M)``."""
    ch = backward_characteristics(spec, c, batch.noise(), batch.grid, t, points, scheme)
    vals = _u0_eval(u0, ch.feet)
    return vals * np.exp(exponent_sign * ch.c_integral), ch


def solve_sgte(u0: GridFunction, c: Optional[ScalarSpec], spec: DriftSpec, path: BrownianPath,
               t: float, scheme: str = "tilde_rk2", exponent_sign: float = -1.0,
               grid: Optional[Grid] = None, stretch_tol: float = 1e3) -> TransportSolution:
    """``u(t, ·)`` on ``grid`` (default: the grid of ``u0``) for one path.

    Characteristics that reach a declared singular point, or (d=1) whose feet
    separate by more than ``stretch_tol`` cell widths between neighbouring
    nodes, mark the node as belonging to a shock region.
    """
    if spec.d > 2:
        raise NotImplementedError("transport solutions are available for d <= 2")
    grid = grid or u0.grid
    pts = grid.flat_points()
    vals, ch = solve_sgte_points(u0, c, spec, as_batch(path), t, pts, scheme, exponent_sign)
    mask = ch.touched[0].copy()
    if spec.d == 1 and len(pts) > 1:
        gap = np.abs(np.diff(ch.feet[0, :, 0]))
        big = gap > stretch_tol * grid.h[0]
        mask[:-1] |= big
        mask[1:] |= big
    mask = mask.reshape(grid.shape)
    return TransportSolution(GridFunction(grid, vals[0].reshape(grid.shape)), mask, t, path.path_id)


# ---------------------------------------------------------------------------
# sign check of the exponential factor
# ---------------------------------------------------------------------------


def weak_form_residual(u0: GridFunction, c: ScalarSpec, spec: DriftSpec, path: BrownianPath,
                       T: float, test_fn: Callable, test_grad: Callable, n_snap: int = 40,
                       exponent_sign: float = -1.0, scheme: str = "tilde_rk2") -> float:
    """Defect of the weak identity in the frame moving with the noise.

    With ``φ_t(y) = φ(y - sigma W_t)``:
    ``∫u(T)φ_T - ∫u0 φ = ∫_0^T ∫ u [b·∇φ_t + (div b - c) φ_t] dy dt``.
    The time integral uses the trapezoid rule over ``n_snap`` snapshots.
    """
    grid = u0.grid
    pts = grid.flat_points()
    tg = path.grid
    kT = tg.index_of(T)
    snaps = np.unique(np.linspace(0, kT, n_snap + 1).round().astype(int))
    div = ScalarSpec.divergence_of(spec)
    shift = path.noise()
    integrand = []
    pair = []
    for k in snaps:
        tk = tg.time(k)
        if k == 0:
            u = u0.at(pts)
        else:
            u, _ = solve_sgte_points(u0, c, spec, as_batch(path), tk, pts, scheme, exponent_sign)
            u = u[0]
        y = pts - shift[k]
        phi = test_fn(y)
        gphi = test_grad(y)
        bt = spec(tk, pts)
        src = np.sum(bt * gphi, axis=-1) + (div(tk, pts) - c(tk, pts)) * phi
        integrand.append(np.sum(u * src) * grid.cell_volume)
        pair.append(np.sum(u * phi) * grid.cell_volume)
    ts = np.array([tg.time(k) for k in snaps])
    rhs = np.trapezoid(integrand, ts)
    return float(abs(pair[-1] - pair[0] - rhs))


@dataclass(frozen=True)
class SignValidation:
    sign: float
    residual_minus: float
    residual_plus: float


def validate_exponent_sign(u0: GridFunction, c: ScalarSpec, spec: DriftSpec, path: BrownianPath,
                           T: float, test_fn: Callable, test_grad: Callable,
                           n_snap: int = 40) -> SignValidation:
    """Pick the exponent sign with the smaller weak-form residual."""
    rm = weak_form_residual(u0, c, spec, path, T, test_fn, test_grad, n_snap, -1.0)
    rp = weak_form_residual(u0, c, spec, path, T, test_fn, test_grad, n_snap, +1.0)
    return SignValidation(-1.0 if rm <= rp else 1.0, rm, rp)


# ---------------------------------------------------------------------------
# norms and diagnostics
# ---------------------------------------------------------------------------


def _multi_indices(d: int, order: int):
    out = [tuple([0] * d)]
    for o in range(1, order + 1):
        def rec(prefix, left, pos):
            if pos == d - 1:
                yield prefix + (left,)
                return
            for k in range(left, -1, -1):
                yield from rec(prefix + (k,), left - k, pos + 1)
        out.extend(rec((), o, 0))
    return out


def weighted_sobolev_norm(u: GridFunction, weight: WeightSpec, m: float, order: int = 0) -> float:
    """``Σ_{|β| <= order} ∫ |∂^β u|^m chi dx`` (no outer root)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    chi = weight(u.grid.points())
    total = 0.0
    for beta in _multi_indices(u.grid.d, order):
        total += u.integrate(np.abs(u.derivative(beta)) ** m * chi)
    return float(total)


@dataclass(frozen=True)
class ShockRecord:
    max_gradient: float
    gradient_location: tuple

    def to_dict(self) -> dict:
        return {"max_gradient": self.max_gradient, "gradient_location": list(self.gradient_location)}


def shock_diagnostic(u: GridFunction, mask: Optional[np.ndarray] = None) -> ShockRecord:
    """Largest central-difference gradient magnitude and where it occurs."""
    g = u.gradient()
    mag = np.sqrt(np.sum(g * g, axis=-1))
    j = np.unravel_index(int(np.argmax(mag)), mag.shape)
    loc = tuple(float(u.grid.axes[a][j[a]]) for a in range(u.grid.d))
    return ShockRecord(float(mag[j]), loc)


# ---------------------------------------------------------------------------
# a-priori monitor
# ---------------------------------------------------------------------------


@dataclass
class MonitorSeries:
    epsilon: float
    t: list
    M: list
    stderr: list

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "t": list(self.t), "M": list(self.M), "stderr": list(self.stderr)}

    @property
    def sup(self) -> float:
        return float(np.max(self.M))


def monitor_functional(u0, spec: DriftSpec, c: Optional[ScalarSpec], batch: PathBatch,
                       times: Sequence[float], grid: Grid, m: int, weight: WeightSpec,
                       n_batches: int = 10, scheme: str = "tilde_rk2"):
    """``M(t) = Σ_i ∫ E[(∂_i u)^m]^2 chi dx`` by Monte Carlo on ``grid``.

    Standard errors come from batch means of ``M`` over ``n_batches`` groups.
    """
    pts = grid.flat_points()
    chi = weight(pts)
    P = batch.n_paths
    nb = max(1, min(n_batches, P))
    groups = np.array_split(np.arange(P), nb)
    Ms, SEs = [], []
    for t in times:
        if t == batch.grid.t0:
            u = _u0_eval(u0, pts)[None].repeat(P, 0)
        else:
            u, _ = solve_sgte_points(u0, c, spec, batch, t, pts, scheme)
        du = [np.gradient(u.reshape((P,) + grid.shape), grid.h[a], axis=1 + a, edge_order=2)
              .reshape(P, -1) for a in range(grid.d)]
        powers = [g ** m for g in du]

        def functional(sel):
            return sum(float(np.sum(np.mean(p[sel], axis=0) ** 2 * chi) * grid.cell_volume)
                       for p in powers)

        Ms.append(functional(slice(None)))
        if nb > 1:
            vals = np.array([functional(g) for g in groups])
            SEs.append(float(np.std(vals, ddof=1) / math.sqrt(nb)))
        else:
            SEs.append(0.0)
    return Ms, SEs


def apriori_monitor(u0, specs: Sequence[DriftSpec], epsilons: Sequence[float],
                    cs: Optional[Sequence[Optional[ScalarSpec]]], sigma: float, m: int,
                    weight: WeightSpec, n_paths: int, times: Sequence[float], grid: Grid,
                    time_grid: TimeGrid, seed: int = 0, n_batches: int = 10):
    """One :class:`MonitorSeries` per ``eps``, all on common random numbers."""
    if m % 2:
        raise ValueError("m must be even")
    d = grid.d
    batch = sample_batch(seed, range(n_paths), time_grid, d, sigma, deterministic=(sigma == 0))
    if sigma == 0:
        batch = PathBatch(batch.grid, batch.values[:1], 0.0, seed, batch.stream_ids[:1])
    cs = cs if cs is not None else [None] * len(specs)
    out = []
    for spec, eps, c in zip(specs, epsilons, cs):
        Ms, SEs = monitor_functional(u0, spec, c, batch, times, grid, m, weight, n_batches)
        out.append(MonitorSeries(float(eps), [float(t) for t in times], Ms, SEs))
    return out


def bound_candidate(series: Sequence[MonitorSeries], u0: GridFunction, weight: WeightSpec,
                    m: int) -> dict:
    """Best-fit ``C`` with ``sup_t M_eps(t) <= C ||u0||^{2m}_{W^{1,2m}_chi}`` over the sweep."""
    ref = weighted_sobolev_norm(u0, weight, 2 * m, 1) ** (1.0 / (2 * m))
    sups = [s.sup for s in series]
    C = max(sups) / ref ** (2 * m) if ref > 0 else float("inf")
    return {"C": C, "u0_norm": ref, "sups": sups}


def solution_to_csv(sol: TransportSolution, filename) -> None:
    g = sol.u.grid
    data = np.column_stack([g.flat_points(), sol.u.values.reshape(-1)])
    header = ",".join([f"x{i + 1}" for i in range(g.d)] + ["u"])
    np.savetxt(filename, data, delimiter=",", header=header, comments="")
