"""Duality pairings, epsilon-gap sweeps, uniqueness and the supercritical battery.

Everything is written in the frame moving with the noise (the tilde frame),
where for a fixed path the equations are random PDEs.

* Forward: ``∂_t u + div(b~ u) + c~ u = 0``.  Its solution is carried by
  Lagrangian particles: particle ``j`` starts at node ``x_j`` with mass
  ``u0(x_j) * cell`` and moves with ``dY/dt = b~(t, Y)``; its mass decays by
  ``exp(-∫ c~)``.
* Dual: ``∂_s v + b~_eps·∇v - c~_eps v = 0`` with ``v(t_f, x) = v0(x + sigma W_{t_f})``.
  Along ``dz/dr = b~_eps(r, z)`` from ``(s, x)`` to ``t_f``,
  ``v(s, x) = v0(z(t_f) + sigma W_{t_f}) exp(-∫_s^{t_f} c~_eps)``; the gradient
  comes from the variational equation.

Then ``<u(t_f), v0(· + sigma W_{t_f})> - <u0, v(0)> = ∫_0^{t_f} <u, (b~ - b~_eps)·∇v
- (c~ - c~_eps) v> ds`` and the residual is the defect of that identity.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import integrate

from .fields import CATALOG, DriftSpec, ScalarSpec, catalog_spec, mollify
from .flow import DEFAULT_L, deposit, integrate_batch
from .grid import Box, Grid, GridFunction
from .paths import BrownianPath, PathBatch, TimeGrid, as_batch, sample_batch, sample_brownian
from .parallel import parallel_map


def _c_or_zero(c):
    return None if c is None or c.is_zero else c


def _heun_step(spec, t, tn, x, noise_k, noise_kn, dt, J=None, sgn=1.0):
    """One Heun step of ``dY/dt = b(t, Y + shift)`` (optionally with ``DY``)."""
    b1 = spec(t, x + noise_k)
    xp = x + sgn * dt * b1
    b2 = spec(tn, xp + noise_kn)
    xn = x + sgn * 0.5 * dt * (b1 + b2)
    if J is None:
        return xn, None
    D1 = spec.jacobian(t, x + noise_k)
    D2 = spec.jacobian(tn, xp + noise_kn)
    Jp = J + sgn * dt * np.einsum("...ij,...jk->...ik", D1, J)
    Jn = J + sgn * 0.5 * dt * (np.einsum("...ij,...jk->...ik", D1, J)
                               + np.einsum("...ij,...jk->...ik", D2, Jp))
    return xn, Jn


def _noise_at(path: BrownianPath, k: int) -> np.ndarray:
    return path.sigma * path.values[k]


# ---------------------------------------------------------------------------
# forward particles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleTimeline:
    """Forward solution as weighted particles at snapshot indices."""

    steps: np.ndarray       # grid indices of snapshots
    times: np.ndarray
    positions: np.ndarray   # (S, N, d) in the tilde frame
    masses: np.ndarray      # (S, N)
    nodes: np.ndarray
    initial_mass: np.ndarray


def forward_particles(u0, spec: DriftSpec, c: Optional[ScalarSpec], path: BrownianPath,
                      t_f: float, grid: Grid, snapshots: Sequence[int]) -> ParticleTimeline:
    tg = path.grid
    kf = tg.index_of(t_f)
    snaps = sorted(set(int(k) for k in snapshots) | {0, kf})
    nodes = grid.flat_points()
    m0 = (u0.at(nodes) if isinstance(u0, GridFunction) else np.asarray(u0(nodes))) * grid.cell_volume
    c = _c_or_zero(c)
    y = nodes.copy()
    logw = np.zeros(len(nodes))
    pos, mass = [], []
    dt = tg.dt
    c_prev = c(0.0, y + _noise_at(path, 0)) if c is not None else None
    for k in range(kf + 1):
        if k in snaps:
            pos.append(y.copy())
            mass.append(m0 * np.exp(-logw))
        if k == kf:
            break
        y, _ = _heun_step(spec, tg.time(k), tg.time(k + 1), y, _noise_at(path, k), _noise_at(path, k + 1), dt)
        if c is not None:
            c_new = c(tg.time(k + 1), y + _noise_at(path, k + 1))
            logw += 0.5 * dt * (c_prev + c_new)
            c_prev = c_new
    steps = np.array(snaps)
    return ParticleTimeline(steps, np.array([tg.time(k) for k in snaps]), np.stack(pos), np.stack(mass),
                            nodes, m0)


# ---------------------------------------------------------------------------
# dual solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DualValues:
    values: np.ndarray     # (M,)
    gradients: np.ndarray  # (M, d)


def dual_at(spec_eps: DriftSpec, c_eps: Optional[ScalarSpec], v0: Callable, v0_grad: Callable,
            path: BrownianPath, t_f: float, s: float, points: np.ndarray,
            with_gradient: bool = True) -> DualValues:
    """``v_eps(s, x)`` and ``∇v_eps(s, x)`` at tilde-frame points by characteristics."""
    tg = path.grid
    ks, kf = tg.index_of(s), tg.index_of(t_f)
    if ks > kf:
        raise ValueError("s must not exceed t_f")
    c_eps = _c_or_zero(c_eps)
    z = np.array(points, dtype=float)
    d = z.shape[-1]
    if with_gradient and not spec_eps.smooth:
        raise ValueError("Jacobian needs mollified drift")
    J = np.broadcast_to(np.eye(d), z.shape + (d,)).copy() if with_gradient else None
    acc = np.zeros(z.shape[:-1])
    gacc = np.zeros(z.shape) if (with_gradient and c_eps is not None) else None
    dt = tg.dt

    def c_terms(k, zz, JJ):
        xs = zz + _noise_at(path, k)
        cv = c_eps(tg.time(k), xs)
        gv = None
        if JJ is not None:
            gv = np.einsum("...k,...ki->...i", c_eps.gradient(tg.time(k), xs), JJ)
        return cv, gv

    if c_eps is not None:
        cp, gp = c_terms(ks, z, J if gacc is not None else None)
    for k in range(ks, kf):
        z, J = _heun_step(spec_eps, tg.time(k), tg.time(k + 1), z, _noise_at(path, k),
                          _noise_at(path, k + 1), dt, J)
        if c_eps is not None:
            cn, gn = c_terms(k + 1, z, J if gacc is not None else None)
            acc += 0.5 * dt * (cp + cn)
            if gacc is not None:
                gacc += 0.5 * dt * (gp + gn)
            cp, gp = cn, gn
    xf = z + _noise_at(path, kf)
    decay = np.exp(-acc)
    val = v0(xf) * decay
    if not with_gradient:
        return DualValues(val, np.zeros(z.shape))
    grad = np.einsum("...k,...ki->...i", v0_grad(xf), J) * decay[..., None]
    if gacc is not None:
        grad = grad - val[..., None] * gacc
    return DualValues(val, grad)


@dataclass(frozen=True, eq=False)
class DualTimeline:
    times: np.ndarray
    grid: Grid
    values: List[GridFunction]


def solve_backward_dual(spec_eps: DriftSpec, c_eps: Optional[ScalarSpec], v0: Callable,
                        t_f: float, path: BrownianPath, grid: Grid,
                        times: Optional[Sequence[float]] = None) -> DualTimeline:
    """``v_eps(s, ·)`` on ``grid`` for each output time ``s`` (tilde frame)."""
    tg = path.grid
    if times is None:
        times = [tg.time(k) for k in np.linspace(0, tg.index_of(t_f), 11).round().astype(int)]
    pts = grid.flat_points()
    out = []
    for s in times:
        dv = dual_at(spec_eps, c_eps, v0, None, path, t_f, s, pts, with_gradient=False)
        out.append(GridFunction(grid, dv.values.reshape(grid.shape)))
    return DualTimeline(np.array(times, dtype=float), grid, out)


# ---------------------------------------------------------------------------
# residual
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualityResult:
    lhs_final: float     # <u(t_f), v0(· + sigma W_{t_f})>
    lhs_initial: float   # <u0, v_eps(0)>
    gap: float           # ∫ <u, (b~ - b~_eps)·∇v - (c~ - c~_eps) v> ds
    residual: float
    sup_gap: float = 0.0  # max over snapshots of sup |(b - b_eps)·∇v| on the particle cloud

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def duality_residual(u0, spec: DriftSpec, spec_eps: DriftSpec, c: Optional[ScalarSpec],
                     c_eps: Optional[ScalarSpec], v0: Callable, v0_grad: Callable,
                     path: BrownianPath, t_f: float, grid: Grid, n_snap: int = 40,
                     sup_norm: bool = False, sup_radius: float = math.inf) -> DualityResult:
    """Pairings and gap for one path; the gap's time integral is a trapezoid rule.

    With ``sup_norm`` the report also carries ``max |(b~ - b~_eps)·∇v_eps|`` over
    particles within ``sup_radius`` of the origin.
    """
    tg = path.grid
    kf = tg.index_of(t_f)
    snaps = np.unique(np.linspace(0, kf, n_snap + 1).round().astype(int))
    parts = forward_particles(u0, spec, c, path, t_f, grid, snaps)
    c_, ce_ = _c_or_zero(c), _c_or_zero(c_eps)
    wf = _noise_at(path, kf)
    lhs_final = float(np.sum(parts.masses[-1] * v0(parts.positions[-1] + wf)))
    v_init = dual_at(spec_eps, c_eps, v0, v0_grad, path, t_f, 0.0, parts.nodes, with_gradient=False)
    lhs_initial = float(np.sum(parts.initial_mass * v_init.values))
    integrand = []
    sup_val = 0.0
    for j, k in enumerate(parts.steps):
        tk = tg.time(k)
        y = parts.positions[j]
        w = parts.masses[j]
        live = w != 0
        if not np.any(live):
            integrand.append(0.0)
            continue
        y, w = y[live], w[live]
        x = y + _noise_at(path, k)
        dv = dual_at(spec_eps, c_eps, v0, v0_grad, path, t_f, tk, y, with_gradient=True)
        db = spec(tk, x) - spec_eps(tk, x)
        term = np.sum(db * dv.gradients, axis=-1)
        if c_ is not None or ce_ is not None:
            cc = (c_(tk, x) if c_ is not None else 0.0) - (ce_(tk, x) if ce_ is not None else 0.0)
            term = term - cc * dv.values
        integrand.append(float(np.sum(w * term)))
        if sup_norm:
            near = np.sqrt(np.sum(x * x, axis=-1)) <= sup_radius
            if np.any(near):
                sup_val = max(sup_val, float(np.max(np.abs(np.sum(db * dv.gradients, axis=-1)[near]))))
    gap = float(np.trapezoid(integrand, parts.times))
    return DualityResult(lhs_final, lhs_initial, gap, lhs_final - lhs_initial - gap, sup_val)


@dataclass
class DualitySweep:
    epsilons: list
    gaps: list
    residuals: list
    t_f: float
    v0_id: str
    path_id: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def decays(self, factor: float = 0.5) -> bool:
        return abs(self.gaps[-1]) < factor * abs(self.gaps[0])

    def inversions(self) -> int:
        g = np.abs(self.gaps)
        return int(np.sum(g[1:] > g[:-1]))


def gap_sweep(u0, spec: DriftSpec, c: Optional[ScalarSpec], epsilons: Sequence[float],
              v0: Callable, v0_grad: Callable, path: BrownianPath, t_f: float, grid: Grid,
              n_snap: int = 40, v0_id: str = "v0", mollified: Optional[Sequence[DriftSpec]] = None,
              c_eps: Optional[Sequence[Optional[ScalarSpec]]] = None) -> DualitySweep:
    eps = list(epsilons)
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    specs = mollified if mollified is not None else [mollify(spec, e) for e in eps]
    ces = c_eps if c_eps is not None else [c] * len(eps)
    gaps, res = [], []
    for se, ce in zip(specs, ces):
        r = duality_residual(u0, spec, se, c, ce, v0, v0_grad, path, t_f, grid, n_snap)
        gaps.append(r.gap)
        res.append(r.residual)
    return DualitySweep(eps, gaps, res, t_f, v0_id, path.path_id)


# ---------------------------------------------------------------------------
# uniqueness experiment
# ---------------------------------------------------------------------------


def _ode_residual(spec: DriftSpec, Y: Callable, t_end: float, n_check: int = 50) -> float:
    """``max_t |Y(t) - Y(0) - ∫_0^t b(Y(s)) ds|`` by adaptive quadrature."""
    worst = 0.0
    y0 = np.atleast_1d(Y(0.0))
    for t in np.linspace(0.0, t_end, n_check + 1)[1:]:
        comps = []
        for i in range(spec.d):
            val, _ = integrate.quad(lambda s: float(spec(s, np.atleast_1d(Y(s)))[i]), 0.0, t,
                                    epsabs=1e-13, epsrel=1e-13, limit=200)
            comps.append(val)
        worst = max(worst, float(np.max(np.abs(np.atleast_1d(Y(t)) - y0 - np.array(comps)))))
    return worst


@dataclass
class UniquenessReport:
    example_id: str
    sigma: float
    branch_residuals: dict = field(default_factory=dict)
    resolutions: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    identical_distance: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def halving_ratios(self) -> list:
        d = self.distances
        return [d[i + 1] / d[i] if d[i] > 0 else float("nan") for i in range(len(d) - 1)]


def escape_branch(alpha: float, direction: float = 1.0) -> Callable:
    """``Y(t) = ((1 - alpha) t)^(1/(1-alpha))`` leaving the origin."""
    return lambda t: np.array([direction * ((1 - alpha) * t) ** (1.0 / (1.0 - alpha))])


def _pipeline_density(spec, scheme_spec, path: BrownianPath, t_f: float, particles: np.ndarray,
                      masses: np.ndarray, grid: Grid, scheme: str) -> np.ndarray:
    kf = path.grid.index_of(t_f)
    noise = path.noise()[None, : kf + 1]
    tg = TimeGrid(path.grid.t0, t_f, kf)
    res = integrate_batch(scheme_spec, particles, noise, tg, scheme)
    return deposit(res.positions[-1, 0], masses, grid).u.values


def uniqueness_experiment(example_id: str, sigma: float, n_paths: int = 1,
                          resolutions: Sequence[float] = (2 ** -4, 2 ** -5, 2 ** -6),
                          t_f: float = 1.0, alpha: float = 0.5, seed: int = 0,
                          eps_factor: float = 1.0, comparison_h: float = 2 ** -3,
                          particle_h: float = 2 ** -11, support: float = 1.0) -> UniquenessReport:
    """Deterministic non-uniqueness and stochastic pipeline independence.

    At ``sigma = 0`` the null and escaping branches from the origin are
    checked against the integral form of the ODE.  For ``sigma != 0`` the
    push-forward of the uniform law on ``[-support, support]^d`` is computed
    by (A) the raw drift with the second-order tilde scheme at ``dt = h`` and
    (B) the drift mollified at ``eps = eps_factor * h`` with Euler-Maruyama at
    ``dt = h``, both under the same path, and compared in ``L^1`` on a fixed
    grid of spacing ``comparison_h``.
    """
    if example_id not in CATALOG:
        raise KeyError(f"unknown example {example_id!r}")
    spec = catalog_spec(example_id, alpha=alpha) if example_id != "cex-bessel" else catalog_spec(example_id)
    report = UniquenessReport(example_id, sigma)
    if sigma == 0:
        # exact zero only at the singular point, so tiny |Y| near t = 0 is not cut off
        spec = replace(spec, h_sing=0.0)
        if example_id in ("ex1-outward",):
            t_hit = 1.0 / (1.0 - alpha)  # escape branch reaches |Y| = 1
            report.branch_residuals["null"] = _ode_residual(spec, lambda t: np.zeros(spec.d), t_hit)
            report.branch_residuals["escape"] = _ode_residual(
                spec, lambda t: escape_branch(alpha)(t) * np.ones(spec.d) if spec.d == 1 else None,
                0.999 * t_hit)
        else:
            report.branch_residuals["null"] = _ode_residual(spec, lambda t: np.zeros(spec.d), 1.0)
        return report
    d = spec.d
    box = Box.cube(d, support)
    pgrid = Grid.with_spacing(box, particle_h)
    particles = pgrid.flat_points()
    masses = np.full(len(particles), pgrid.cell_volume / box.volume)
    cmp_grid = Grid.with_spacing(Box.cube(d, 8.0), comparison_h)
    dists = []
    for h in resolutions:
        tg = TimeGrid.with_step(t_f, h)
        total = 0.0
        for k in range(max(n_paths, 1)):
            path = sample_brownian(seed, k, tg, d, sigma)
            a = _pipeline_density(spec, spec, path, t_f, particles, masses, cmp_grid, "tilde_rk2")
            spec_b = mollify(spec, min(eps_factor * h, 0.5))
            b = _pipeline_density(spec, spec_b, path, t_f, particles, masses, cmp_grid, "euler_maruyama")
            total += float(np.sum(np.abs(a - b)) * cmp_grid.cell_volume)
        dists.append(total / max(n_paths, 1))
        report.resolutions.append(h)
    report.distances = dists
    tg = TimeGrid.with_step(t_f, resolutions[0])
    path = sample_brownian(seed, 0, tg, d, sigma)
    a1 = _pipeline_density(spec, spec, path, t_f, particles, masses, cmp_grid, "tilde_rk2")
    a2 = _pipeline_density(spec, spec, path, t_f, particles, masses, cmp_grid, "tilde_rk2")
    report.identical_distance = float(np.sum(np.abs(a1 - a2)) * cmp_grid.cell_volume)
    return report


# ---------------------------------------------------------------------------
# supercritical counterexample
# ---------------------------------------------------------------------------


@dataclass
class CounterexampleReport:
    beta: float
    sigma: float
    d: int
    M: float
    n_paths: int
    dt: float
    h_sing: float
    t: list
    second_moment: list
    second_moment_se: list
    near_zero_fraction: list
    initial_second_moment: float
    fit_window: float
    fitted_slope: float
    slope_se: float
    predicted_slope: float          # 1 - 2 beta
    itô_slope: float                # d - 2 beta
    collapse_time: Optional[float]
    predicted_collapse_time: float  # E|X_0|^2 / (2 beta - 1)
    itô_collapse_time: float        # E|X_0|^2 / (2 beta - d)
    floor: float
    residence_fraction: float
    h_zero: float
    hitting_fraction: float
    free_fraction_window: float = 1.0   # mean P(|X_t| >= h_zero) over the fit window
    regularized_rate: float = 0.0       # (d - 2 beta) * free_fraction_window
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["ito_slope"] = out.pop("itô_slope")
        out["ito_collapse_time"] = out.pop("itô_collapse_time")
        return out

    def series_to_csv(self, filename) -> None:
        data = np.column_stack([self.t, self.second_moment, self.second_moment_se, self.near_zero_fraction])
        np.savetxt(filename, data, delimiter=",", header="t,E|X|^2,SE,near_zero_fraction", comments="")

    def slope_matches(self, target: float, k: float = 3.0) -> bool:
        return abs(self.fitted_slope - target) <= k * self.slope_se


def _uniform_ball(n: int, d: int, M: float, seed: int) -> np.ndarray:
    from .paths import _normals

    g = _normals(seed, 2 ** 40 + 1, n * d).reshape(n, d)
    u = _normals(seed, 2 ** 40 + 2, n)
    from scipy.special import ndtr

    r = M * ndtr(u) ** (1.0 / d)
    return g / np.linalg.norm(g, axis=1, keepdims=True) * r[:, None]


def counterexample_run(beta: float, M: float = 1.0, n_paths: int = 10_000, d: int = 2,
                       T: Optional[float] = None, dt: float = 1e-3, h_sing: float = 1e-4,
                       seed: int = 0, floor_frac: float = 0.1, h_zero: float = 1e-3,
                       chunk: int = 2500, workers: int = 1,
                       scheme: str = "implicit") -> CounterexampleReport:
    """Simulate ``dX = -beta X/|X|^2 dt + dW`` with ``X_0`` uniform on the ball.

    ``scheme="implicit"`` treats the drift implicitly along the direction of
    ``Y = X + dW``: ``|X'|`` solves ``r^2 - |Y| r + beta dt = 0`` (larger root);
    when no root exists the step lands on the origin, where the drift is 0.
    ``scheme="explicit"`` is Euler-Maruyama with the drift replaced by
    ``-beta x / h_sing^2`` inside ``|x| < h_sing`` (magnitude at most
    ``beta / h_sing``); near the origin its steps overshoot by
    ``beta dt / h_sing``.  The slope of ``E|X_t|^2`` is the mean of per-path
    least-squares slopes over ``[0, fit_window]`` with
    ``fit_window = 0.25 E|X_0|^2 / (2 beta - 1)`` (``0.25 T`` when
    ``beta <= 1/2``); its standard error is the sample standard error.
    """
    warns = []
    if n_paths < 1000:
        warnings.warn("slope SE too large", RuntimeWarning)
        warns.append("slope SE too large")
    spec = catalog_spec("cex-bessel", d=d, beta=beta, cap=h_sing)
    m2_0 = M * M * d / (d + 2.0)
    t_pred = m2_0 / (2 * beta - 1) if beta > 0.5 else math.inf
    t_ito = m2_0 / (2 * beta - d) if 2 * beta > d else math.inf
    if T is None:
        T = 2.0 * t_pred if math.isfinite(t_pred) else 1.0
    tg = TimeGrid.with_step(T, dt)
    n = tg.n_steps
    window = 0.25 * t_pred if math.isfinite(t_pred) else 0.25 * T
    kw = max(2, int(round(window / tg.dt)))
    times = tg.times
    if scheme not in ("implicit", "explicit"):
        raise ValueError("scheme must be 'implicit' or 'explicit'")

    task = functools.partial(_counterexample_chunk, spec, tg, d=d, M=M, seed=seed, h_zero=h_zero,
                             kw=kw, beta=beta, scheme=scheme)
    chunks = [list(range(s, min(s + chunk, n_paths))) for s in range(0, n_paths, chunk)]
    parts = parallel_map(task, chunks, workers)
    sq_sum = np.sum([p["sq"] for p in parts], axis=0)
    sq2_sum = np.sum([p["sq2"] for p in parts], axis=0)
    near = np.sum([p["near"] for p in parts], axis=0)
    hit = np.sum([p["hit"] for p in parts])
    slopes = np.concatenate([p["slopes"] for p in parts])
    mean = sq_sum / n_paths
    var = np.maximum(sq2_sum / n_paths - mean ** 2, 0.0) * n_paths / max(n_paths - 1, 1)
    se = np.sqrt(var / n_paths)
    near_frac = near / n_paths
    m0 = float(mean[0])
    floor = floor_frac * m0
    below = np.flatnonzero(mean < floor)
    collapse = float(times[below[0]]) if below.size else None
    pre = times <= (collapse if collapse is not None else times[-1])
    residence = float(np.mean(near_frac[pre]))
    slope = float(np.mean(slopes))
    slope_se = float(np.std(slopes, ddof=1) / math.sqrt(len(slopes))) if len(slopes) > 1 else 0.0
    free = float(np.mean(1.0 - near_frac[: kw + 1]))
    return CounterexampleReport(beta, 1.0, d, M, n_paths, tg.dt, h_sing, times.tolist(), mean.tolist(),
                                se.tolist(), near_frac.tolist(), m0, float(times[kw]), slope, slope_se,
                                1.0 - 2.0 * beta, d - 2.0 * beta, collapse, t_pred, t_ito, floor,
                                residence, h_zero, float(hit) / n_paths, free, (d - 2.0 * beta) * free,
                                warns)


def _implicit_bessel_step(x, dW, beta, dt):
    y = x + dW
    ny = np.sqrt(np.sum(y * y, axis=1))
    disc = ny * ny - 4.0 * beta * dt
    r = np.where(disc >= 0, 0.5 * (ny + np.sqrt(np.maximum(disc, 0.0))), 0.0)
    scale = np.where(ny > 0, r / np.where(ny > 0, ny, 1.0), 0.0)
    return y * scale[:, None]


def _counterexample_chunk(spec, tg: TimeGrid, ids, *, d, M, seed, h_zero, kw, beta, scheme):
    from .paths import _normals

    n = tg.n_steps
    P = len(ids)
    x = _uniform_ball(len(ids) + ids[0], d, M, seed)[ids[0]:]
    sq = np.empty(n + 1)
    sq2 = np.empty(n + 1)
    near = np.empty(n + 1)
    sdt = math.sqrt(tg.dt)
    incr = np.stack([_normals(seed, 2 ** 32 + i, n * d).reshape(n, d) for i in ids], axis=1) * sdt
    r2 = np.sum(x * x, axis=1)
    sq[0], sq2[0], near[0] = r2.sum(), (r2 ** 2).sum(), np.sum(r2 < h_zero ** 2)
    # running sums for per-path least squares on [0, t_kw]
    tw = tg.times[: kw + 1]
    tbar = tw.mean()
    stt = np.sum((tw - tbar) ** 2)
    sty = (tw[0] - tbar) * r2
    hit = np.zeros(P, dtype=bool)
    for k in range(n):
        if scheme == "implicit":
            x = _implicit_bessel_step(x, incr[k], beta, tg.dt)
        else:
            x = x + tg.dt * spec(tg.time(k), x) + incr[k]
        r2 = np.sum(x * x, axis=1)
        hit |= r2 < h_zero ** 2
        sq[k + 1], sq2[k + 1], near[k + 1] = r2.sum(), (r2 ** 2).sum(), np.sum(r2 < h_zero ** 2)
        if k + 1 <= kw:
            sty = sty + (tw[k + 1] - tbar) * r2
    return {"sq": sq, "sq2": sq2, "near": near, "hit": int(hit.sum()), "slopes": sty / stt}
