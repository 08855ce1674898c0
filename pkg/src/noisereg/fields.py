"""Drift and scalar coefficient fields.

A :class:`DriftSpec` is ``b = b1 + b2`` with a rough part ``b1`` (the part
measured in the mixed ``L^q_t L^p_x`` norm) and a regular part ``b2`` with a
linear-growth bound ``|b2(t, x)| <= K (1 + |x|)``.  Both parts are built from
small field objects that know how to evaluate themselves and, where it makes
sense, their Jacobian.  Declared singular points always evaluate to zero.

All evaluation is vectorised over a leading batch: ``x`` has shape ``(..., d)``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, interpolate, signal

from .grid import Box, Grid, GridFunction

H_SING = 1e-8
CRITICAL_TOL = 1e-12


# ---------------------------------------------------------------------------
# vector field building blocks
# ---------------------------------------------------------------------------


def _norm(x):
    if x.shape[-1] == 1:
        return np.abs(x[..., 0])
    return np.sqrt(np.einsum("...i,...i->...", x, x))


class Field:
    """Vector field ``R x R^d -> R^d``."""

    d: int = 1
    smooth: bool = False
    time_dependent: bool = False
    linear: bool = False

    def __call__(self, t, x):
        raise NotImplementedError

    def jacobian(self, t, x):
        """``Db`` with shape ``(..., d, d)``; entry ``[k, i] = ∂_i b_k``."""
        raise NotImplementedError(f"{type(self).__name__} has no analytic Jacobian")

    def hessian(self, t, x):
        """``D²b`` with shape ``(..., d, d, d)``; entry ``[k, i, j] = ∂_i ∂_j b_k``."""
        raise NotImplementedError(f"{type(self).__name__} has no analytic Hessian")

    def radial_profile(self):
        """Return ``f`` with ``b(x) = f(|x|) x/|x|`` or ``None`` if not radial."""
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError


class ZeroField(Field):
    smooth = True
    linear = True

    def __init__(self, d: int):
        self.d = d

    def __call__(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.d,))

    def hessian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.d, self.d))

    def radial_profile(self):
        return lambda r: np.zeros_like(r)

    def to_dict(self):
        return {"kind": "zero"}


class LinearField(Field):
    """``b(x) = A x + v``."""

    smooth = True
    linear = True

    def __init__(self, matrix, offset=None):
        self.A = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.d = self.A.shape[0]
        self.v = np.zeros(self.d) if offset is None else np.asarray(offset, dtype=float)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self.v

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.A, x.shape[:-1] + (self.d, self.d)).copy()

    def hessian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.d, self.d))

    def radial_profile(self):
        if np.allclose(self.A, self.A[0, 0] * np.eye(self.d)) and not np.any(self.v):
            a = self.A[0, 0]
            return lambda r: a * r
        return None

    def to_dict(self):
        return {"kind": "linear", "matrix": self.A.tolist(), "offset": self.v.tolist()}


class PowerBall(Field):
    """``sign * 1_{0<|x|<=radius} |x|^alpha x/|x|``."""

    def __init__(self, d: int, alpha: float, sign: float = 1.0, radius: float = 1.0):
        self.d, self.alpha, self.sign, self.radius = d, float(alpha), float(sign), float(radius)
        self.smooth = False

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        inside = (r > 0) & (r <= self.radius)
        safe = np.where(inside, r, 1.0)
        scale = np.where(inside, self.sign * safe ** (self.alpha - 1.0), 0.0)
        return x * scale[..., None]

    def jacobian(self, t, x):
        # s r^(a-1) (I + (a-1) x̂ x̂ᵀ), valid for 0 < r < radius
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        inside = (r > 0) & (r <= self.radius)
        safe = np.where(inside, r, 1.0)
        xh = x / safe[..., None]
        outer = xh[..., :, None] * xh[..., None, :]
        eye = np.eye(self.d)
        J = self.sign * safe[..., None, None] ** (self.alpha - 1.0) * (eye + (self.alpha - 1.0) * outer)
        return np.where(inside[..., None, None], J, 0.0)

    def radial_profile(self):
        a, s, R = self.alpha, self.sign, self.radius
        return lambda r: np.where((r > 0) & (r <= R), s * np.abs(r) ** a, 0.0)

    def to_dict(self):
        return {"kind": "power_ball", "alpha": self.alpha, "sign": self.sign, "radius": self.radius}


class GluedPowerRough(Field):
    """``sign * 1_{0<|x|<=1} (|x|^alpha - |x|) x/|x|``: the bounded remainder
    after splitting the linear part off the glued power field."""

    def __init__(self, d: int, alpha: float, sign: float = 1.0):
        self.d, self.alpha, self.sign = d, float(alpha), float(sign)
        self.smooth = False

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        inside = (r > 0) & (r <= 1.0)
        safe = np.where(inside, r, 1.0)
        scale = np.where(inside, self.sign * (safe ** (self.alpha - 1.0) - 1.0), 0.0)
        return x * scale[..., None]

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        inside = (r > 0) & (r <= 1.0)
        safe = np.where(inside, r, 1.0)
        xh = x / safe[..., None]
        outer = xh[..., :, None] * xh[..., None, :]
        eye = np.eye(self.d)
        J = self.sign * (safe[..., None, None] ** (self.alpha - 1.0) * (eye + (self.alpha - 1.0) * outer) - eye)
        return np.where(inside[..., None, None], J, 0.0)

    def hessian(self, t, x):
        if self.d != 1:
            return super().hessian(t, x)
        s = np.asarray(x, dtype=float)[..., 0]
        r = np.abs(s)
        inside = (r > 0) & (r <= 1.0)
        safe = np.where(inside, r, 1.0)
        a = self.alpha
        out = np.where(inside, self.sign * a * (a - 1.0) * safe ** (a - 2.0) * np.sign(s), 0.0)
        return out[..., None, None, None]

    def radial_profile(self):
        a, s = self.alpha, self.sign
        return lambda r: np.where((r > 0) & (r <= 1.0), s * (np.abs(r) ** a - np.abs(r)), 0.0)

    def to_dict(self):
        return {"kind": "glued_power", "alpha": self.alpha, "sign": self.sign}


class BesselDrift(Field):
    """``-beta x / |x|^2``; inside ``|x| < cap`` replaced by ``-beta x / cap^2``."""

    def __init__(self, d: int, beta: float, cap: float = 0.0):
        self.d, self.beta, self.cap = d, float(beta), float(cap)
        self.smooth = False

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        denom = np.maximum(r2, self.cap * self.cap)
        safe = np.where(denom > 0, denom, 1.0)
        return np.where((denom > 0)[..., None], -self.beta * x / safe[..., None], 0.0)

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        eye = np.eye(self.d)
        safe = np.where(r2 > 0, r2, 1.0)
        outer = x[..., :, None] * x[..., None, :] / safe[..., None, None]
        J = -self.beta / safe[..., None, None] * (eye - 2.0 * outer)
        if self.cap > 0:
            Jcap = np.broadcast_to(-self.beta / self.cap ** 2 * eye, J.shape)
            J = np.where((r2 < self.cap ** 2)[..., None, None], Jcap, J)
        return J

    def radial_profile(self):
        b, c = self.beta, self.cap
        return lambda r: np.where(r > 0, -b * np.abs(r) / np.maximum(r * r, c * c + 1e-300), 0.0)

    def to_dict(self):
        return {"kind": "bessel", "beta": self.beta, "cap": self.cap}


def _half_plane_sign(x):
    # +1 on A = {x1 > 0 or (x1 = 0, x2 > 0)}, -1 elsewhere
    x1, x2 = x[..., 0], x[..., 1]
    in_a = (x1 > 0) | ((x1 == 0) & (x2 > 0))
    return np.where(in_a, 1.0, -1.0)


class MixedField(Field):
    """Outward field on the half plane ``A``, inward field on its complement (d=2)."""

    d = 2

    def __init__(self, alpha: float):
        self.alpha = float(alpha)
        self._out = PowerBall(2, alpha, 1.0)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        base = np.where((r > 1.0)[..., None], x, self._out(t, x))
        return _half_plane_sign(x)[..., None] * base

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        J = np.where((r > 1.0)[..., None, None], np.eye(2), self._out.jacobian(t, x))
        return _half_plane_sign(x)[..., None, None] * J

    def to_dict(self):
        return {"kind": "mixed", "alpha": self.alpha}


class SumField(Field):
    def __init__(self, parts: Sequence[Field]):
        parts = [p for p in parts]
        if not parts:
            raise ValueError("empty sum")
        self.parts = parts
        self.d = parts[0].d
        self.smooth = all(p.smooth for p in parts)
        self.linear = all(p.linear for p in parts)
        self.time_dependent = any(p.time_dependent for p in parts)

    def __call__(self, t, x):
        out = self.parts[0](t, x)
        for p in self.parts[1:]:
            out = out + p(t, x)
        return out

    def jacobian(self, t, x):
        out = self.parts[0].jacobian(t, x)
        for p in self.parts[1:]:
            out = out + p.jacobian(t, x)
        return out

    def hessian(self, t, x):
        out = self.parts[0].hessian(t, x)
        for p in self.parts[1:]:
            out = out + p.hessian(t, x)
        return out

    def radial_profile(self):
        profiles = [p.radial_profile() for p in self.parts]
        if any(f is None for f in profiles):
            return None
        return lambda r: sum(f(r) for f in profiles)

    def to_dict(self):
        return {"kind": "sum", "parts": [p.to_dict() for p in self.parts]}


class FunctionField(Field):
    """Wrap user callables ``fn(t, x)`` (and optionally ``jac(t, x)``)."""

    def __init__(self, d: int, fn: Callable, jac: Optional[Callable] = None,
                 smooth: bool = False, time_dependent: bool = False):
        self.d, self.fn, self.jac = d, fn, jac
        self.smooth = smooth
        self.time_dependent = time_dependent

    def __call__(self, t, x):
        return np.asarray(self.fn(t, np.asarray(x, dtype=float)), dtype=float)

    def jacobian(self, t, x):
        if self.jac is None:
            raise NotImplementedError("no Jacobian supplied")
        return np.asarray(self.jac(t, np.asarray(x, dtype=float)), dtype=float)

    def to_dict(self):
        raise ValueError("function fields are not serialisable")


class UniformCubic:
    """Not-a-knot cubic spline on a uniform table, evaluated by direct lookup."""

    def __init__(self, xs: np.ndarray, values: np.ndarray):
        cs = interpolate.CubicSpline(xs, values)
        self.x0 = float(xs[0])
        self.h = float(xs[1] - xs[0])
        self.n = len(xs)
        self.c = np.ascontiguousarray(cs.c)  # (4, n-1), highest power first

    def __call__(self, x, nu: int = 0):
        x = np.asarray(x, dtype=float)
        i = np.clip(((x - self.x0) / self.h).astype(np.int64), 0, self.n - 2)
        s = x - (self.x0 + i * self.h)
        c3, c2, c1, c0 = self.c[0][i], self.c[1][i], self.c[2][i], self.c[3][i]
        if nu == 0:
            return ((c3 * s + c2) * s + c1) * s + c0
        if nu == 1:
            return (3 * c3 * s + 2 * c2) * s + c1
        if nu == 2:
            return 6 * c3 * s + 2 * c2
        if nu == 3:
            return 6 * c3
        return np.zeros_like(x)


class Tabulated1D(Field):
    """Smooth 1-d field from a cubic spline through samples on a uniform table.

    Outside the table the field equals ``fallback`` (default zero).
    """

    d = 1
    smooth = True

    def __init__(self, xs: np.ndarray, values: np.ndarray, fallback: Optional[Field] = None):
        self.lo, self.hi = float(xs[0]), float(xs[-1])
        self.spline = UniformCubic(xs, values)
        self.fallback = fallback

    def _eval(self, nu, x):
        s = np.asarray(x, dtype=float)[..., 0]
        inside = (s >= self.lo) & (s <= self.hi)
        out = self.spline(s, nu)
        if inside.all():
            return out, None
        out = np.where(inside, out, 0.0)
        return out, inside

    def __call__(self, t, x):
        out, inside = self._eval(0, x)
        if inside is not None and self.fallback is not None:
            out = np.where(inside, out, self.fallback(t, x)[..., 0])
        return out[..., None]

    def jacobian(self, t, x):
        out, inside = self._eval(1, x)
        if inside is not None and self.fallback is not None:
            out = np.where(inside, out, self.fallback.jacobian(t, x)[..., 0, 0])
        return out[..., None, None]

    def hessian(self, t, x):
        out, inside = self._eval(2, x)
        if inside is not None and self.fallback is not None:
            out = np.where(inside, out, self.fallback.hessian(t, x)[..., 0, 0, 0])
        return out[..., None, None, None]

    def third(self, t, x):
        return self._eval(3, x)[0]


class TabulatedRadial(Field):
    """``b(x) = g(|x|) x/|x|`` with ``g`` a quintic spline on ``[0, R]``."""

    smooth = True

    def __init__(self, d: int, rs: np.ndarray, g: np.ndarray, fallback: Optional[Field] = None):
        self.d = d
        self.R = float(rs[-1])
        self.spline = interpolate.make_interp_spline(rs, g, k=5)
        self._d1 = self.spline.derivative(1)
        self.fallback = fallback

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        inside = r <= self.R
        safe = np.where(r > 0, r, 1.0)
        gval = self.spline(np.minimum(r, self.R))
        out = np.where((inside & (r > 0))[..., None], x * (gval / safe)[..., None], 0.0)
        if self.fallback is not None and not np.all(inside):
            out = np.where(inside[..., None], out, self.fallback(t, x))
        return out

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        rc = np.minimum(r, self.R)
        safe = np.where(r > 1e-12, r, 1.0)
        g = self.spline(rc)
        gp = self._d1(rc)
        xh = x / safe[..., None]
        outer = xh[..., :, None] * xh[..., None, :]
        eye = np.eye(self.d)
        ratio = np.where(r > 1e-12, g / safe, gp)
        J = gp[..., None, None] * outer + ratio[..., None, None] * (eye - outer)
        J = np.where((r > 1e-12)[..., None, None], J, gp[..., None, None] * eye)
        J = np.where((r <= self.R)[..., None, None], J, 0.0)
        if self.fallback is not None and np.any(r > self.R):
            J = np.where((r <= self.R)[..., None, None], J, self.fallback.jacobian(t, x))
        return J


class TabulatedGrid2D(Field):
    """Smooth 2-d field from bicubic splines of each component on a grid."""

    d = 2
    smooth = True

    def __init__(self, axes, values):
        self.axes = axes
        self.splines = [interpolate.RectBivariateSpline(axes[0], axes[1], values[..., k], kx=3, ky=3)
                        for k in range(2)]
        self.lo = np.array([axes[0][0], axes[1][0]])
        self.hi = np.array([axes[0][-1], axes[1][-1]])

    def _call(self, x, dx=0, dy=0):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        inside = np.all((flat >= self.lo) & (flat <= self.hi), axis=1)
        c = np.clip(flat, self.lo, self.hi)
        out = np.stack([s.ev(c[:, 0], c[:, 1], dx=dx, dy=dy) for s in self.splines], axis=-1)
        out[~inside] = 0.0
        return out.reshape(x.shape)

    def __call__(self, t, x):
        return self._call(x)

    def jacobian(self, t, x):
        return np.stack([self._call(x, 1, 0), self._call(x, 0, 1)], axis=-1)


class Rescaled(Field):
    """``lam * base(lam^2 t, lam x)``."""

    def __init__(self, base: Field, lam: float):
        self.base, self.lam = base, float(lam)
        self.d = base.d
        self.smooth = base.smooth
        self.linear = base.linear
        self.time_dependent = base.time_dependent

    def __call__(self, t, x):
        lam = self.lam
        return lam * self.base(lam * lam * t, lam * np.asarray(x, dtype=float))

    def jacobian(self, t, x):
        lam = self.lam
        return lam * lam * self.base.jacobian(lam * lam * t, lam * np.asarray(x, dtype=float))

    def radial_profile(self):
        f = self.base.radial_profile()
        if f is None:
            return None
        return lambda r: self.lam * f(self.lam * r)

    def to_dict(self):
        return {"kind": "rescaled", "lam": self.lam, "base": self.base.to_dict()}


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.asarray(s, dtype=float)

    def f(u):
        safe = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / safe), 0.0)

    a, b = f(s), f(1.0 - s)
    return a / (a + b)


def _smooth_step_deriv(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    u = np.where(inside, s, 0.5)
    fa = np.exp(-1.0 / u)
    fb = np.exp(-1.0 / (1.0 - u))
    dfa = fa / u ** 2
    dfb = -fb / (1.0 - u) ** 2
    val = (dfa * (fa + fb) - fa * (dfa + dfb)) / (fa + fb) ** 2
    return np.where(inside, val, 0.0)


class Cutoff(Field):
    """``psi(|x|) base(x)`` with ``psi = 1`` on ``|x| <= r1`` and ``0`` beyond ``r2``."""

    def __init__(self, base: Field, r1: float, r2: float):
        self.base, self.r1, self.r2 = base, float(r1), float(r2)
        self.d = base.d
        self.smooth = base.smooth
        self.time_dependent = base.time_dependent

    def psi(self, x):
        r = _norm(np.asarray(x, dtype=float))
        return 1.0 - smooth_step((r - self.r1) / (self.r2 - self.r1))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        if np.all(r <= self.r1):
            return self.base(t, x)
        psi = 1.0 - smooth_step((r - self.r1) / (self.r2 - self.r1))
        return psi[..., None] * self.base(t, x)

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        if np.all(r <= self.r1):
            return self.base.jacobian(t, x)
        safe = np.where(r > 0, r, 1.0)
        dpsi = -_smooth_step_deriv((r - self.r1) / (self.r2 - self.r1)) / (self.r2 - self.r1)
        grad_psi = (dpsi / safe)[..., None] * x
        J = self.psi(x)[..., None, None] * self.base.jacobian(t, x)
        return J + self.base(t, x)[..., :, None] * grad_psi[..., None, :]

    def hessian(self, t, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        w = self.r2 - self.r1
        u = (r - self.r1) / w
        psi = 1.0 - smooth_step(u)
        d1 = -_smooth_step_deriv(u) / w
        eps = 1e-6
        d2 = -(_smooth_step_deriv(u + eps) - _smooth_step_deriv(u - eps)) / (2 * eps * w * w)
        safe = np.where(r > 0, r, 1.0)
        e = x / safe[..., None]
        eye = np.eye(self.d)
        grad = d1[..., None] * e
        hpsi = d2[..., None, None] * e[..., :, None] * e[..., None, :] \
            + (d1 / safe)[..., None, None] * (eye - e[..., :, None] * e[..., None, :])
        b = self.base(t, x)
        J = self.base.jacobian(t, x)
        H = psi[..., None, None, None] * self.base.hessian(t, x)
        H = H + J[..., :, :, None] * grad[..., None, None, :] + J[..., :, None, :] * grad[..., None, :, None]
        return H + b[..., :, None, None] * hpsi[..., None, :, :]


class TimeModulated(Field):
    """``a(t) * base(t, x)`` for a scalar time profile ``a``."""

    time_dependent = True

    def __init__(self, base: Field, profile: Callable[[float], float]):
        self.base, self.profile = base, profile
        self.d = base.d
        self.smooth = base.smooth

    def __call__(self, t, x):
        return self.profile(t) * self.base(t, x)

    def jacobian(self, t, x):
        return self.profile(t) * self.base.jacobian(t, x)


# ---------------------------------------------------------------------------
# scalar fields
# ---------------------------------------------------------------------------


class ScalarField:
    d: int = 1
    smooth: bool = True

    def __call__(self, t, x):
        raise NotImplementedError

    def gradient(self, t, x):
        raise NotImplementedError

    def hessian(self, t, x):
        raise NotImplementedError


class ConstantScalar(ScalarField):
    def __init__(self, d: int, value: float = 0.0):
        self.d, self.value = d, float(value)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.value)

    def gradient(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def hessian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.d,))


class DivergenceScalar(ScalarField):
    """``div b`` computed from the analytic Jacobian of ``b``."""

    def __init__(self, drift: Field):
        self.drift = drift
        self.d = drift.d
        self.smooth = drift.smooth

    def __call__(self, t, x):
        return np.trace(self.drift.jacobian(t, x), axis1=-2, axis2=-1)

    def gradient(self, t, x):
        H = self.drift.hessian(t, x)  # [k, i, j]
        return np.einsum("...kkj->...j", H)

    def hessian(self, t, x):
        if self.d != 1 or not hasattr(self.drift, "third"):
            raise NotImplementedError("second derivatives of div b only for 1-d tables")
        return self.drift.third(t, x)[..., None, None]


class FunctionScalar(ScalarField):
    def __init__(self, d: int, fn: Callable, grad: Optional[Callable] = None,
                 hess: Optional[Callable] = None, smooth: bool = True):
        self.d, self.fn, self.grad, self.hess = d, fn, grad, hess
        self.smooth = smooth

    def __call__(self, t, x):
        return np.asarray(self.fn(t, np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, t, x):
        if self.grad is None:
            raise NotImplementedError
        return np.asarray(self.grad(t, np.asarray(x, dtype=float)), dtype=float)

    def hessian(self, t, x):
        if self.hess is None:
            raise NotImplementedError
        return np.asarray(self.hess(t, np.asarray(x, dtype=float)), dtype=float)


class SplineScalar1D(ScalarField):
    d = 1

    def __init__(self, xs, values):
        self.lo, self.hi = float(xs[0]), float(xs[-1])
        self.spline = interpolate.make_interp_spline(xs, values, k=5)

    def _ev(self, x, nu=0):
        s = np.asarray(x, dtype=float)[..., 0]
        inside = (s >= self.lo) & (s <= self.hi)
        return np.where(inside, self.spline(np.clip(s, self.lo, self.hi), nu), 0.0)

    def __call__(self, t, x):
        return self._ev(x)

    def gradient(self, t, x):
        return self._ev(x, 1)[..., None]

    def hessian(self, t, x):
        return self._ev(x, 2)[..., None, None]


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """``b = rough + regular`` with LPS exponents and singular points."""

    d: int
    rough: Field
    regular: Field
    p: float = math.inf
    q: float = 2.0
    singular_points: tuple = ()
    K: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    h_sing: float = H_SING

    def __post_init__(self):
        if self.rough.d != self.d or self.regular.d != self.d:
            raise ValueError("field parts must match the spec dimension")
        pts = tuple(tuple(float(v) for v in np.atleast_1d(s)) for s in self.singular_points)
        if any(len(s) != self.d for s in pts):
            raise ValueError("singular points must have dimension d")
        object.__setattr__(self, "singular_points", pts)

    @property
    def smooth(self) -> bool:
        return self.rough.smooth and self.regular.smooth

    @property
    def time_dependent(self) -> bool:
        return self.rough.time_dependent or self.regular.time_dependent

    def field(self) -> Field:
        return SumField([self.rough, self.regular])

    def __call__(self, t, x):
        return eval_drift(self, t, x)

    def jacobian(self, t, x):
        return jacobian_drift(self, t, x)

    def singular_mask(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mask = None
        for s in self.singular_points:
            hit = _norm(x - np.asarray(s)) < self.h_sing
            mask = hit if mask is None else mask | hit
        return np.zeros(x.shape[:-1], dtype=bool) if mask is None else mask

    def to_dict(self) -> dict:
        out = {"kind": self.params.get("kind", "custom"), "params": {k: v for k, v in self.params.items() if k != "kind"},
               "d": self.d, "p": _enc(self.p), "q": _enc(self.q),
               "singular_points": [list(s) for s in self.singular_points]}
        return out


def _enc(v):
    return "inf" if math.isinf(v) else v


def _dec(v):
    return math.inf if v in ("inf", "Infinity", None) else float(v)


def _check_point(spec_d: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != spec_d:
        raise ValueError(f"point has dimension {x.shape[-1] if x.ndim else 0}, expected {spec_d}")
    return x


def eval_drift(spec: DriftSpec, t: float, x) -> np.ndarray:
    """Evaluate ``b(t, x)``; zero within ``h_sing`` of declared singular points."""
    x = _check_point(spec.d, x)
    val = spec.rough(t, x) + spec.regular(t, x)
    if spec.singular_points:
        mask = spec.singular_mask(x)
        if mask.any():
            val = np.where(mask[..., None], 0.0, val)
    return val


def jacobian_drift(spec: DriftSpec, t: float, x) -> np.ndarray:
    x = _check_point(spec.d, x)
    J = spec.rough.jacobian(t, x) + spec.regular.jacobian(t, x)
    if spec.singular_points:
        J = np.where(spec.singular_mask(x)[..., None, None], 0.0, J)
    return J


def hessian_drift(spec: DriftSpec, t: float, x) -> np.ndarray:
    x = _check_point(spec.d, x)
    return spec.rough.hessian(t, x) + spec.regular.hessian(t, x)


@dataclass(frozen=True, eq=False)
class ScalarSpec:
    """Zeroth-order coefficient ``c``: zero (transport), ``div b`` (continuity) or custom."""

    d: int
    role: str = "zero"
    field: Optional[ScalarField] = None
    p: float = math.inf
    q: float = 2.0
    name: str = "c"

    def __post_init__(self):
        if self.role not in ("zero", "divergence", "custom"):
            raise ValueError(f"unknown scalar role {self.role!r}")
        if self.role == "zero" and self.field is None:
            object.__setattr__(self, "field", ConstantScalar(self.d, 0.0))
        if self.field is None:
            raise ValueError("scalar spec needs a field")

    @classmethod
    def zero(cls, d: int) -> "ScalarSpec":
        return cls(d, "zero")

    @classmethod
    def divergence_of(cls, drift: DriftSpec) -> "ScalarSpec":
        return cls(drift.d, "divergence", DivergenceScalar(drift.field()), drift.p, drift.q,
                   name=f"div {drift.name}")

    @classmethod
    def constant(cls, d: int, value: float) -> "ScalarSpec":
        return cls(d, "custom", ConstantScalar(d, value), name=f"c={value}")

    @property
    def is_zero(self) -> bool:
        return self.role == "zero" or (isinstance(self.field, ConstantScalar) and self.field.value == 0.0)

    def __call__(self, t, x):
        return self.field(t, _check_point(self.d, x))

    def gradient(self, t, x):
        return self.field.gradient(t, _check_point(self.d, x))

    def hessian(self, t, x):
        return self.field.hessian(t, _check_point(self.d, x))


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def power_field(d: int = 1, alpha: float = 0.5, sign: float = 1.0, name: str = "power") -> DriftSpec:
    """``sign * (1_{0<|x|<=1} |x|^alpha x̂ + 1_{|x|>1} x)``.

    Split as rough ``sign*1_{|x|<=1}(|x|^alpha - |x|) x̂`` (bounded, compact
    support) plus the Lipschitz part ``sign * x``.
    """
    rough = GluedPowerRough(d, alpha, sign)
    regular = LinearField(sign * np.eye(d))
    return DriftSpec(d, rough, regular, p=math.inf, q=2.0, singular_points=(np.zeros(d),), K=1.0,
                     name=name, params={"kind": "power", "alpha": alpha, "sign": sign})


def bessel_field(d: int = 2, beta: float = 1.0, cap: float = 0.0) -> DriftSpec:
    """``-beta |x|^-2 x``; supercritical for every admissible exponent pair."""
    p = 0.75 * d
    return DriftSpec(d, BesselDrift(d, beta, cap), ZeroField(d), p=p, q=math.inf,
                     singular_points=(np.zeros(d),), K=0.0, name="cex-bessel",
                     params={"kind": "bessel", "beta": beta, "cap": cap})


def mixed_field(alpha: float = 0.5) -> DriftSpec:
    return DriftSpec(2, MixedField(alpha), ZeroField(2), p=math.inf, q=2.0,
                     singular_points=(np.zeros(2),), K=0.0, name="ex3-mixed",
                     params={"kind": "mixed", "alpha": alpha})


def linear_field(matrix, offset=None, name: str = "linear") -> DriftSpec:
    lin = LinearField(matrix, offset)
    K = float(max(np.linalg.norm(lin.A, 2), np.linalg.norm(lin.v)))
    return DriftSpec(lin.d, ZeroField(lin.d), lin, K=K, name=name,
                     params={"kind": "linear", "matrix": lin.A.tolist(), "offset": lin.v.tolist()})


def zero_field(d: int) -> DriftSpec:
    return DriftSpec(d, ZeroField(d), ZeroField(d), name="zero", params={"kind": "zero"})


def constant_field(vector) -> DriftSpec:
    v = np.atleast_1d(np.asarray(vector, dtype=float))
    return DriftSpec(v.size, ZeroField(v.size), LinearField(np.zeros((v.size, v.size)), v),
                     K=float(np.linalg.norm(v)), name="constant",
                     params={"kind": "constant", "vector": v.tolist()})


def rotation_field() -> DriftSpec:
    return linear_field([[0.0, -1.0], [1.0, 0.0]], name="rotation")


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    description: str
    build: Callable[..., DriftSpec]
    admissible: str
    claims: str
    supercritical: bool = False


CATALOG = {
    "ex1-outward": CatalogEntry(
        "ex1-outward", "b(x) = 1_{0<|x|<=1}|x|^a x̂ + 1_{|x|>1} x (non-unique ODE from 0)",
        lambda d=1, alpha=0.5: power_field(d, alpha, 1.0, "ex1-outward"),
        "LPS(p,q) with d/p+2/q<=1 for every p when alpha>=0; needs alpha*p>-d otherwise",
        "non-uniqueness from x0=0 at sigma=0; path-by-path uniqueness and flow continuity at sigma!=0"),
    "ex2-inward": CatalogEntry(
        "ex2-inward", "b(x) = -1_{0<|x|<=1}|x|^a x̂ - 1_{|x|>1} x (coalescence at 0)",
        lambda d=1, alpha=0.5: power_field(d, alpha, -1.0, "ex2-inward"),
        "same as ex1-outward",
        "finite-time coalescence, shocks and mass concentration at sigma=0; none at sigma!=0"),
    "ex3-mixed": CatalogEntry(
        "ex3-mixed", "outward on the half plane A, inward on its complement (d=2)",
        lambda d=2, alpha=0.5: mixed_field(alpha),
        "LPS(p,q) locally, same exponents as ex1-outward",
        "discontinuous and concentrating deterministic flows; well-posed stochastic flow"),
    "cex-bessel": CatalogEntry(
        "cex-bessel", "b(x) = -beta |x|^-2 x (supercritical)",
        lambda d=2, beta=1.0, cap=0.0: bessel_field(d, beta, cap),
        "|x|^-1 is in L^p near 0 only for p<d, so d/p+2/q>1 always",
        "no solution from a diffuse law for beta>1/2; dE|X|^2/dt = d - 2 beta away from 0",
        supercritical=True),
}


def catalog_spec(field_id: str, **params) -> DriftSpec:
    try:
        entry = CATALOG[field_id]
    except KeyError:
        raise KeyError(f"unknown field id {field_id!r}; known: {sorted(CATALOG)}") from None
    return entry.build(**params)


def spec_from_dict(data: dict) -> DriftSpec:
    """Build a spec from its JSON document ``{kind, params, d, p, q, ...}``."""
    kind = data.get("kind")
    params = dict(data.get("params", {}))
    d = int(data.get("d", params.pop("d", 1)))
    if kind in CATALOG:
        spec = catalog_spec(kind, d=d, **params) if kind != "ex3-mixed" else catalog_spec(kind, **params)
    elif kind == "power":
        spec = power_field(d, params.get("alpha", 0.5), params.get("sign", 1.0))
    elif kind == "bessel":
        spec = bessel_field(d, params.get("beta", 1.0), params.get("cap", 0.0))
    elif kind == "mixed":
        spec = mixed_field(params.get("alpha", 0.5))
    elif kind == "linear":
        spec = linear_field(params["matrix"], params.get("offset"))
    elif kind == "constant":
        spec = constant_field(params["vector"])
    elif kind == "zero":
        spec = zero_field(d)
    elif kind == "rotation":
        spec = rotation_field()
    elif kind == "mollified":
        base = spec_from_dict(params["base"])
        return mollify(base, float(params["eps"]))
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    changes = {}
    if "p" in data:
        changes["p"] = _dec(data["p"])
    if "q" in data:
        changes["q"] = _dec(data["q"])
    if "singular_points" in data:
        changes["singular_points"] = tuple(tuple(s) for s in data["singular_points"])
    return replace(spec, **changes) if changes else spec


# ---------------------------------------------------------------------------
# classification and norms
# ---------------------------------------------------------------------------


def exponent_sum(d: int, p: float, q: float) -> float:
    return (0.0 if math.isinf(p) else d / p) + (0.0 if math.isinf(q) else 2.0 / q)


def classify(d: int, p: float, q: float, tol: float = CRITICAL_TOL) -> str:
    s = exponent_sum(d, p, q)
    if abs(s - 1.0) < tol:
        return "critical"
    return "subcritical" if s < 1.0 else "supercritical"


@dataclass(frozen=True)
class LpsReport:
    norm_value: float
    exponent_sum: float
    classification: str
    quadrature_error_estimate: float
    diverging: bool = False
    resolution: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ConditionReport:
    satisfied: bool
    case: str           # "subcritical", "critical", "critical-small" or "supercritical"
    exponent_sum: float
    rough_norm: float
    delta: Optional[float]
    reason: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_condition(spec: "DriftSpec", p: float, q: float, delta: Optional[float] = None,
                    box: Optional[Box] = None, resolution: int = 256, T: float = 1.0) -> ConditionReport:
    """Integrability condition on the rough part.

    The pair ``(p, q) = (d, inf)`` is admitted only under a smallness bound
    ``||b_rough|| <= delta``; the sharp ``delta`` is not computable here and
    must be supplied by the caller.
    """
    d = spec.d
    s = exponent_sum(d, p, q)
    label = classify(d, p, q)
    if not (p >= 2 and q >= 2):
        return ConditionReport(False, label, s, math.nan, delta, "need p >= 2 and q >= 2")
    rep = lps_norm(spec, p, q, box, resolution, T, part="rough")
    norm = rep.norm_value
    if label == "supercritical":
        return ConditionReport(False, label, s, norm, delta, "d/p + 2/q > 1")
    if rep.diverging:
        return ConditionReport(False, label, s, norm, delta, "rough part not integrable")
    if label == "critical" and math.isinf(q):
        if delta is None:
            return ConditionReport(False, "critical-small", s, norm, delta,
                                   "q = inf needs a smallness bound delta")
        ok = norm <= delta
        return ConditionReport(ok, "critical-small", s, norm, delta,
                               "norm within delta" if ok else "norm exceeds delta")
    return ConditionReport(True, label, s, norm, delta, "integrable")


def _magnitude_fn(obj, part: str):
    if isinstance(obj, DriftSpec):
        if part == "rough":
            fld = obj.rough
        elif part == "regular":
            fld = obj.regular
        else:
            return obj.d, (lambda t, x: _norm(eval_drift(obj, t, x)))
        sing = obj

        def fn(t, x):
            v = _norm(fld(t, x))
            return np.where(sing.singular_mask(x), 0.0, v) if sing.singular_points else v
        return obj.d, fn
    if isinstance(obj, ScalarSpec):
        return obj.d, (lambda t, x: np.abs(obj(t, x)))
    if isinstance(obj, Field):
        return obj.d, (lambda t, x: _norm(obj(t, x)))
    raise TypeError(f"cannot take a norm of {type(obj).__name__}")


def _time_dependent(obj) -> bool:
    return bool(getattr(obj, "time_dependent", False))


def _power_mean(vals, p: float, weight: float) -> float:
    """``(Σ |v|^p w)^(1/p)``, scaled by the maximum so large ``p`` cannot overflow."""
    top = float(np.max(vals)) if np.size(vals) else 0.0
    if top == 0.0 or not math.isfinite(top):
        return top
    return top * float(np.sum((vals / top) ** p) * weight) ** (1.0 / p)


def _mixed_norm(fn, d: int, p: float, q: float, box: Box, n: int, T: float, n_t: int,
                autonomous: bool) -> float:
    """Midpoint-rule ``(∫_0^T (∫_box |f|^p dx)^{q/p} dt)^{1/q}``."""
    widths = np.subtract(box.upper, box.lower) / n
    axes = [lo + (np.arange(n) + 0.5) * w for lo, w in zip(box.lower, widths)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    cell = float(np.prod(widths))

    def spatial(t):
        vals = fn(t, pts)
        if math.isinf(p):
            return float(np.max(vals))
        return _power_mean(vals, p, cell)

    if autonomous:
        s = spatial(0.0)
        if math.isinf(q):
            return s
        return T ** (1.0 / q) * s
    dt = T / n_t
    ts = (np.arange(n_t) + 0.5) * dt
    vals = np.array([spatial(t) for t in ts])
    if math.isinf(q):
        return float(np.max(vals))
    return _power_mean(vals, q, dt)


def lps_norm(obj, p: float, q: float, box: Optional[Box] = None, resolution: int = 256,
             T: float = 1.0, n_t: Optional[int] = None, part: str = "full") -> LpsReport:
    """Mixed ``L^q([0,T]; L^p(box))`` norm by composite midpoint quadrature.

    ``p = inf`` / ``q = inf`` use grid / time maxima, which are lower bounds for
    the essential supremum.  The error estimate is the change against half
    resolution; ``diverging`` is set when that change does not shrink under
    refinement (as for a non-integrable singularity).
    """
    d, fn = _magnitude_fn(obj, part)
    if p <= 0 or q <= 0:
        raise ValueError("exponents must be positive")
    box = box or Box.cube(d, 8.0)
    n_t = n_t or resolution
    autonomous = not _time_dependent(obj)
    fine = _mixed_norm(fn, d, p, q, box, resolution, T, n_t, autonomous)
    half = _mixed_norm(fn, d, p, q, box, max(resolution // 2, 1), T, max(n_t // 2, 1), autonomous)
    quarter = _mixed_norm(fn, d, p, q, box, max(resolution // 4, 1), T, max(n_t // 4, 1), autonomous)
    err = abs(fine - half)
    prev = abs(half - quarter)
    # convergent rules shrink the increment at least like h^(1/p); divergent
    # singular integrals grow it or keep it flat
    diverging = bool(fine > half > quarter and err > 0.8 * prev and err > 1e-3 * fine)
    return LpsReport(fine, exponent_sum(d, p, q), classify(d, p, q), err, diverging, resolution)


def lps_refinement(obj, p: float, q: float, box: Optional[Box] = None,
                   resolutions: Sequence[int] = (64, 128, 256, 512), **kw) -> list:
    return [lps_norm(obj, p, q, box, n, **kw).norm_value for n in resolutions]


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------


def rescale(spec: DriftSpec, lam: float) -> DriftSpec:
    """Parabolic rescaling ``b_lam(t, x) = lam * b(lam^2 t, lam x)``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    sing = tuple(tuple(np.asarray(s) / lam) for s in spec.singular_points)
    return DriftSpec(spec.d, Rescaled(spec.rough, lam), Rescaled(spec.regular, lam), spec.p, spec.q,
                     sing, spec.K * lam * max(lam, 1.0), f"{spec.name}@{lam:g}",
                     {"kind": "rescaled", "lam": lam, "base": spec.to_dict()})


@dataclass(frozen=True)
class ScalingCheck:
    lhs: float
    rhs: float
    relative_error: float
    quadrature_error_estimate: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.relative_error))


def scaling_identity_check(spec: DriftSpec, lam: float, p: float, q: float,
                           box: Optional[Box] = None, resolution: int = 256, T: float = 1.0,
                           part: str = "full") -> ScalingCheck:
    """Compare ``||b_lam||`` on ``[0, T/lam^2] x box/lam`` with ``lam^(1-(2/q+d/p)) ||b||``.

    The box shrinks with the field so that both sides integrate over the same
    physical region; on the whole space this is the exact identity.
    """
    box = box or Box.cube(spec.d, 8.0)
    base = lps_norm(spec, p, q, box, resolution, T, part=part)
    scaled = lps_norm(rescale(spec, lam), p, q, box.scaled(1.0 / lam), resolution, T / lam ** 2,
                      part=part)
    rhs = lam ** (1.0 - exponent_sum(spec.d, p, q)) * base.norm_value
    lhs = scaled.norm_value
    rel = abs(lhs - rhs) / rhs if rhs > 0 else abs(lhs)
    qerr = max(base.quadrature_error_estimate / max(base.norm_value, 1e-300),
               scaled.quadrature_error_estimate / max(lhs, 1e-300))
    return ScalingCheck(lhs, rhs, rel, qerr)


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------


def _bump_unnormalised(r):
    r = np.asarray(r, dtype=float)
    inside = r < 1.0
    safe = np.where(inside, 1.0 - r * r, 1.0)
    return np.where(inside, np.exp(-1.0 / safe), 0.0)


@functools.lru_cache(maxsize=None)
def bump_normalisation(d: int) -> float:
    """Constant making ``exp(-1/(1-|x|^2))`` a probability density on ``R^d``."""
    radial, _ = integrate.quad(lambda r: r ** (d - 1) * float(_bump_unnormalised(r)), 0.0, 1.0,
                               epsabs=1e-14, epsrel=1e-13)
    sphere = 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)
    return 1.0 / (sphere * radial)


def bump(x, eps: float = 1.0):
    """Standard mollifier ``rho_eps(x) = eps^-d rho(x/eps)`` at points ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return bump_normalisation(d) * _bump_unnormalised(_norm(x) / eps) / eps ** d


def _split_linear(fld: Field):
    if isinstance(fld, SumField):
        lin = [p for p in fld.parts if p.linear]
        rest = [p for p in fld.parts if not p.linear]
        return lin, rest
    return ([fld], []) if fld.linear else ([], [fld])


def _mollify_nonlinear_1d(parts, eps: float, R: float) -> Field:
    raw = SumField(parts)
    hf = eps / 32.0
    n = int(math.ceil((R + eps) / hf))
    xs = np.arange(-n, n + 1) * hf
    vals = raw(0.0, xs[:, None])[:, 0]
    k = np.arange(-32, 33) * hf
    kern = _bump_unnormalised(np.abs(k) / eps)
    kern /= kern.sum()
    conv = signal.fftconvolve(vals, kern, mode="valid")
    xc = xs[32:-32]
    return Tabulated1D(xc, conv, fallback=raw)


def _kernel_nodes(d: int, eps: float, per_radius: int):
    g = (np.arange(-per_radius, per_radius + 1) + 0.0) * (eps / per_radius)
    pts = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    w = _bump_unnormalised(_norm(pts) / eps)
    keep = w > 0
    w = w[keep]
    return pts[keep], w / w.sum()


def _mollify_radial(parts, d: int, eps: float, R: float) -> Field:
    raw = SumField(parts)
    ys, w = _kernel_nodes(d, eps, 16 if d == 2 else 8)
    hr = eps / 32.0
    rs = np.arange(0, int(math.ceil(R / hr)) + 1) * hr
    e1 = np.zeros(d)
    e1[0] = 1.0
    g = np.empty_like(rs)
    chunk = max(1, 200000 // len(w))
    for i in range(0, len(rs), chunk):
        r = rs[i:i + chunk]
        pts = r[:, None, None] * e1 - ys[None, :, :]
        vals = raw(0.0, pts)[..., 0]
        g[i:i + chunk] = vals @ w
    g[0] = 0.0
    return TabulatedRadial(d, rs, g, fallback=raw)


def _mollify_grid_2d(parts, eps: float, box: Box) -> Field:
    raw = SumField(parts)
    h = eps / 4.0
    extent = max(box.radius, 1.0) + eps
    n = int(math.ceil(2 * extent / h)) + 1
    if n > 1025:
        warnings.warn(f"mollification table capped at 1025 nodes per axis (eps={eps})")
        n = 1025
        h = 2 * extent / (n - 1)
    ax = np.linspace(-extent, extent, n)
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1)
    vals = raw(0.0, pts)
    m = int(math.ceil(eps / h))
    kx = np.arange(-m, m + 1) * h
    kp = np.stack(np.meshgrid(kx, kx, indexing="ij"), axis=-1)
    kern = _bump_unnormalised(_norm(kp) / eps)
    kern /= kern.sum()
    out = np.stack([signal.fftconvolve(vals[..., c], kern, mode="same") for c in range(2)], axis=-1)
    inner = slice(m, n - m)
    return TabulatedGrid2D([ax[inner], ax[inner]], out[inner, inner])


def mollify(spec: DriftSpec, eps: float, box: Optional[Box] = None) -> DriftSpec:
    """Smooth, compactly supported approximation ``b_eps``.

    Each part is convolved with the standard bump of radius ``eps`` and
    multiplied by a smooth cutoff equal to one on ``|x| <= 1/(2 eps)`` and
    vanishing beyond ``|x| = 1/eps``.  Affine pieces are reproduced exactly by
    the symmetric kernel and are kept analytic; the rest is tabulated (1-d
    table, radial table, or 2-d grid) and interpolated with splines.
    """
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1); the cutoff at 1/eps would erase the field")
    if spec.time_dependent:
        raise NotImplementedError("tabulated mollification is for autonomous fields; "
                                  "use MollifiedQuadrature for time-dependent ones")
    box = box or Box.cube(spec.d, 8.0)
    r2 = 1.0 / eps
    r1 = 0.5 * r2
    reach = min(r2, 2.0 * box.radius + 2.0)

    def smooth_part(fld: Field) -> Field:
        lin, rest = _split_linear(fld)
        pieces = list(lin)
        if rest:
            if spec.d == 1:
                pieces.append(_mollify_nonlinear_1d(rest, eps, reach))
            elif all(p.radial_profile() is not None for p in rest):
                pieces.append(_mollify_radial(rest, spec.d, eps, reach))
            elif spec.d == 2:
                pieces.append(_mollify_grid_2d(rest, eps, box))
            else:
                raise NotImplementedError("non-radial mollification only in d <= 2")
        if not pieces:
            pieces = [ZeroField(spec.d)]
        return Cutoff(SumField(pieces), r1, r2)

    return DriftSpec(spec.d, smooth_part(spec.rough), smooth_part(spec.regular), spec.p, spec.q,
                     (), spec.K, f"{spec.name}~{eps:g}",
                     {"kind": "mollified", "eps": eps, "base": spec.to_dict()}, spec.h_sing)


class MollifiedQuadrature(Field):
    """Space(-time) convolution with the bump evaluated by tensor Gauss quadrature.

    Slow but table-free; works for time-dependent fields (the field is frozen
    at ``t = 0`` for negative times).
    """

    smooth = True

    def __init__(self, base: Field, eps: float, nodes: int = 24):
        self.base, self.eps = base, float(eps)
        self.d = base.d
        self.time_dependent = base.time_dependent
        g, w = np.polynomial.legendre.leggauss(nodes)
        grid = np.stack(np.meshgrid(*([g] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        wt = np.prod(np.stack(np.meshgrid(*([w] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d), axis=1)
        kw = wt * bump(grid)
        keep = kw > 0
        self.ys = grid[keep] * eps
        self.w = kw[keep] / kw[keep].sum()
        if self.time_dependent:
            self.ts = g * eps
            tw = w * bump(g[:, None])
            self.tw = tw / tw.sum()

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        pts = x[..., None, :] - self.ys
        if not self.time_dependent:
            return np.einsum("...kd,k->...d", self.base(t, pts), self.w)
        out = 0.0
        for s, ws in zip(self.ts, self.tw):
            out = out + ws * np.einsum("...kd,k->...d", self.base(max(t - s, 0.0), pts), self.w)
        return out

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        h = 1e-5 * self.eps
        cols = []
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = h
            cols.append((self(t, x + e) - self(t, x - e)) / (2 * h))
        return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# interpolation inequality ratio
# ---------------------------------------------------------------------------


def _lp(gf: GridFunction, values: np.ndarray, p: float) -> float:
    return gf.integrate(np.abs(values) ** p) ** (1.0 / p)


def interpolation_ratio(f: GridFunction, g: GridFunction, p: float) -> float:
    """Ratio of ``∫|fg|^2`` to the interpolation-inequality bound.

    For ``p > max(d, 2)`` the bound is
    ``||f||_p^2 ||g||_2^(2(1-d/p)) ||∇g||_2^(2d/p)``; for ``p = d >= 3`` it is
    ``||f||_d^2 ||∇g||_2^2``.
    """
    if f.grid != g.grid:
        raise ValueError("f and g must share a grid")
    d = f.grid.d
    if not (p > max(d, 2) or (p == d and d >= 3)):
        raise ValueError(f"p={p} outside the admissible range for d={d}")
    num = g.integrate((f.values * g.values) ** 2)
    fp2 = _lp(f, f.values, p) ** 2
    grad = g.gradient()
    dg2 = g.integrate(np.sum(grad * grad, axis=-1))
    if p == d:
        den = fp2 * dg2
    else:
        g2 = g.integrate(g.values ** 2)
        den = fp2 * g2 ** (1.0 - d / p) * dg2 ** (d / p)
    if not den > 0:
        raise ValueError("degenerate g")
    return num / den
