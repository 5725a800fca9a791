"""Bounded domains in R^2 and R^3 with boundary parametrisations and quadrature.

Three kinds are supported:

* :class:`Box` -- tensor Gauss-Legendre in the volume, facewise on the boundary;
* :class:`RadialStar2D` -- ``center + r(theta) (cos theta, sin theta)``, polar
  pullback with Gauss in the radial fraction and the trapezoid rule in theta;
* :class:`ProductRadial3D` -- ``center + R(theta, phi) omega(theta, phi)`` with
  Gauss in ``s``, Gauss in ``cos phi`` and the trapezoid rule in ``theta``.

Quadrature level ``L`` uses ``4 + 6 L`` Gauss nodes per non-periodic axis
and twice (3-d) or four times (2-d) as many periodic nodes.  Error estimates
are ``|I(L) - I(L-1)|``.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

from .fields import DilationFamily, coords
from .symbolic import Expr, as_expr, const, cos, differentiate, evaluate_array, power, sin, var

TOL_GEOM = 1e-12
MIN_JACOBIAN = 1e-12


class DegenerateTangent(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    level: int = 3
    base: int = 4
    step: int = 6

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("refinement level must be >= 1")

    def order(self, level: int | None = None) -> int:
        lv = self.level if level is None else level
        return self.base + self.step * lv


@lru_cache(maxsize=None)
def _gauss01(k: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(k)
    return (x + 1) / 2, w / 2


@lru_cache(maxsize=None)
def _gauss(k: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(k)


def _periodic(k: int) -> tuple[np.ndarray, np.ndarray]:
    theta = 2 * np.pi * np.arange(k) / k
    return theta, np.full(k, 2 * np.pi / k)


class Domain:
    n: int

    def volume_rule(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def boundary_rule(self, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def boundary_samples(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def outward_normal(self, *param) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Box(Domain):
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) not in (2, 3):
            raise DomainError("boxes are supported in dimensions 2 and 3")
        if any(hi <= lo for lo, hi in b):
            raise DomainError(f"empty box {b}")

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    def _tensor(self, axes: Sequence[int], order: int):
        pts, wts = [], []
        for a in axes:
            x, w = _gauss01(order)
            lo, hi = self.bounds[a]
            pts.append(lo + (hi - lo) * x)
            wts.append((hi - lo) * w)
        grids = np.meshgrid(*pts, indexing="ij")
        wgrid = np.meshgrid(*wts, indexing="ij")
        return [g.ravel() for g in grids], np.prod(np.stack([g.ravel() for g in wgrid]), axis=0)

    def volume_rule(self, order):
        cols, w = self._tensor(range(self.n), order)
        return np.stack(cols, axis=1), w

    def _faces(self, make):
        pts, nrm, wts = [], [], []
        for axis in range(self.n):
            others = [a for a in range(self.n) if a != axis]
            for side in (0, 1):
                cols, w = make(others)
                P = np.empty((len(w), self.n))
                for a, c in zip(others, cols):
                    P[:, a] = c
                P[:, axis] = self.bounds[axis][side]
                N = np.zeros_like(P)
                N[:, axis] = 1.0 if side else -1.0
                pts.append(P)
                nrm.append(N)
                wts.append(w)
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(wts)

    def boundary_rule(self, order):
        return self._faces(lambda others: self._tensor(others, order))

    def boundary_samples(self, count):
        per_face = max(2, int(round((count / (2 * self.n)) ** (1 / (self.n - 1)))))

        def make(others):
            axes = [np.linspace(*self.bounds[a], per_face) for a in others]
            grids = np.meshgrid(*axes, indexing="ij")
            return [g.ravel() for g in grids], np.ones(grids[0].size)

        P, N, _ = self._faces(make)
        return P, N

    def outward_normal(self, *param) -> np.ndarray:
        point = np.asarray(param[0] if len(param) == 1 else param, dtype=float)
        hits = []
        for axis, (lo, hi) in enumerate(self.bounds):
            if abs(point[axis] - lo) <= 1e-12 * max(1.0, abs(lo)):
                hits.append((axis, -1.0))
            if abs(point[axis] - hi) <= 1e-12 * max(1.0, abs(hi)):
                hits.append((axis, 1.0))
        if len(hits) != 1:
            raise DegenerateTangent(f"point {point.tolist()} is not interior to a single face")
        N = np.zeros(self.n)
        N[hits[0][0]] = hits[0][1]
        return N


def _center(center, n: int) -> tuple[float, ...]:
    c = tuple(float(v) for v in center)
    if len(c) != n:
        raise DomainError(f"center {c} is not a point of R^{n}")
    return c


@dataclass(frozen=True)
class RadialStar2D(Domain):
    """Region ``{center + s r(theta) (cos theta, sin theta): 0 <= s < 1}``."""

    radius: Expr
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        r = as_expr(self.radius)
        object.__setattr__(self, "radius", r)
        object.__setattr__(self, "center", _center(self.center, 2))
        if not r.free_symbols <= {"theta"}:
            raise DomainError("radius must be an expression in theta only")
        th = 2 * np.pi * np.arange(256) / 256
        vals = self._r(th)
        if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
            raise DomainError("radius must be positive")
        ends = self._r(np.array([0.0, 2 * np.pi]))
        dends = self._dr(np.array([0.0, 2 * np.pi]))
        if abs(ends[0] - ends[1]) > 1e-10 * abs(ends[0]) or abs(dends[0] - dends[1]) > 1e-8 * (1 + abs(dends[0])):
            raise DomainError("radius must be 2*pi-periodic")

    n = 2

    def _r(self, theta):
        return np.broadcast_to(evaluate_array(self.radius, {"theta": theta}), np.shape(theta))

    def _dr(self, theta):
        return np.broadcast_to(evaluate_array(differentiate(self.radius, "theta"), {"theta": theta}), np.shape(theta))

    def _frame(self, theta):
        r, dr = self._r(theta), self._dr(theta)
        c, s = np.cos(theta), np.sin(theta)
        P = np.stack([self.center[0] + r * c, self.center[1] + r * s], axis=1)
        T = np.stack([dr * c - r * s, dr * s + r * c], axis=1)
        speed = np.hypot(T[:, 0], T[:, 1])
        if np.any(speed < MIN_JACOBIAN):
            raise DegenerateTangent("tangent vanishes on the boundary")
        N = np.stack([T[:, 1], -T[:, 0]], axis=1) / speed[:, None]
        return P, N, speed

    def volume_rule(self, order):
        s, ws = _gauss01(order)
        th, wt = _periodic(4 * order)
        r = self._r(th)
        S, TH = np.meshgrid(s, th, indexing="ij")
        R = np.broadcast_to(r, S.shape)
        P = np.stack([self.center[0] + S * R * np.cos(TH), self.center[1] + S * R * np.sin(TH)], axis=-1)
        W = np.outer(ws, wt) * S * R**2
        return P.reshape(-1, 2), W.ravel()

    def boundary_rule(self, order):
        th, wt = _periodic(4 * order)
        P, N, speed = self._frame(th)
        return P, N, wt * speed

    def boundary_samples(self, count):
        th, _ = _periodic(count)
        P, N, _ = self._frame(th)
        return P, N

    def outward_normal(self, theta) -> np.ndarray:
        _, N, _ = self._frame(np.array([float(theta)]))
        return N[0]

    @property
    def measure(self) -> float:
        val, _ = volume_integral(self, lambda P: np.ones(len(P)), QuadratureSpec(3))
        return val


@dataclass(frozen=True)
class ProductRadial3D(Domain):
    """Region ``{center + s R(theta, phi) omega: 0 <= s < 1}``, phi the polar angle."""

    radius: Expr
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        R = as_expr(self.radius)
        object.__setattr__(self, "radius", R)
        object.__setattr__(self, "center", _center(self.center, 3))
        if not R.free_symbols <= {"theta", "phi"}:
            raise DomainError("radius must be an expression in theta and phi")
        th = 2 * np.pi * np.arange(16) / 16
        ph = np.linspace(0.05, np.pi - 0.05, 16)
        TH, PH = np.meshgrid(th, ph)
        if np.any(self._R(TH.ravel(), PH.ravel()) <= 0):
            raise DomainError("radius must be positive")

    n = 3

    def _R(self, theta, phi, wrt: str | None = None):
        e = self.radius if wrt is None else differentiate(self.radius, wrt)
        return np.broadcast_to(evaluate_array(e, {"theta": theta, "phi": phi}), np.shape(theta))

    def _frame(self, theta, phi):
        R = self._R(theta, phi)
        Rt, Rp = self._R(theta, phi, "theta"), self._R(theta, phi, "phi")
        st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
        om = np.stack([sp * ct, sp * st, cp], axis=1)
        om_t = np.stack([-sp * st, sp * ct, np.zeros_like(sp)], axis=1)
        om_p = np.stack([cp * ct, cp * st, -sp], axis=1)
        x_t = Rt[:, None] * om + R[:, None] * om_t
        x_p = Rp[:, None] * om + R[:, None] * om_p
        Nraw = np.cross(x_p, x_t)
        area = np.linalg.norm(Nraw, axis=1)
        if np.any(area < MIN_JACOBIAN):
            raise DegenerateTangent("surface Jacobian vanishes at a node")
        N = Nraw / area[:, None]
        sign = np.sign(np.sum(N * om, axis=1))
        N = N * np.where(sign < 0, -1.0, 1.0)[:, None]
        P = np.asarray(self.center) + R[:, None] * om
        return P, N, area

    def _angles(self, order):
        mu, wm = _gauss(order)
        th, wt = _periodic(2 * order)
        TH, MU = np.meshgrid(th, mu, indexing="ij")
        W = np.outer(wt, wm)
        return TH.ravel(), np.arccos(MU.ravel()), W.ravel()

    def volume_rule(self, order):
        s, ws = _gauss01(order)
        th, ph, wa = self._angles(order)
        R = self._R(th, ph)
        om = np.stack([np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)], axis=1)
        P = np.asarray(self.center) + (s[:, None, None] * (R[:, None] * om)[None, :, :])
        W = np.outer(ws * s**2, wa * R**3)
        return P.reshape(-1, 3), W.ravel()

    def boundary_rule(self, order):
        th, ph, wa = self._angles(order)
        P, N, area = self._frame(th, ph)
        return P, N, wa * area / np.sin(ph)

    def boundary_samples(self, count):
        k = max(4, int(round(math.sqrt(count / 2))))
        th, _ = _periodic(2 * k)
        ph = np.pi * (np.arange(k) + 0.5) / k
        TH, PH = np.meshgrid(th, ph, indexing="ij")
        P, N, _ = self._frame(TH.ravel(), PH.ravel())
        return P, N

    def outward_normal(self, theta, phi) -> np.ndarray:
        _, N, _ = self._frame(np.array([float(theta)]), np.array([float(phi)]))
        return N[0]


# -- integration --------------------------------------------------------------

Integrand = Union[Callable[[np.ndarray], np.ndarray], Expr]
BoundaryIntegrand = Union[Callable[[np.ndarray, np.ndarray], np.ndarray], Expr]


def point_env(P: np.ndarray, N: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Bind x1..xn (and nu1..nun) to node coordinates."""
    env = {name: P[:, i] for i, name in enumerate(coords(P.shape[1]))}
    if N is not None:
        env.update({f"nu{i + 1}": N[:, i] for i in range(N.shape[1])})
    return env


def _volume_fn(f: Integrand):
    if isinstance(f, Expr):
        return lambda P: evaluate_array(f, point_env(P))
    return f


def _boundary_fn(g: BoundaryIntegrand):
    if isinstance(g, Expr):
        return lambda P, N: evaluate_array(g, point_env(P, N))
    return g


@lru_cache(maxsize=64)
def _volume_nodes(dom: Domain, order: int):
    return dom.volume_rule(order)


@lru_cache(maxsize=64)
def _boundary_nodes(dom: Domain, order: int):
    return dom.boundary_rule(order)


def volume_nodes(dom: Domain, q: QuadratureSpec, level: int | None = None):
    return _volume_nodes(dom, q.order(level))


def boundary_nodes(dom: Domain, q: QuadratureSpec, level: int | None = None):
    return _boundary_nodes(dom, q.order(level))


def _weighted_sum(values, weights) -> float:
    vals = np.broadcast_to(np.asarray(values, dtype=float), weights.shape)
    return float(np.sum(np.ascontiguousarray(vals * weights)))


def volume_integral(dom: Domain, f: Integrand, q: QuadratureSpec = QuadratureSpec()) -> tuple[float, float]:
    """(value at q.level, |value(level) - value(level-1)|)."""
    fn = _volume_fn(f)
    vals = []
    for level in (q.level, q.level - 1):
        P, W = volume_nodes(dom, q, level)
        vals.append(_weighted_sum(fn(P), W))
    return vals[0], abs(vals[0] - vals[1])


def boundary_integral(dom: Domain, g: BoundaryIntegrand, q: QuadratureSpec = QuadratureSpec()) -> tuple[float, float]:
    """Surface integral of g(x, nu) dH^{n-1}; same error estimate as volume_integral."""
    fn = _boundary_fn(g)
    vals = []
    for level in (q.level, q.level - 1):
        P, N, W = boundary_nodes(dom, q, level)
        vals.append(_weighted_sum(fn(P, N), W))
    return vals[0], abs(vals[0] - vals[1])


def outward_normal(dom: Domain, *param) -> np.ndarray:
    return dom.outward_normal(*param)


# -- star-shapedness --------------------------------------------------------------


@dataclass
class StarShapeReport:
    min_value: float
    argmin: tuple[float, ...]
    normal_at_argmin: tuple[float, ...]
    samples: int
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.min_value >= -self.tol

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "min_T_dot_nu": self.min_value,
            "argmin": list(self.argmin),
            "normal_at_argmin": list(self.normal_at_argmin),
            "samples": self.samples,
            "tol": self.tol,
        }


def t_dot_nu(d: DilationFamily, P: np.ndarray, N: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(d.sigma, dtype=float) * P * N, axis=1)


def check_star_shaped(dom: Domain, d: DilationFamily, samples: int = 2048, tol: float = TOL_GEOM) -> StarShapeReport:
    """Sampled test of <T(x), nu> >= 0 on the boundary."""
    if d.n != dom.n:
        raise ValueError(f"dilation in R^{d.n} for a domain in R^{dom.n}")
    P, N = dom.boundary_samples(samples)
    vals = t_dot_nu(d, P, N)
    i = int(np.argmin(vals))
    return StarShapeReport(float(vals[i]), tuple(P[i].tolist()), tuple(N[i].tolist()), len(vals), tol)


# -- presets ------------------------------------------------------------------


def disk(center=(0.0, 0.0), R=1.0) -> RadialStar2D:
    return RadialStar2D(const(R), tuple(center))


def ellipse(a, b, center=(0.0, 0.0)) -> RadialStar2D:
    """r(theta) = a b / sqrt(b^2 cos^2 + a^2 sin^2)."""
    th = var("theta")
    a, b = const(a), const(b)
    radius = a * b * power(b * b * cos(th) ** 2 + a * a * sin(th) ** 2, "-1/2")
    return RadialStar2D(radius, tuple(center))


def ball3(center=(0.0, 0.0, 0.0), R=1.0) -> ProductRadial3D:
    return ProductRadial3D(const(R), tuple(center))


def box(*bounds) -> Box:
    if len(bounds) == 1 and isinstance(bounds[0][0], (tuple, list)):
        bounds = bounds[0]
    return Box(tuple(tuple(b) for b in bounds))


def radial2d(expr, center=(0.0, 0.0)) -> RadialStar2D:
    return RadialStar2D(as_expr(expr), tuple(center))


DOMAIN_PRESETS = {
    "disk": disk,
    "box": box,
    "ellipse": ellipse,
    "ball3": ball3,
    "radial2d": radial2d,
}


def parse_preset_call(text: str) -> tuple[str, tuple]:
    """Split ``name(arg, ...)`` into the name and literal arguments."""
    text = text.strip()
    if "(" not in text:
        return text, ()
    if not text.endswith(")"):
        raise ValueError(f"malformed preset {text!r}")
    name, rest = text.split("(", 1)
    body = rest[:-1].strip()
    if not body:
        return name.strip(), ()
    try:
        args = ast.literal_eval("(" + body + ",)")
    except (ValueError, SyntaxError) as exc:
        raise ValueError(f"malformed preset arguments in {text!r}") from exc
    return name.strip(), tuple(args)


def domain_from_preset(text: str) -> Domain:
    name, args = parse_preset_call(text)
    if name not in DOMAIN_PRESETS:
        raise ValueError(f"unknown domain preset {name!r}; known: {', '.join(DOMAIN_PRESETS)}")
    return DOMAIN_PRESETS[name](*args)
