"""Intrinsic differential operators of a family X and Euler-Lagrange residuals.

Sign conventions (kept exactly as in the source identities):

=====================  ==========================================
``div_X F``            ``-sum_i X_i F_i``
``Delta_X u``          ``-sum_i X_i^2 u``  (positive operator)
``Delta_{X,k} u``      ``div_X(|grad_X u|^{k-2} grad_X u)``
``H_X u`` entry (i,j)  ``X_j(X_i u)``
=====================  ==========================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

from .fields import DilationFamily, VectorField, apply_field, coords, t_action
from .symbolic import ZERO, Expr, abs_power, as_expr, differentiate, power, substitute, var, variables

__all__ = [
    "x_gradient",
    "x_divergence",
    "x_hessian",
    "sub_laplacian",
    "horizontal_k_laplacian",
    "t_action",
    "Functional1",
    "Functional2",
    "dirichlet_k_laplacian",
    "horizontal_biharmonic",
    "euler_lagrange_1",
    "euler_lagrange_2",
]


def x_gradient(X: Sequence[VectorField], u) -> tuple[Expr, ...]:
    return tuple(apply_field(Xi, u) for Xi in X)


def x_divergence(X: Sequence[VectorField], F: Sequence) -> Expr:
    if len(F) != len(X):
        raise ValueError(f"vector of length {len(F)} for a family of {len(X)} fields")
    return -sum((apply_field(Xi, Fi) for Xi, Fi in zip(X, F)), ZERO)


def x_hessian(X: Sequence[VectorField], u) -> tuple[tuple[Expr, ...], ...]:
    """Matrix with entry (i, j) equal to X_j(X_i u); not symmetric in general."""
    grad = x_gradient(X, u)
    return tuple(tuple(apply_field(Xj, gi) for Xj in X) for gi in grad)


def sub_laplacian(X: Sequence[VectorField], u) -> Expr:
    return -sum((apply_field(Xi, apply_field(Xi, u)) for Xi in X), ZERO)


def horizontal_k_laplacian(X: Sequence[VectorField], u, k) -> Expr:
    k = as_expr(k).constant_value
    if k <= 1:
        raise ValueError(f"k must exceed 1, got {k}")
    grad = x_gradient(X, u)
    # |g|^{k-2} as a power of |g|^2 so that k = 2 collapses to 1
    scale = power(sum((g * g for g in grad), ZERO), (k - 2) / 2)
    return x_divergence(X, [scale * g for g in grad])


# -- functionals ----------------------------------------------------------------


def _r(i: int, j: int) -> str:
    return f"r{i}_{j}"


@dataclass(frozen=True)
class Functional1:
    """Integrand F(x, z, p) with p in R^m."""

    expr: Expr
    n: int
    m: int
    name: str = field(default="explicit", compare=False)
    params: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "expr", as_expr(self.expr))
        allowed = set(self.x_names) | {"z"} | set(self.p_names) | set(self._extra_names())
        extra = self.expr.free_symbols - allowed
        if extra:
            raise ValueError(f"functional uses unknown variables {sorted(extra)}")

    def _extra_names(self) -> tuple[str, ...]:
        return ()

    @property
    def x_names(self) -> tuple[str, ...]:
        return coords(self.n)

    @property
    def p_names(self) -> tuple[str, ...]:
        return variables("p", self.m)

    @cached_property
    def F_x(self) -> tuple[Expr, ...]:
        return tuple(differentiate(self.expr, v) for v in self.x_names)

    @cached_property
    def F_z(self) -> Expr:
        return differentiate(self.expr, "z")

    @cached_property
    def F_p(self) -> tuple[Expr, ...]:
        return tuple(differentiate(self.expr, v) for v in self.p_names)

    def t_x(self, d: DilationFamily) -> Expr:
        """T applied to x -> F(x, z, p) with z, p frozen."""
        return sum((s * var(v) * fx for s, v, fx in zip(d.sigma, self.x_names, self.F_x)), ZERO)

    def substitution(self, X: Sequence[VectorField], u) -> dict[str, Expr]:
        u = as_expr(u)
        grad = x_gradient(X, u)
        return {"z": u, **dict(zip(self.p_names, grad))}

    def along(self, e: Expr, X: Sequence[VectorField], u) -> Expr:
        """Compose ``e(x, z, p)`` with ``(x, u(x), grad_X u(x))``."""
        return substitute(e, self.substitution(X, u))


@dataclass(frozen=True)
class Functional2(Functional1):
    """Integrand F(x, z, p, r) with r a full (non-symmetrised) m x m block."""

    def _extra_names(self) -> tuple[str, ...]:
        return tuple(_r(i, j) for i in range(1, self.m + 1) for j in range(1, self.m + 1))

    @property
    def r_names(self) -> tuple[tuple[str, ...], ...]:
        return tuple(tuple(_r(i, j) for j in range(1, self.m + 1)) for i in range(1, self.m + 1))

    @cached_property
    def F_r(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(differentiate(self.expr, v) for v in row) for row in self.r_names)

    def substitution(self, X, u) -> dict[str, Expr]:
        u = as_expr(u)
        sub = super().substitution(X, u)
        H = x_hessian(X, u)
        for i, row in enumerate(self.r_names):
            for j, name in enumerate(row):
                sub[name] = H[i][j]
        return sub


def dirichlet_k_laplacian(n: int, m: int, k, G) -> Functional1:
    """F = |p|^k / k - G(z)."""
    k = as_expr(k).constant_value
    expr = abs_power([var(p) for p in variables("p", m)], k) / k - as_expr(G)
    return Functional1(expr, n, m, name="dirichlet-k-laplacian", params={"k": k, "G": as_expr(G)})


def horizontal_biharmonic(n: int, m: int, G) -> Functional2:
    """F = (sum_i r_ii)^2 / 2 - G(z)."""
    tr = sum((var(_r(i, i)) for i in range(1, m + 1)), ZERO)
    return Functional2(tr * tr / 2 - as_expr(G), n, m, name="horizontal-biharmonic", params={"G": as_expr(G)})


def euler_lagrange_1(F: Functional1, X: Sequence[VectorField], u) -> Expr:
    """``div_X(F_p) + dF/dz`` along u; zero exactly when u solves the PDE."""
    Fp = [F.along(e, X, u) for e in F.F_p]
    return x_divergence(X, Fp) + F.along(F.F_z, X, u)


def euler_lagrange_2(F: Functional2, X: Sequence[VectorField], u) -> Expr:
    """``sum_ij X_i X_j(F_rij) + div_X(F_p) + F_z`` along u."""
    fourth = ZERO
    for i, Xi in enumerate(X):
        for j, Xj in enumerate(X):
            Frij = F.along(F.F_r[i][j], X, u)
            if Frij.terms:
                fourth = fourth + apply_field(Xi, apply_field(Xj, Frij))
    return fourth + euler_lagrange_1(F, X, u)
