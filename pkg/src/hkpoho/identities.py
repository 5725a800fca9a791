"""Term-by-term verification of the Pohozaev-type identities and hypothesis audits.

Every identity is assembled from named terms; each term is one integral
over the domain or its boundary, computed at the requested quadrature level
and at the level below for an error estimate.  The sides group the terms
exactly as the identity is displayed, so report lines can be read against
the formula.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .calculus import (
    Functional1,
    Functional2,
    euler_lagrange_1,
    euler_lagrange_2,
    sub_laplacian,
    x_divergence,
    x_gradient,
    x_hessian,
)
from .fields import DilationFamily, VectorField, apply_field, coords, partial, t_action
from .geometry import Domain, QuadratureSpec, boundary_nodes, point_env, volume_nodes
from .symbolic import (
    ZERO,
    EvaluationSingularity,
    Expr,
    as_expr,
    differentiate,
    evaluate_array,
    is_zero,
    substitute,
    var,
)

TOL_IDENTITY = 1e-6
TOL_SOLUTION = 1e-9
TOL_DIRICHLET = 1e-12
TOL_NODEWISE = 1e-10


class NotASolution(ValueError):
    def __init__(self, message: str, max_residual: float, node: tuple[float, ...]):
        super().__init__(message)
        self.max_residual = max_residual
        self.node = node


class NotDirichlet(ValueError):
    def __init__(self, message: str, max_value: float, node: tuple[float, ...]):
        super().__init__(message)
        self.max_value = max_value
        self.node = node


class PreconditionViolated(ValueError):
    def __init__(self, message: str, node: tuple[float, ...]):
        super().__init__(message)
        self.node = node


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("HK_THREADS", "1")))
    except ValueError:
        return 1


# -- reports ------------------------------------------------------------------


@dataclass
class Term:
    name: str
    side: str
    value: float
    error: float

    def to_dict(self) -> dict:
        return {"name": self.name, "side": self.side, "value": self.value, "error_estimate": self.error}


def _sides(terms: Sequence[Term]) -> tuple[float, float, float, float]:
    lhs = 0.0
    rhs = 0.0
    scale = 1.0
    for t in terms:
        if t.side == "lhs":
            lhs += t.value
        else:
            rhs += t.value
        scale += abs(t.value)
    diff = abs(lhs - rhs)
    return lhs, rhs, diff, diff / scale


@dataclass
class IdentityReport:
    identity: str
    terms: list[Term]
    level: int
    tol: float = TOL_IDENTITY
    extras: dict = field(default_factory=dict)
    specialized: IdentityReport | None = None
    lhs: float = field(init=False)
    rhs: float = field(init=False)
    abs_residual: float = field(init=False)
    rel_residual: float = field(init=False)

    def __post_init__(self):
        self.lhs, self.rhs, self.abs_residual, self.rel_residual = _sides(self.terms)

    def recompute(self) -> tuple[float, float, float, float]:
        return _sides(self.terms)

    @property
    def passed(self) -> bool:
        return self.rel_residual <= self.tol

    def term(self, name: str) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def value(self, name: str) -> float:
        return self.term(name).value

    def to_dict(self) -> dict:
        out = {
            "identity": self.identity,
            "level": self.level,
            "terms": [t.to_dict() for t in self.terms],
            "lhs": self.lhs,
            "rhs": self.rhs,
            "abs_residual": self.abs_residual,
            "rel_residual": self.rel_residual,
            "tol": self.tol,
            "passed": self.passed,
        }
        if self.extras:
            out["extras"] = self.extras
        if self.specialized is not None:
            out["specialized"] = self.specialized.to_dict()
        return out

    def table(self) -> str:
        width = max(len(t.name) for t in self.terms) if self.terms else 10
        lines = [f"{self.identity} (level {self.level})"]
        for t in self.terms:
            lines.append(f"  {t.side}  {t.name:<{width}}  {t.value: .15e}  (+/- {t.error:.1e})")
        lines.append(f"  lhs = {self.lhs:.15e}   rhs = {self.rhs:.15e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  rel residual {self.rel_residual:.2e} (tol {self.tol:.0e}): {verdict}")
        return "\n".join(lines)


# -- node evaluation -------------------------------------------------------------


def _evaluate(expr: Expr, P: np.ndarray, N: np.ndarray | None = None) -> np.ndarray:
    try:
        return np.broadcast_to(evaluate_array(expr, point_env(P, N)), (len(P),))
    except EvaluationSingularity as exc:
        if exc.index is not None:
            exc.node = tuple(P[exc.index].tolist())
            exc.args = (f"{exc.args[0]} at node {exc.node}",)
        raise


class _Nodes:
    """Primitive quantities at the nodes of one quadrature level."""

    def __init__(self, dom: Domain, q: QuadratureSpec, level: int, X: Sequence[VectorField], d: DilationFamily):
        self.P, self.W = volume_nodes(dom, q, level)
        self.Pb, self.Nb, self.Wb = boundary_nodes(dom, q, level)
        self.t_nu = np.sum(np.asarray(d.sigma, dtype=float) * self.Pb * self.Nb, axis=1)
        self.nu_x = [
            sum((_evaluate(a, self.Pb) * self.Nb[:, h] for h, a in enumerate(Xi.coeffs)), np.zeros(len(self.Pb)))
            for Xi in X
        ]
        self.vol: dict[str, np.ndarray] = {}
        self.bnd: dict[str, np.ndarray] = {}

    def load(self, vol: Mapping[str, Expr], bnd: Mapping[str, Expr]) -> None:
        for k, e in vol.items():
            if k not in self.vol:
                self.vol[k] = _evaluate(e, self.P)
        for k, e in bnd.items():
            if k not in self.bnd:
                self.bnd[k] = _evaluate(e, self.Pb)


@dataclass
class _TermSpec:
    name: str
    side: str
    where: str
    integrand: Callable[[_Nodes], np.ndarray]


def _integrate(spec: _TermSpec, nodes: _Nodes) -> float:
    vals = spec.integrand(nodes)
    w = nodes.W if spec.where == "vol" else nodes.Wb
    vals = np.broadcast_to(np.asarray(vals, dtype=float), w.shape)
    return float(np.sum(np.ascontiguousarray(vals * w)))


def _assemble(specs: Sequence[_TermSpec], fine: _Nodes, coarse: _Nodes) -> list[Term]:
    def one(spec):
        a = _integrate(spec, fine)
        b = _integrate(spec, coarse)
        return Term(spec.name, spec.side, a, abs(a - b))

    workers = thread_count()
    if workers > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, specs))
    return [one(s) for s in specs]


class _Context:
    """Shared symbolic pieces and both node levels for one (X, d, F, u, dom, q)."""

    def __init__(self, X, d: DilationFamily, F: Functional1, u, dom: Domain, q: QuadratureSpec):
        X = tuple(X)
        if F.m != len(X):
            raise ValueError(f"functional expects {F.m} fields, family has {len(X)}")
        if F.n != d.n or dom.n != d.n or any(Xi.dim != d.n for Xi in X):
            raise ValueError("dimension mismatch between fields, dilation, functional and domain")
        self.X, self.d, self.F, self.dom, self.q = X, d, F, dom, q
        self.u = as_expr(u)
        self.m = len(X)
        self.sub = F.substitution(X, self.u)
        self.grad = x_gradient(X, self.u)
        self.Tu = t_action(d, self.u)
        self.levels = {lv: _Nodes(dom, q, lv, X, d) for lv in (q.level, q.level - 1)}

    def along(self, e: Expr) -> Expr:
        return substitute(e, self.sub)

    def load(self, vol: Mapping[str, Expr], bnd: Mapping[str, Expr]) -> None:
        items = list(self.levels.values())
        if thread_count() > 1:
            with ThreadPoolExecutor(max_workers=min(thread_count(), len(items))) as pool:
                list(pool.map(lambda nd: nd.load(vol, bnd), items))
        else:
            for nd in items:
                nd.load(vol, bnd)

    def terms(self, specs: Sequence[_TermSpec]) -> list[Term]:
        return _assemble(specs, self.levels[self.q.level], self.levels[self.q.level - 1])

    @property
    def fine(self) -> _Nodes:
        return self.levels[self.q.level]

    # order-1 primitives
    def first_order(self) -> None:
        F = self.F
        vol = {"F": self.along(F.expr), "Tx": self.along(F.t_x(self.d)), "Tu": self.Tu, "u": self.u}
        vol["Fz"] = self.along(F.F_z)
        for i in range(self.m):
            vol[f"Fp{i}"] = self.along(F.F_p[i])
            vol[f"g{i}"] = self.grad[i]
        bnd = {k: vol[k] for k in ("F", "Tu", "u")}
        for i in range(self.m):
            bnd[f"Fp{i}"] = vol[f"Fp{i}"]
            bnd[f"g{i}"] = vol[f"g{i}"]
        self.load(vol, bnd)

    def fp_dot_grad(self, a: Mapping[str, np.ndarray]) -> np.ndarray:
        return sum((a[f"Fp{i}"] * a[f"g{i}"] for i in range(self.m)), np.zeros(len(a["u"])))

    def fp_dot_nux(self, nd: _Nodes) -> np.ndarray:
        return sum((nd.bnd[f"Fp{i}"] * nd.nu_x[i] for i in range(self.m)), np.zeros(len(nd.Pb)))


def _order1_specs(ctx: _Context, el_key: str = "EL") -> list[_TermSpec]:
    qd = float(ctx.d.q)
    return [
        _TermSpec("q𝓕 − ⟨𝓕_p,∇_Xu⟩ bulk", "lhs", "vol", lambda nd: qd * nd.vol["F"] - ctx.fp_dot_grad(nd.vol)),
        _TermSpec("T(x↦𝓕) bulk", "lhs", "vol", lambda nd: nd.vol["Tx"]),
        _TermSpec("EL-weighted bulk", "lhs", "vol", lambda nd: nd.vol["Tu"] * nd.vol[el_key]),
        _TermSpec("𝓕⟨T,ν⟩ boundary", "rhs", "bnd", lambda nd: nd.bnd["F"] * nd.t_nu),
        _TermSpec("−Tu⟨𝓕_p,ν_X⟩ boundary", "rhs", "bnd", lambda nd: -nd.bnd["Tu"] * ctx.fp_dot_nux(nd)),
    ]


def verify_poho_order1(
    X: Sequence[VectorField],
    d: DilationFamily,
    F: Functional1,
    u,
    dom: Domain,
    q: QuadratureSpec = QuadratureSpec(),
    tol: float = TOL_IDENTITY,
) -> IdentityReport:
    """First-order identity for an arbitrary C^2 function u (not necessarily a solution)."""
    ctx = _Context(X, d, F, u, dom, q)
    ctx.first_order()
    ctx.load({"EL": euler_lagrange_1(F, ctx.X, ctx.u)}, {})
    return IdentityReport("poho1", ctx.terms(_order1_specs(ctx)), q.level, tol)


# -- solutions and the Dirichlet problem ------------------------------------------


def _solution_check(ctx: _Context, el: Expr, parts: Sequence[Expr]) -> float:
    """Max |EL| over volume nodes; raises NotASolution above the relative threshold."""
    nd = ctx.fine
    vals = np.abs(_evaluate(el, nd.P))
    idx = int(np.argmax(vals))
    if is_zero(el):
        return float(vals[idx])
    scale = 1.0 + max(float(np.max(np.abs(_evaluate(p, nd.P)))) for p in parts)
    if vals[idx] > TOL_SOLUTION * scale:
        raise NotASolution(
            f"u is not a solution: |EL| = {vals[idx]:.3e} at node {tuple(nd.P[idx].tolist())}",
            float(vals[idx]),
            tuple(nd.P[idx].tolist()),
        )
    return float(vals[idx])


def _dirichlet_check(ctx: _Context) -> float:
    nd = ctx.fine
    vals = np.abs(nd.bnd["u"])
    idx = int(np.argmax(vals))
    if vals[idx] > TOL_DIRICHLET:
        raise NotDirichlet(
            f"u does not vanish on the boundary: |u| = {vals[idx]:.3e} at {tuple(nd.Pb[idx].tolist())}",
            float(vals[idx]),
            tuple(nd.Pb[idx].tolist()),
        )
    return float(vals[idx])


def boundary_reduction_defect(ctx: _Context) -> float:
    """max over boundary nodes of |Tu<F_p,nu_X> - <T,nu><F_p,grad_X u>|."""
    nd = ctx.fine
    lhs = nd.bnd["Tu"] * ctx.fp_dot_nux(nd)
    rhs = nd.t_nu * ctx.fp_dot_grad(nd.bnd)
    return float(np.max(np.abs(lhs - rhs))) if len(lhs) else 0.0


@dataclass
class PDEReport:
    """PohoPDE report plus, for Dirichlet data, one PohoBVPzero report per a."""

    pde: IdentityReport
    max_el_residual: float
    dirichlet: bool
    bvp: dict[float, IdentityReport] = field(default_factory=dict)
    claimed: IdentityReport | None = None
    boundary_reduction_defect: float | None = None

    @property
    def reports(self) -> list[IdentityReport]:
        out = [self.pde]
        if self.claimed is not None:
            out.append(self.claimed)
        out.extend(self.bvp.values())
        return out

    @property
    def passed(self) -> bool:
        ok = all(r.passed for r in self.reports)
        if self.boundary_reduction_defect is not None:
            ok = ok and self.boundary_reduction_defect <= TOL_NODEWISE
        return ok

    @property
    def rel_residual(self) -> float:
        return max(r.rel_residual for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_el_residual": self.max_el_residual,
            "dirichlet": self.dirichlet,
            "pde": self.pde.to_dict(),
            "claimed": None if self.claimed is None else self.claimed.to_dict(),
            "bvp": {str(a): r.to_dict() for a, r in self.bvp.items()},
            "boundary_reduction_defect": self.boundary_reduction_defect,
        }


def verify_poho_pde(
    X: Sequence[VectorField],
    d: DilationFamily,
    F: Functional1,
    u,
    dom: Domain,
    q: QuadratureSpec = QuadratureSpec(),
    a: Sequence | float = (0,),
    dirichlet: bool = False,
    tol: float = TOL_IDENTITY,
) -> PDEReport:
    ctx = _Context(X, d, F, u, dom, q)
    ctx.first_order()
    fp_along = [ctx.along(e) for e in F.F_p]
    div_part = x_divergence(ctx.X, fp_along)
    el = div_part + ctx.along(F.F_z)
    max_el = _solution_check(ctx, el, [div_part, ctx.along(F.F_z)])

    specs = _order1_specs(ctx)
    pde_specs = [specs[0], specs[1], specs[3], specs[4]]
    pde = IdentityReport("poho-pde", ctx.terms(pde_specs), q.level, tol, extras={"max_el_residual": max_el})
    out = PDEReport(pde, max_el, dirichlet)
    if not dirichlet:
        return out

    max_u = _dirichlet_check(ctx)
    qd = float(d.q)
    claimed = _TermSpec(
        "⟨𝓕_p,∇_Xu⟩ + u∂_z𝓕 bulk", "lhs", "vol", lambda nd: ctx.fp_dot_grad(nd.vol) + nd.vol["u"] * nd.vol["Fz"]
    )
    out.claimed = IdentityReport("claimed-with-a", ctx.terms([claimed]), q.level, tol)
    out.boundary_reduction_defect = boundary_reduction_defect(ctx)
    a_values = [a] if isinstance(a, (int, float, Fraction)) else list(a)
    for av in a_values:
        af = float(av)
        bvp_specs = [
            _TermSpec(
                "q𝓕 − (a+1)⟨𝓕_p,∇_Xu⟩ bulk",
                "lhs",
                "vol",
                lambda nd, af=af: qd * nd.vol["F"] - (af + 1.0) * ctx.fp_dot_grad(nd.vol),
            ),
            specs[1],
            _TermSpec("−a·u∂_z𝓕 bulk", "lhs", "vol", lambda nd, af=af: -af * nd.vol["u"] * nd.vol["Fz"]),
            _TermSpec(
                "(𝓕 − ⟨𝓕_p,∇_Xu⟩)⟨T,ν⟩ boundary",
                "rhs",
                "bnd",
                lambda nd: (nd.bnd["F"] - ctx.fp_dot_grad(nd.bnd)) * nd.t_nu,
            ),
        ]
        out.bvp[af] = IdentityReport(
            f"poho-bvp-zero(a={av})", ctx.terms(bvp_specs), q.level, tol, extras={"a": af, "max_boundary_u": max_u}
        )
    return out


def classical_pohozaev_terms(F: Functional1, u, dom: Domain, q: QuadratureSpec = QuadratureSpec()) -> IdentityReport:
    """Euclidean identity ((n-2)/2)∫|∇u|² − n∫G(u) + ½∮|∂_νu|²<x,ν> = 0 for F = |p|²/2 − G(z).

    Computed with plain partial derivatives, independently of the X-calculus.
    """
    n = F.n
    u = as_expr(u)
    ps = [var(p) for p in F.p_names]
    half_sq = sum((p * p for p in ps), ZERO) / 2
    G = -substitute(F.expr, {p: 0 for p in F.p_names})
    if F.m != n or not is_zero(F.expr - (half_sq - G)) or not G.free_symbols <= {"z"}:
        raise ValueError("classical form needs F = |p|^2/2 - G(z) with m = n")
    grad = [differentiate(u, x) for x in coords(n)]
    grad_sq = sum((g * g for g in grad), ZERO)
    Gu = substitute(G, {"z": u})

    def normal_derivative_sq(P, N):
        dn = sum((_evaluate(g, P) * N[:, i] for i, g in enumerate(grad)), np.zeros(len(P)))
        return dn * dn * np.sum(P * N, axis=1)

    specs = [
        _TermSpec("(n−2)/2·|∇u|² bulk", "lhs", "vol", lambda nd: (n - 2) / 2 * _evaluate(grad_sq, nd.P)),
        _TermSpec("−n·G(u) bulk", "lhs", "vol", lambda nd: -n * _evaluate(Gu, nd.P)),
        _TermSpec("½|∂_νu|²⟨x,ν⟩ boundary", "lhs", "bnd", lambda nd: 0.5 * normal_derivative_sq(nd.Pb, nd.Nb)),
    ]
    d = DilationFamily((1,) * n)
    X = [partial(i, n) for i in range(1, n + 1)]
    fine, coarse = _Nodes(dom, q, q.level, X, d), _Nodes(dom, q, q.level - 1, X, d)
    return IdentityReport("classical-pohozaev", _assemble(specs, fine, coarse), q.level)


# -- second order ------------------------------------------------------------------


def _second_order_primitives(ctx: _Context) -> None:
    F: Functional2 = ctx.F  # type: ignore[assignment]
    m = ctx.m
    H = x_hessian(ctx.X, ctx.u)
    Fr = [[ctx.along(F.F_r[i][j]) for j in range(m)] for i in range(m)]
    vol, bnd = {}, {}
    for i in range(m):
        for j in range(m):
            vol[f"Fr{i}{j}"] = Fr[i][j]
            vol[f"H{i}{j}"] = H[i][j]
            bnd[f"Fr{i}{j}"] = Fr[i][j]
            # X_i(F_{r_ji}) for the boundary bracket
            bnd[f"XFr{i}{j}"] = apply_field(ctx.X[i], Fr[j][i])
        bnd[f"XTu{i}"] = apply_field(ctx.X[i], ctx.Tu)
    vol["EL2"] = euler_lagrange_2(F, ctx.X, ctx.u)
    ctx.load(vol, bnd)


def _order2_extra_specs(ctx: _Context) -> list[_TermSpec]:
    m = ctx.m

    def hess_term(nd):
        return -2.0 * sum((nd.vol[f"Fr{i}{j}"] * nd.vol[f"H{i}{j}"] for i in range(m) for j in range(m)), 0.0)

    def bracket(nd):
        total = np.zeros(len(nd.Pb))
        for i in range(m):
            for j in range(m):
                total = total + (nd.bnd[f"XFr{i}{j}"] * nd.bnd["Tu"] - nd.bnd[f"Fr{i}{j}"] * nd.bnd[f"XTu{i}"]) * nd.nu_x[j]
        return total

    return [
        _TermSpec("−2Σ𝓕_rij X_j(X_iu) bulk", "lhs", "vol", hess_term),
        _TermSpec("bracket boundary terms", "rhs", "bnd", bracket),
    ]


def _biharmonic_report(ctx: _Context, tol: float) -> IdentityReport:
    """Specialised form for F = (Σ r_ii)²/2 − G(z), with the sign of the boundary bracket as derived."""
    G = ctx.F.params["G"]
    Lu = sub_laplacian(ctx.X, ctx.u)
    vol = {
        "Lu": Lu,
        "L2u": sub_laplacian(ctx.X, Lu),
        "Gu": substitute(G, {"z": ctx.u}),
        "dGu": substitute(differentiate(G, "z"), {"z": ctx.u}),
    }
    bnd = {"Lu": Lu, **{f"XLu{i}": apply_field(Xi, Lu) for i, Xi in enumerate(ctx.X)}}
    ctx.load(vol, bnd)
    qd = float(ctx.d.q)
    m = ctx.m

    def bracket(nd):
        total = np.zeros(len(nd.Pb))
        for i in range(m):
            total = total + (nd.bnd["Lu"] * nd.bnd[f"XTu{i}"] - nd.bnd[f"XLu{i}"] * nd.bnd["Tu"]) * nd.nu_x[i]
        return total

    specs = [
        _TermSpec("(q/2 − 2)(Δ_Xu)² bulk", "lhs", "vol", lambda nd: (qd / 2 - 2) * nd.vol["Lu"] ** 2),
        _TermSpec("−qG(u) bulk", "lhs", "vol", lambda nd: -qd * nd.vol["Gu"]),
        _TermSpec("Tu(Δ_X²u − G'(u)) bulk", "lhs", "vol", lambda nd: nd.vol["Tu"] * (nd.vol["L2u"] - nd.vol["dGu"])),
        _TermSpec("𝓕⟨T,ν⟩ boundary", "rhs", "bnd", lambda nd: nd.bnd["F"] * nd.t_nu),
        _TermSpec("Σ(Δ_Xu·X_i(Tu) − X_i(Δ_Xu)·Tu)⟨X_i,ν⟩ boundary", "rhs", "bnd", bracket),
    ]
    return IdentityReport("poho2-biharmonic", ctx.terms(specs), ctx.q.level, tol)


def verify_poho_order2(
    X: Sequence[VectorField],
    d: DilationFamily,
    F: Functional2,
    u,
    dom: Domain,
    q: QuadratureSpec = QuadratureSpec(),
    tol: float = TOL_IDENTITY,
) -> IdentityReport:
    """Second-order identity for C^4 u; F may depend on the X-Hessian slot r."""
    if not isinstance(F, Functional2):
        F = Functional2(F.expr, F.n, F.m, F.name, F.params)
    ctx = _Context(X, d, F, u, dom, q)
    ctx.first_order()
    _second_order_primitives(ctx)
    base = _order1_specs(ctx, el_key="EL2")
    extra = _order2_extra_specs(ctx)
    specs = base[:3] + extra[:1] + base[3:] + extra[1:]
    report = IdentityReport("poho2", ctx.terms(specs), q.level, tol)
    if F.name == "horizontal-biharmonic" and "G" in F.params:
        report.specialized = _biharmonic_report(ctx, tol)
    return report


@dataclass
class BoundaryIdentityReport:
    defect: float
    worst_node: tuple[float, ...]
    induced_f_defect: float | None
    nodes: int
    tol: float = TOL_NODEWISE

    @property
    def passed(self) -> bool:
        ok = self.defect <= self.tol
        if self.induced_f_defect is not None:
            ok = ok and self.induced_f_defect <= self.tol
        return ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_defect": self.defect,
            "worst_node": list(self.worst_node),
            "induced_f_defect": self.induced_f_defect,
            "nodes": self.nodes,
            "tol": self.tol,
        }


def check_boundary_identity_order2(
    X: Sequence[VectorField],
    d: DilationFamily,
    u,
    dom: Domain,
    q: QuadratureSpec = QuadratureSpec(),
    F: Functional2 | None = None,
) -> BoundaryIdentityReport:
    """Nodewise X_i(Tu)<X_j,nu> = <T,nu> X_j(X_i u) under u = grad u = 0 on the boundary.

    With F given, also the defect of
    Σ_ij (X_i(F_rji) Tu − F_rij X_i(Tu)) <X_j,nu> = <T,nu> f,  f = −Σ r_ij F_rij.
    """
    X = tuple(X)
    u = as_expr(u)
    n, m = d.n, len(X)
    P, N, _ = boundary_nodes(dom, q)
    for e in (u, *(differentiate(u, x) for x in coords(n))):
        vals = np.abs(_evaluate(e, P))
        if len(vals) and vals.max() > TOL_DIRICHLET:
            k = int(np.argmax(vals))
            raise PreconditionViolated(
                f"u or its gradient is {vals[k]:.3e} at boundary node {tuple(P[k].tolist())}", tuple(P[k].tolist())
            )
    t_nu = np.sum(np.asarray(d.sigma, dtype=float) * P * N, axis=1)
    nu_x = [sum((_evaluate(a, P) * N[:, h] for h, a in enumerate(Xi.coeffs)), np.zeros(len(P))) for Xi in X]
    Tu = t_action(d, u)
    xtu = [_evaluate(apply_field(Xi, Tu), P) for Xi in X]
    H = x_hessian(X, u)
    Hv = [[_evaluate(H[i][j], P) for j in range(m)] for i in range(m)]
    defect = np.zeros(len(P))
    for i in range(m):
        for j in range(m):
            defect = np.maximum(defect, np.abs(xtu[i] * nu_x[j] - t_nu * Hv[i][j]))
    k = int(np.argmax(defect)) if len(defect) else 0

    f_defect = None
    if F is not None:
        sub = F.substitution(X, u)
        Fr = [[substitute(F.F_r[i][j], sub) for j in range(m)] for i in range(m)]
        lhs = np.zeros(len(P))
        f = np.zeros(len(P))
        Tuv = _evaluate(Tu, P)
        for i in range(m):
            for j in range(m):
                frij = _evaluate(Fr[i][j], P)
                lhs = lhs + (_evaluate(apply_field(X[i], Fr[j][i]), P) * Tuv - frij * xtu[i]) * nu_x[j]
                f = f - Hv[i][j] * frij
        f_defect = float(np.max(np.abs(lhs - t_nu * f))) if len(P) else 0.0
    return BoundaryIdentityReport(
        float(defect.max()) if len(defect) else 0.0,
        tuple(P[k].tolist()) if len(P) else (),
        f_defect,
        len(P),
    )


# -- hypothesis audits ---------------------------------------------------------------


@dataclass
class AuditSampler:
    """Compact sampling boxes for the non-existence hypotheses."""

    z_max: float = 4.0
    p_max: float = 4.0
    r_max: float = 4.0
    per_axis: int = 17
    x_points: int = 8
    max_points: int = 120_000
    a0_candidates: tuple = ()
    seed: int = 0
    tol: float = 1e-12


@dataclass
class HypothesisAudit:
    condition: str
    grid: str
    min_value: float
    max_value: float
    witnesses: list[dict]
    verdict: str
    note: str = ""
    a0: float | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        out = {
            "condition": self.condition,
            "grid": self.grid,
            "min": self.min_value,
            "max": self.max_value,
            "witnesses": self.witnesses,
            "verdict": self.verdict,
        }
        if self.note:
            out["note"] = self.note
        if self.a0 is not None:
            out["a0"] = self.a0
        return out


SAMPLED_NOTE = "pass is evidence on the sampled box only; a fail with witness is conclusive"
CONDITION_III_NOTE = (
    "literal reading: at sampled points where the (ii) expression equals zero, "
    "flag unless one of the listed arguments vanishes"
)


def _x_points(dom: Domain, count: int, boundary: bool, seed: int) -> np.ndarray:
    if boundary:
        P, _ = dom.boundary_samples(max(count, 4))
    else:
        P, _ = volume_nodes(dom, QuadratureSpec(1), 1)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(P), size=min(count, len(P)), replace=False))
    return P[idx]


def _grid(names: Sequence[str], bounds: Sequence[float], sampler: AuditSampler, X: np.ndarray, depends_on_x: bool):
    """Sample points over x-points times a tensor grid; returns (env, description)."""
    axes = [np.linspace(-b, b, sampler.per_axis) for b in bounds]
    xs = X if depends_on_x else X[:1]
    full = len(xs) * sampler.per_axis ** len(names)
    if full <= sampler.max_points:
        idx = np.array(list(itertools.product(range(len(xs)), *(range(sampler.per_axis) for _ in names))))
        desc = f"full grid: {len(xs)} x-points x {sampler.per_axis}^{len(names)}"
    else:
        mid = sampler.per_axis // 2
        sparse = []
        # every point with at most two nonzero grid coordinates, at each x-point
        for pair in itertools.combinations(range(len(names)), 2):
            for a, b in itertools.product(range(sampler.per_axis), repeat=2):
                row = [mid] * len(names)
                row[pair[0]], row[pair[1]] = a, b
                sparse.append(row)
        if len(names) == 1:
            sparse = [[a] for a in range(sampler.per_axis)]
        sparse = np.unique(np.array(sparse), axis=0)
        rows = [np.column_stack([np.full(len(sparse), k), sparse]) for k in range(len(xs))]
        rng = np.random.default_rng(sampler.seed)
        n_rand = max(0, sampler.max_points - sum(len(r) for r in rows))
        rand = np.column_stack(
            [rng.integers(0, len(xs), n_rand)] + [rng.integers(0, sampler.per_axis, n_rand) for _ in names]
        )
        idx = np.concatenate(rows + [rand])
        desc = (
            f"{len(idx)} of {full} grid points ({len(xs)} x-points x {sampler.per_axis}^{len(names)}): "
            f"all points with at most two nonzero coordinates plus a seeded random sample (seed {sampler.seed})"
        )
    env = point_env(xs[idx[:, 0]])
    for k, name in enumerate(names):
        env[name] = axes[k][idx[:, k + 1]]
    return env, desc


def _witness(env: Mapping[str, np.ndarray], k: int, value: float) -> dict:
    return {"point": {name: float(v[k]) for name, v in env.items()}, "value": float(value)}


def _sign_audit(
    condition: str, values: np.ndarray, env, desc: str, sign: str, tol: float, note: str = SAMPLED_NOTE, a0=None
) -> HypothesisAudit:
    """sign '<=' means values <= 0 required; '>=' means values >= 0 required."""
    ok = np.isfinite(values)
    skipped = int((~ok).sum())
    v = np.where(ok, values, np.nan)
    if not ok.any():
        return HypothesisAudit(condition, desc, float("nan"), float("nan"), [], "fail", "no finite samples", a0)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    scale = tol * (1.0 + float(np.nanmax(np.abs(v))))
    if sign == "<=":
        bad = np.flatnonzero(ok & (values > scale))
        extreme = int(np.nanargmax(v))
    else:
        bad = np.flatnonzero(ok & (values < -scale))
        extreme = int(np.nanargmin(v))
    if len(bad):
        order = bad[np.argsort(-np.abs(values[bad]))][:3]
        witnesses = [_witness(env, k, values[k]) for k in order]
        verdict = "fail"
    else:
        witnesses = [_witness(env, extreme, values[extreme])]
        verdict = "pass"
    if skipped:
        note = f"{note}; {skipped} singular sample(s) skipped"
    return HypothesisAudit(condition, desc, lo, hi, witnesses, verdict, note, a0)


def _equality_audit(condition: str, values, env, desc, vanishing: Sequence[Sequence[str]], tol, a0=None):
    ok = np.isfinite(values)
    scale = tol * (1.0 + float(np.nanmax(np.abs(np.where(ok, values, 0.0)))))
    eq = ok & (np.abs(values) <= scale)
    allowed = np.zeros(len(values), dtype=bool)
    for group in vanishing:
        allowed |= np.all([env[name] == 0 for name in group], axis=0)
    flagged = np.flatnonzero(eq & ~allowed)
    lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
    witnesses = [_witness(env, k, values[k]) for k in flagged[:3]]
    verdict = "fail" if len(flagged) else "pass"
    note = f"{CONDITION_III_NOTE}; {int(eq.sum())} equality sample(s), {len(flagged)} flagged"
    return HypothesisAudit(condition, desc, lo, hi, witnesses, verdict, note, a0)


def _monomial_in_z(G: Expr) -> tuple[Fraction, int] | None:
    if G.free_symbols - {"z"} or len(G.terms) != 1:
        return None
    (mono, c), = G.terms.items()
    if len(mono) != 1 or mono[0][0] != "z":
        return None
    return c, mono[0][1]


def growth_verdict(G, rho) -> tuple[bool, float | None]:
    """Exact test of G(z) < rho z G'(z) for all z != 0 with G = c z^s.

    Returns (passes, witness z); rho z G' − G = c z^s (rho s − 1).
    """
    mono = _monomial_in_z(as_expr(G))
    if mono is None:
        raise ValueError("closed-form growth audit needs G = c z^s")
    c, s = mono
    lead = c * (Fraction(rho) * s - 1)
    if s % 2 == 0:
        return (lead > 0, None if lead > 0 else 1.0)
    # odd power: changes sign across z = 0
    if lead > 0:
        return False, -1.0
    return False, 1.0


def _growth_audit(condition: str, G: Expr, rho: Fraction, z_grid: np.ndarray) -> HypothesisAudit:
    h = var("z") * differentiate(G, "z") * rho - G
    vals = evaluate_array(h, {"z": z_grid})
    nz = z_grid != 0
    desc = f"rho = {rho}; z-grid of {len(z_grid)} points"
    mono = _monomial_in_z(G)
    if mono is not None:
        passed, wz = growth_verdict(G, rho)
        witnesses = [] if wz is None else [{"point": {"z": wz}, "value": float(evaluate_array(h, {"z": wz}))}]
        note = "exact for G = c z^s: rho z G' - G = c (rho s - 1) z^s"
        grid_ok = bool(np.all(vals[nz] > 0))
        if grid_ok != passed:
            note += "; z-grid disagrees with the closed form"
        return HypothesisAudit(condition, desc, float(vals[nz].min()), float(vals[nz].max()), witnesses,
                               "pass" if passed else "fail", note, None)
    bad = np.flatnonzero(nz & (vals <= 0))
    witnesses = [{"point": {"z": float(z_grid[k])}, "value": float(vals[k])} for k in bad[:3]]
    return HypothesisAudit(condition, desc, float(vals[nz].min()), float(vals[nz].max()), witnesses,
                           "fail" if len(bad) else "pass", SAMPLED_NOTE, None)


def _power_law_audits(F: Functional1, d: DilationFamily, a0_list: Sequence[Fraction], sampler: AuditSampler):
    """Closed-form audits for F = |p|^k/k − G(z)."""
    k = Fraction(F.params["k"])
    G = F.params["G"]
    q = d.q
    G0 = float(evaluate_array(G, {"z": 0.0}))
    exact = "closed form for F = |p|^k/k - G(z)"
    audits = [
        HypothesisAudit(
            "i", exact, float("-inf"), -G0,
            [{"point": {"p": 0.0}, "value": -G0}],
            "pass" if -G0 <= 0 else "fail",
            "F(x,0,p) - <F_p,p> = (1/k - 1)|p|^k - G(0)",
        )
    ]
    mono = _monomial_in_z(G)
    z_grid = np.linspace(-sampler.z_max, sampler.z_max, 4 * sampler.per_axis + 1)
    best = None
    for a0 in a0_list:
        coeff = Fraction(q) / k - a0 - 1
        h = a0 * var("z") * differentiate(G, "z") - q * G
        if mono is not None:
            c, s = mono
            lead = c * (a0 * s - q)
            h_ok = lead >= 0 if s % 2 == 0 else lead == 0
            h_zero_off_origin = lead == 0
            h_min = float(lead) if s % 2 == 0 else -abs(float(lead))
        else:
            hv = evaluate_array(h, {"z": z_grid})
            h_ok = bool(np.all(hv >= -sampler.tol))
            h_zero_off_origin = bool(np.any((np.abs(hv) <= sampler.tol) & (z_grid != 0)))
            h_min = float(hv.min())
        ok = coeff >= 0 and h_ok
        cand = (ok, float(min(coeff, 0)) + min(h_min, 0.0), a0, coeff, h_zero_off_origin, h_min)
        if best is None or (cand[0] and not best[0]) or (cand[0] == best[0] and not best[0] and cand[1] > best[1]):
            best = cand
        if ok:
            break
    ok, _, a0, coeff, h_zero, h_min = best
    desc = f"{exact}; a0 scanned over {[str(a) for a in a0_list]}"
    detail = f"|p|^k coefficient q/k - a0 - 1 = {coeff}; a0 z G' - q G " + ("exact" if mono else "on z-grid")
    audits.append(
        HypothesisAudit("ii", desc, min(float(coeff), h_min), float("inf"),
                        [{"point": {"a0": float(a0)}, "value": min(float(coeff), h_min)}],
                        "pass" if ok else "fail", detail, float(a0))
    )
    # equality away from z = 0 or p = 0 needs a vanishing |p|^k coefficient and h = 0 at some z != 0
    iii_fail = ok and coeff == 0 and h_zero
    audits.append(
        HypothesisAudit("iii", desc, 0.0, 0.0, [], "fail" if iii_fail else ("pass" if ok else "fail"),
                        CONDITION_III_NOTE + ("" if ok else "; (ii) fails for every candidate a0"), float(a0))
    )
    growth = growth_audits(G, k, d.n, q, sampler.z_max, len(z_grid))
    # the isotropic version only applies when the dilation is the standard one
    audits.extend(growth if q == d.n else growth[1:])
    return audits


def growth_audits(G, k, n: int, q: int, z_max: float = 4.0, points: int = 69) -> list[HypothesisAudit]:
    """G(z) < rho z G'(z) for rho = 1/k - 1/n ("growth") and rho_q = 1/k - 1/q ("growth-hor")."""
    k = Fraction(k)
    G = as_expr(G)
    z_grid = np.linspace(-z_max, z_max, points)
    return [
        _growth_audit("growth", G, 1 / k - Fraction(1, n), z_grid),
        _growth_audit("growth-hor", G, 1 / k - Fraction(1, q), z_grid),
    ]


def default_a0(F: Functional1, d: DilationFamily, extra: Sequence = ()) -> list[Fraction]:
    """User candidates, then rho, rho_q and q*rho_q when F carries an exponent k."""
    out = [Fraction(a) for a in extra]
    if "k" in F.params:
        k = Fraction(F.params["k"])
        rho = 1 / k - Fraction(1, d.n)
        rho_q = 1 / k - Fraction(1, d.q)
        out += [rho, rho_q, d.q * rho_q]
    if not out:
        out = [Fraction(0)]
    seen = []
    for a in out:
        if a not in seen:
            seen.append(a)
    return seen


def audit_nonexistence_order1(
    F: Functional1, d: DilationFamily, dom: Domain, sampler: AuditSampler = AuditSampler()
) -> list[HypothesisAudit]:
    a0_list = default_a0(F, d, sampler.a0_candidates)
    if F.name == "dirichlet-k-laplacian" and "k" in F.params:
        return _power_law_audits(F, d, a0_list, sampler)
    x_dep = bool(F.expr.free_symbols & set(F.x_names))
    p = [var(v) for v in F.p_names]
    fp_dot_p = sum((pi * fpi for pi, fpi in zip(p, F.F_p)), ZERO)

    cond_i = substitute(F.expr - fp_dot_p, {"z": 0})
    Xb = _x_points(dom, sampler.x_points, True, sampler.seed)
    env, desc = _grid(F.p_names, [sampler.p_max] * F.m, sampler, Xb, x_dep)
    audits = [_sign_audit("i", evaluate_array(cond_i, env, strict=False), env, desc, "<=", sampler.tol)]

    Xv = _x_points(dom, sampler.x_points, False, sampler.seed)
    names = ("z",) + F.p_names
    env, desc = _grid(names, [sampler.z_max] + [sampler.p_max] * F.m, sampler, Xv, x_dep)
    tx = F.t_x(d)
    best = None
    for a0 in a0_list:
        e = d.q * F.expr - (a0 + 1) * fp_dot_p + tx - a0 * var("z") * F.F_z
        vals = evaluate_array(e, env, strict=False)
        audit = _sign_audit("ii", vals, env, desc + f"; a0 scanned over {[str(a) for a in a0_list]}", ">=",
                            sampler.tol, a0=float(a0))
        if best is None or (audit.passed and not best[0].passed) or (
            not best[0].passed and not audit.passed and audit.min_value > best[0].min_value
        ):
            best = (audit, vals)
        if audit.passed:
            break
    audits.append(best[0])
    audits.append(_equality_audit("iii", best[1], env, desc, [("z",), F.p_names], sampler.tol, a0=best[0].a0))
    return audits


def audit_nonexistence_order2(
    F: Functional2, d: DilationFamily, dom: Domain, sampler: AuditSampler = AuditSampler()
) -> list[HypothesisAudit]:
    if not isinstance(F, Functional2):
        F = Functional2(F.expr, F.n, F.m, F.name, F.params)
    x_dep = bool(F.expr.free_symbols & set(F.x_names))
    r_names = tuple(v for row in F.r_names for v in row)
    p = [var(v) for v in F.p_names]
    fp_dot_p = sum((pi * fpi for pi, fpi in zip(p, F.F_p)), ZERO)
    r_dot_fr = sum(
        (var(F.r_names[i][j]) * F.F_r[i][j] for i in range(F.m) for j in range(F.m)), ZERO
    )
    zero_zp = {"z": 0, **{v: 0 for v in F.p_names}}

    cond_i = substitute(F.expr - r_dot_fr, zero_zp)
    Xb = _x_points(dom, sampler.x_points, True, sampler.seed)
    env, desc = _grid(r_names, [sampler.r_max] * len(r_names), sampler, Xb, x_dep)
    audits = [_sign_audit("i", evaluate_array(cond_i, env, strict=False), env, desc, "<=", sampler.tol)]

    Xv = _x_points(dom, sampler.x_points, False, sampler.seed)
    names = ("z",) + F.p_names + r_names
    bounds = [sampler.z_max] + [sampler.p_max] * F.m + [sampler.r_max] * len(r_names)
    env, desc = _grid(names, bounds, sampler, Xv, x_dep)
    e = d.q * F.expr - fp_dot_p + F.t_x(d) - 2 * r_dot_fr
    vals = evaluate_array(e, env, strict=False)
    audits.append(_sign_audit("ii", vals, env, desc, ">=", sampler.tol))
    audits.append(_equality_audit("iii", vals, env, desc, [("z",), F.p_names, r_names], sampler.tol))
    return audits
