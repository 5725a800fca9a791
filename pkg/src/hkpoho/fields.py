"""Polynomial vector fields, anisotropic dilations and Hörmander checks."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .symbolic import ZERO, Expr, as_expr, const, differentiate, evaluate, substitute, var, variables

MAX_STEP_CAP = 12


class StepCapExceeded(ValueError):
    pass


def coords(n: int) -> tuple[str, ...]:
    """Names of the spatial variables of R^n."""
    return variables("x", n)


@dataclass(frozen=True)
class VectorField:
    """First-order operator ``sum_i coeffs[i] * d/dx_i`` with polynomial coefficients."""

    coeffs: tuple[Expr, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        coeffs = tuple(as_expr(c) for c in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        allowed = set(coords(len(coeffs)))
        for i, c in enumerate(coeffs):
            if not c.is_polynomial:
                raise ValueError(f"coefficient {i + 1} of {self.name or 'field'} is not polynomial")
            extra = c.free_symbols - allowed
            if extra:
                raise ValueError(f"coefficient {i + 1} uses non-spatial variables {sorted(extra)}")

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    def __call__(self, u) -> Expr:
        return apply_field(self, u)

    def is_zero(self) -> bool:
        return all(not c.terms for c in self.coeffs)

    def __add__(self, other: VectorField) -> VectorField:
        return VectorField(tuple(a + b for a, b in zip(self.coeffs, other.coeffs)))

    def __sub__(self, other: VectorField) -> VectorField:
        return VectorField(tuple(a - b for a, b in zip(self.coeffs, other.coeffs)))

    def scale(self, c) -> VectorField:
        return VectorField(tuple(a * c for a in self.coeffs), self.name)

    def at(self, point: Sequence) -> tuple[Fraction, ...]:
        """Exact coefficient vector at a rational point."""
        env = {v: Fraction(p) for v, p in zip(coords(self.dim), point)}
        return tuple(substitute(c, env).constant_value for c in self.coeffs)

    def at_float(self, point: Sequence[float]) -> np.ndarray:
        env = dict(zip(coords(self.dim), point))
        return np.array([evaluate(c, env) for c in self.coeffs])

    def divergence(self) -> Expr:
        return sum((differentiate(c, v) for c, v in zip(self.coeffs, coords(self.dim))), ZERO)

    def __str__(self) -> str:
        parts = [f"{c}*d/d{v}" for c, v in zip(self.coeffs, coords(self.dim)) if c.terms]
        return " + ".join(parts) if parts else "0"


def field_from(coeffs: Iterable, name: str = "") -> VectorField:
    return VectorField(tuple(as_expr(c) for c in coeffs), name)


def partial(i: int, n: int) -> VectorField:
    """The coordinate field d/dx_i (1-based)."""
    return VectorField(tuple(const(1) if j == i else ZERO for j in range(1, n + 1)), f"d{i}")


def apply_field(Y: VectorField, u) -> Expr:
    u = as_expr(u)
    out = ZERO
    for c, v in zip(Y.coeffs, coords(Y.dim)):
        if c.terms:
            out = out + c * differentiate(u, v)
    return out


def lie_bracket(Y: VectorField, Z: VectorField) -> VectorField:
    """``[Y, Z] = YZ - ZY``, computed coefficientwise."""
    if Y.dim != Z.dim:
        raise ValueError(f"dimension mismatch: {Y.dim} vs {Z.dim}")
    return VectorField(tuple(apply_field(Y, b) - apply_field(Z, a) for a, b in zip(Y.coeffs, Z.coeffs)))


@dataclass(frozen=True)
class DilationFamily:
    """delta_lambda(x) = (lambda^sigma_1 x_1, ..., lambda^sigma_n x_n)."""

    sigma: tuple[int, ...]

    def __post_init__(self):
        sigma = tuple(self.sigma)
        object.__setattr__(self, "sigma", sigma)
        if not sigma:
            raise ValueError("empty exponent vector")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 1 for s in sigma):
            raise ValueError(f"exponents must be positive integers: {sigma}")
        if sigma[0] != 1:
            raise ValueError(f"first exponent must be 1: {sigma}")
        if any(a > b for a, b in zip(sigma, sigma[1:])):
            raise ValueError(f"exponents must be non-decreasing: {sigma}")

    @property
    def n(self) -> int:
        return len(self.sigma)

    @property
    def q(self) -> int:
        return homogeneous_dimension(self)

    @property
    def weights(self) -> dict[str, int]:
        return dict(zip(coords(self.n), self.sigma))

    @property
    def generator(self) -> VectorField:
        return infinitesimal_generator(self)


def homogeneous_dimension(d: DilationFamily) -> int:
    return sum(d.sigma)


def infinitesimal_generator(d: DilationFamily) -> VectorField:
    """T = sum_i sigma_i x_i d/dx_i."""
    return VectorField(tuple(s * var(v) for s, v in zip(d.sigma, coords(d.n))), "T")


def t_action(d: DilationFamily, u) -> Expr:
    return apply_field(infinitesimal_generator(d), u)


def is_homogeneous_function(u, d: DilationFamily) -> Fraction | None:
    """The delta-degree of a polynomial if all its monomials share it, else None."""
    u = as_expr(u)
    if not u.terms:
        return None
    degs = u.weighted_degrees(d.weights)
    return degs.pop() if len(degs) == 1 else None


def homogeneity_degree(Y: VectorField, d: DilationFamily) -> Fraction | None:
    """alpha with ``[Y, T] = alpha Y``, or None when Y is not homogeneous.

    The answer is cross-checked against the coefficient test: each a_i must
    be delta-homogeneous of degree sigma_i - alpha.
    """
    if Y.dim != d.n:
        raise ValueError(f"field dimension {Y.dim} does not match dilation dimension {d.n}")
    if Y.is_zero():
        return None
    bracket = lie_bracket(Y, infinitesimal_generator(d))
    i = next(i for i, c in enumerate(Y.coeffs) if c.terms)
    mono, coef = next(iter(Y.coeffs[i].terms.items()))
    alpha = bracket.coeffs[i].terms.get(mono, Fraction(0)) / coef
    ok = all(not (b - alpha * a).terms for a, b in zip(Y.coeffs, bracket.coeffs))
    result = alpha if ok else None
    if result != coefficient_degree(Y, d):
        raise AssertionError(f"bracket and coefficient homogeneity tests disagree on {Y}")
    return result


def coefficient_degree(Y: VectorField, d: DilationFamily) -> Fraction | None:
    """Homogeneity degree from the coefficient test alone."""
    alphas = set()
    for a, s in zip(Y.coeffs, d.sigma):
        if a.terms:
            alphas |= {s - deg for deg in a.weighted_degrees(d.weights)}
    return alphas.pop() if len(alphas) == 1 else None


def is_pyramid_shaped(Y: VectorField) -> bool:
    """a_k depends only on x_1, ..., x_{k-1}."""
    names = coords(Y.dim)
    return all(not (c.free_symbols & set(names[k:])) for k, c in enumerate(Y.coeffs))


# -- exact linear algebra -------------------------------------------------------


def exact_rank(rows: Sequence[Sequence]) -> int:
    """Rank of a rational matrix by fraction-free (Bareiss) elimination."""
    mat = []
    for row in rows:
        fr = [Fraction(x) for x in row]
        den = math.lcm(*(x.denominator for x in fr)) if fr else 1
        mat.append([int(x * den) for x in fr])
    if not mat or not mat[0]:
        return 0
    nrows, ncols = len(mat), len(mat[0])
    rank, prev = 0, 1
    for col in range(ncols):
        pivot = next((r for r in range(rank, nrows) if mat[r][col] != 0), None)
        if pivot is None:
            continue
        mat[rank], mat[pivot] = mat[pivot], mat[rank]
        p = mat[rank][col]
        for r in range(rank + 1, nrows):
            for c in range(col + 1, ncols):
                mat[r][c] = (mat[r][c] * p - mat[rank][c] * mat[r][col]) // prev
            mat[r][col] = 0
        prev = p
        rank += 1
        if rank == nrows:
            break
    return rank


def numeric_rank(rows, rtol: float = 1e-10) -> int:
    m = np.asarray(rows, dtype=float)
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rtol * max(np.linalg.norm(m), np.finfo(float).tiny)))


def _is_rational_point(point) -> bool:
    return all(isinstance(p, (int, Fraction)) and not isinstance(p, bool) for p in point)


def rank_at(fields: Sequence[VectorField], point) -> int:
    """Rank of the field values at a point; exact when the point is rational."""
    if _is_rational_point(point):
        return exact_rank([Y.at(point) for Y in fields])
    return numeric_rank([Y.at_float([float(p) for p in point]) for Y in fields])


def linear_independence_rank(fields: Sequence[VectorField]) -> int:
    """Rank of the family over R, from coefficients in the monomial basis."""
    columns: dict[tuple, int] = {}
    rows = []
    for Y in fields:
        row: dict[int, Fraction] = {}
        for i, c in enumerate(Y.coeffs):
            for mono, coef in c.terms.items():
                row[columns.setdefault((i, mono), len(columns))] = coef
        rows.append(row)
    dense = [[r.get(j, 0) for j in range(len(columns))] for r in rows]
    return exact_rank(dense)


# -- families -----------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """A named family X = {X_1, ..., X_m} together with its dilations."""

    name: str
    fields: tuple[VectorField, ...]
    dilation: DilationFamily

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def n(self) -> int:
        return self.dilation.n


def euclidean(n: int) -> Family:
    fields = tuple(VectorField(partial(i, n).coeffs, f"X{i}") for i in range(1, n + 1))
    return Family(f"euclidean({n})", fields, DilationFamily((1,) * n))


def grushin(n1: int, n2: int, k: int) -> Family:
    """Y_i = d/dy_i and T_ij = y_i^k d/dt_j on R^{n1} x R^{n2}."""
    n = n1 + n2
    if n1 < 1 or n2 < 1 or k < 1:
        raise ValueError("grushin needs n1, n2, k >= 1")
    names = coords(n)
    out = [VectorField(partial(i, n).coeffs, f"Y{i}") for i in range(1, n1 + 1)]
    for i in range(1, n1 + 1):
        for j in range(1, n2 + 1):
            coeffs = [ZERO] * n
            coeffs[n1 + j - 1] = var(names[i - 1]) ** k
            out.append(VectorField(tuple(coeffs), f"T{i}_{j}"))
    return Family(f"grushin({n1},{n2},{k})", tuple(out), DilationFamily((1,) * n1 + (k + 1,) * n2))


def bony(n: int) -> Family:
    """X1 = d/dx1, X2 = sum_{j>=2} x1^{j-1}/(j-1)! d/dx_j."""
    if n < 2:
        raise ValueError("bony needs n >= 2")
    x1 = var("x1")
    coeffs = [ZERO] + [x1 ** (j - 1) / math.factorial(j - 1) for j in range(2, n + 1)]
    X2 = VectorField(tuple(coeffs), "X2")
    return Family(f"bony({n})", (VectorField(partial(1, n).coeffs, "X1"), X2), DilationFamily(tuple(range(1, n + 1))))


def bony_bracket_formula(n: int, i: int) -> VectorField:
    """Closed form of [X1,[X1,...[X1,X2]]] with i copies of X1."""
    x1 = var("x1")
    coeffs = [ZERO] * n
    coeffs[i] = const(1)
    for j in range(2, n - i + 1):
        coeffs[i + j - 1] = x1 ** (j - 1) / math.factorial(j - 1)
    return VectorField(tuple(coeffs), f"Y{i}")


# -- Hörmander checks -----------------------------------------------------------


@dataclass
class H1Report:
    passed: bool
    degrees: dict[str, Fraction | None]
    offending: list[str]
    independent: bool
    rank: int
    pyramid: dict[str, bool]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "degrees": {k: None if v is None else str(v) for k, v in self.degrees.items()},
            "offending": self.offending,
            "independent": self.independent,
            "rank": self.rank,
            "pyramid_shaped": self.pyramid,
        }


def _label(Y: VectorField, i: int) -> str:
    return Y.name or f"X{i + 1}"


def check_H1(fields: Sequence[VectorField], d: DilationFamily) -> H1Report:
    """Every field homogeneous of degree 1 and the family linearly independent over R."""
    degrees: dict[str, Fraction | None] = {}
    offending = []
    for i, Y in enumerate(fields):
        if Y.dim != d.n:
            raise ValueError(f"{_label(Y, i)} lives in R^{Y.dim}, dilation in R^{d.n}")
        deg = homogeneity_degree(Y, d)
        degrees[_label(Y, i)] = deg
        if deg != 1:
            offending.append(_label(Y, i))
    rank = linear_independence_rank(fields)
    independent = rank == len(fields)
    pyramid = {_label(Y, i): is_pyramid_shaped(Y) for i, Y in enumerate(fields)}
    return H1Report(not offending and independent and bool(fields), degrees, offending, independent, rank, pyramid)


@dataclass
class LieBasisReport:
    words: list[str]
    fields: list[VectorField]
    degrees: list[Fraction | None]
    max_step: int
    point: tuple
    matrix: list[list[Fraction]]
    rank: int
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "max_step": self.max_step,
            "note": self.note,
            "point": [str(p) for p in self.point],
            "rank": self.rank,
            "basis": [
                {"word": w, "field": [str(c) for c in Y.coeffs], "degree": None if g is None else str(g)}
                for w, Y, g in zip(self.words, self.fields, self.degrees)
            ],
            "matrix": [[str(x) for x in row] for row in self.matrix],
        }


def _normalized(Y: VectorField) -> tuple:
    """Key identifying Y up to a non-zero rational multiple."""
    for c in Y.coeffs:
        if c.terms:
            lead = min(c.terms.items(), key=lambda item: repr(item[0]))[1]
            return tuple(c2 * (1 / lead) for c2 in Y.coeffs)
    return ()


def generate_lie_basis(
    fields: Sequence[VectorField],
    d: DilationFamily,
    max_step: int | None = None,
    point: Sequence | None = None,
) -> LieBasisReport:
    """Right-nested brackets [X_i1,[X_i2,...,X_is]] up to length max_step.

    Zero brackets and rational multiples of already listed fields are
    dropped.  The default cutoff is sigma_n: a bracket of length s is
    homogeneous of degree s, so at the origin only the components with
    sigma_i = s can be non-zero.
    """
    step = d.sigma[-1] if max_step is None else max_step
    if step > MAX_STEP_CAP:
        raise StepCapExceeded(f"max_step {step} exceeds cap {MAX_STEP_CAP}")
    if step < 1:
        raise ValueError("max_step must be >= 1")
    labels = [_label(Y, i) for i, Y in enumerate(fields)]
    words, out, seen = [], [], set()
    level: list[tuple[str, VectorField, int]] = []
    for i, (w, Y) in enumerate(zip(labels, fields)):
        key = _normalized(Y)
        if key and key not in seen:
            seen.add(key)
            words.append(w)
            out.append(Y)
            level.append((w, Y, i))
    for s in range(2, step + 1):
        nxt = []
        for j, (w, W, first) in enumerate(level):
            for i, (xw, X) in enumerate(zip(labels, fields)):
                # length-2 brackets: skip [Xi,Xj] with i >= j (antisymmetry)
                if s == 2 and i >= first:
                    continue
                B = lie_bracket(X, W)
                key = _normalized(B)
                if not key or key in seen:
                    continue
                seen.add(key)
                word = f"[{xw},{w}]"
                words.append(word)
                out.append(B)
                nxt.append((word, B, i))
        level = nxt
        if not level:
            break
    pt = tuple(point) if point is not None else (0,) * d.n
    matrix = [list(Y.at(pt)) for Y in out] if _is_rational_point(pt) else [list(Y.at_float(pt)) for Y in out]
    rank = rank_at(out, pt)
    degrees = [homogeneity_degree(Y, d) for Y in out]
    note = "default cutoff sigma_n" if max_step is None else "user max_step"
    return LieBasisReport(words, out, degrees, step, pt, matrix, rank, note)


@dataclass
class H2Report:
    passed: bool
    rank: int
    n: int
    point: tuple
    basis: LieBasisReport
    extra: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "rank": self.rank,
            "n": self.n,
            "point": [str(p) for p in self.point],
            "extra_points": self.extra,
            "basis": self.basis.to_dict(),
        }


def check_H2(
    fields: Sequence[VectorField],
    d: DilationFamily,
    point: Sequence | None = None,
    extra_points: Iterable[Sequence] = (),
    max_step: int | None = None,
) -> H2Report:
    """Hörmander rank condition at ``point`` (default the origin)."""
    basis = generate_lie_basis(fields, d, max_step=max_step, point=point)
    extra = {}
    for p in extra_points:
        extra[str(tuple(str(x) for x in p))] = rank_at(basis.fields, tuple(p))
    passed = basis.rank == d.n and all(r == d.n for r in extra.values())
    return H2Report(passed, basis.rank, d.n, basis.point, basis, extra)


def random_rational_points(n: int, count: int, seed: int = 7) -> list[tuple[Fraction, ...]]:
    rng = random.Random(seed)
    return [tuple(Fraction(rng.randint(-20, 20), rng.randint(1, 7)) for _ in range(n)) for _ in range(count)]


def family_from_coefficients(rows: Sequence[Sequence], sigma: Sequence[int], name: str = "explicit") -> Family:
    fields = tuple(field_from(r, f"X{i + 1}") for i, r in enumerate(rows))
    return Family(name, fields, DilationFamily(tuple(sigma)))


def pohozaev_ready(family: Family) -> Mapping[str, bool]:
    """Structural facts the integral identities rely on."""
    return {
        "pyramid_shaped": all(is_pyramid_shaped(Y) for Y in family.fields),
        "divergence_free": all(not Y.divergence().terms for Y in family.fields),
    }
