"""Exact scalar expressions over the rationals.

Every expression is held in one canonical shape: a finite sum of rational
coefficients times products of *atoms* raised to positive integer powers.
Atoms are variables (plain strings such as ``"x1"``, ``"z"``, ``"p2"``,
``"r1_2"``), elementary function applications (:class:`Func`) and
non-integer or negative powers (:class:`Power`).  An expression whose atoms
are all variables is a polynomial, and for polynomials the canonical form is
unique, so structural equality decides identity exactly.

Text form is a small prefix grammar::

    (+ (* 2 (^ x1 2)) (sin x2))

with rationals written ``num/den``.  ``(abspow k e1 ... en)`` denotes
``|(e1, ..., en)|^k`` and is stored as ``(e1^2 + ... + en^2)^(k/2)``.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Expr",
    "Func",
    "Power",
    "EvaluationSingularity",
    "UnboundVariable",
    "ParseError",
    "ZERO",
    "ONE",
    "const",
    "var",
    "as_expr",
    "power",
    "sin",
    "cos",
    "exp",
    "log",
    "abs_power",
    "differentiate",
    "substitute",
    "evaluate",
    "evaluate_array",
    "is_zero",
    "parse",
    "to_prefix",
]

Number = Union[int, Fraction]


class EvaluationSingularity(ArithmeticError):
    """Raised when an expression is evaluated at a point where it is undefined."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class UnboundVariable(LookupError):
    pass


class ParseError(ValueError):
    pass


# -- variable ordering --------------------------------------------------------

_PREFIX_RANK = {"x": 0, "z": 1, "p": 2, "r": 3, "nu": 4, "theta": 5, "phi": 6}
_NAME_RE = re.compile(r"^([A-Za-z]+)((?:\d+)(?:_\d+)*)?$")


@lru_cache(maxsize=None)
def var_key(name: str) -> tuple:
    """Sort key for variable names: x1 < x2 < ... < z < p1 < ... < r1_1 < ..."""
    m = _NAME_RE.match(name)
    if m is None:
        return (99, name, ())
    prefix, digits = m.group(1), m.group(2) or ""
    idx = tuple(int(d) for d in digits.split("_")) if digits else ()
    return (_PREFIX_RANK.get(prefix, 50), prefix, idx)


def _atom_key(atom) -> tuple:
    if isinstance(atom, str):
        return (0, var_key(atom))
    return atom.sort_key


# -- atoms --------------------------------------------------------------------


@dataclass(frozen=True)
class Func:
    """Elementary function applied to an expression."""

    name: str
    arg: "Expr"

    @cached_property
    def sort_key(self) -> tuple:
        return (1, self.name, self.arg.sort_key)


@dataclass(frozen=True)
class Power:
    """``base ** exponent`` for exponents that are not non-negative integers."""

    base: "Expr"
    exponent: Fraction

    @cached_property
    def sort_key(self) -> tuple:
        return (2, self.base.sort_key, self.exponent)


FUNCTIONS = ("sin", "cos", "exp", "log")


# -- expressions --------------------------------------------------------------


def _mono_mul(a: tuple, b: tuple) -> tuple:
    if not a:
        return b
    if not b:
        return a
    acc = dict(a)
    for atom, k in b:
        acc[atom] = acc.get(atom, 0) + k
    return tuple(sorted(acc.items(), key=lambda item: _atom_key(item[0])))


class Expr:
    """Immutable canonical expression; see the module docstring."""

    def __init__(self, terms: Mapping[tuple, Fraction] | None = None):
        self.terms: dict[tuple, Fraction] = (
            {m: c for m, c in terms.items() if c != 0} if terms else {}
        )
        self._hash = None

    # structural identity
    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self.terms.items()))
        return self._hash

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, Fraction)):
            other = const(other)
        if not isinstance(other, Expr):
            return NotImplemented
        return self is other or self.terms == other.terms

    @cached_property
    def sort_key(self) -> tuple:
        return tuple(
            sorted(
                (tuple((_atom_key(a), k) for a, k in mono), c)
                for mono, c in self.terms.items()
            )
        )

    # classification
    @cached_property
    def is_polynomial(self) -> bool:
        return all(isinstance(a, str) for mono in self.terms for a, _ in mono)

    @property
    def is_constant(self) -> bool:
        return not self.terms or (len(self.terms) == 1 and () in self.terms)

    @property
    def constant_value(self) -> Fraction:
        if not self.is_constant:
            raise ValueError(f"not a constant: {self}")
        return self.terms.get((), Fraction(0))

    @cached_property
    def free_symbols(self) -> frozenset[str]:
        out: set[str] = set()
        for mono in self.terms:
            for atom, _ in mono:
                if isinstance(atom, str):
                    out.add(atom)
                elif isinstance(atom, Func):
                    out |= atom.arg.free_symbols
                else:
                    out |= atom.base.free_symbols
        return frozenset(out)

    def degree(self, weights: Mapping[str, Number] | None = None) -> Fraction:
        """Largest (weighted) degree over the monomials of a polynomial."""
        degs = self.weighted_degrees(weights)
        if not degs:
            raise ValueError("degree of the zero polynomial")
        return max(degs)

    def weighted_degrees(self, weights: Mapping[str, Number] | None = None) -> set[Fraction]:
        if not self.is_polynomial:
            raise ValueError("weighted degree is defined for polynomials only")
        w = weights or {}
        return {
            sum((Fraction(w.get(a, 1)) * k for a, k in mono), Fraction(0))
            for mono in self.terms
        }

    # arithmetic
    def __add__(self, other) -> Expr:
        other = as_expr(other)
        if not other.terms:
            return self
        if not self.terms:
            return other
        acc = dict(self.terms)
        for m, c in other.terms.items():
            acc[m] = acc.get(m, 0) + c
        return Expr(acc)

    __radd__ = __add__

    def __neg__(self) -> Expr:
        return Expr({m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> Expr:
        return self + (-as_expr(other))

    def __rsub__(self, other) -> Expr:
        return as_expr(other) - self

    def __mul__(self, other) -> Expr:
        other = as_expr(other)
        if not self.terms or not other.terms:
            return ZERO
        if other.is_constant:
            c = other.constant_value
            return Expr({m: v * c for m, v in self.terms.items()})
        if self.is_constant:
            return other * self
        acc: dict[tuple, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = _mono_mul(m1, m2)
                acc[m] = acc.get(m, 0) + c1 * c2
        return Expr(acc)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Expr:
        other = as_expr(other)
        if other.is_constant:
            c = other.constant_value
            if c == 0:
                raise ZeroDivisionError("division by the zero expression")
            return self * Expr({(): 1 / c})
        return self * power(other, -1)

    def __rtruediv__(self, other) -> Expr:
        return as_expr(other) / self

    def __pow__(self, k) -> Expr:
        return power(self, k)

    def __repr__(self) -> str:
        return f"Expr({to_prefix(self)!r})"

    def __str__(self) -> str:
        return to_prefix(self)


ZERO = Expr()
ONE = Expr({(): Fraction(1)})


def _to_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, bool):
        raise TypeError("bool is not a coefficient")
    if isinstance(c, int):
        return Fraction(c)
    if isinstance(c, float):
        if not math.isfinite(c):
            raise ValueError(f"non-finite coefficient {c}")
        return Fraction(repr(c))
    if isinstance(c, str):
        return Fraction(c)
    raise TypeError(f"cannot convert {type(c).__name__} to a rational")


def const(c) -> Expr:
    c = _to_fraction(c)
    return Expr({(): c}) if c else ZERO


def var(name: str) -> Expr:
    if not _NAME_RE.match(name):
        raise ValueError(f"invalid variable name {name!r}")
    return Expr({((name, 1),): Fraction(1)})


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return parse(value)
    return const(value)


def _atom_expr(atom, k: int = 1) -> Expr:
    return Expr({((atom, k),): Fraction(1)})


def _pow_int(e: Expr, k: int) -> Expr:
    result, base = ONE, e
    while k:
        if k & 1:
            result = result * base
        k >>= 1
        if k:
            base = base * base
    return result


def power(base, exponent) -> Expr:
    """``base ** exponent`` with a rational exponent."""
    base = as_expr(base)
    e = _to_fraction(exponent)
    if e == 0:
        return ONE
    if e.denominator == 1 and e > 0:
        k = int(e)
        if len(base.terms) == 1:
            # single term: raise coefficient and exponents directly
            (mono, c), = base.terms.items()
            return Expr({tuple((a, j * k) for a, j in mono): c**k})
        return _pow_int(base, k)
    if base.is_constant:
        c = base.constant_value
        if e.denominator == 1:
            if c == 0:
                raise EvaluationSingularity("zero raised to a negative power")
            return const(c ** int(e))
        if c == 0:
            return ZERO
    if e == 1:
        return base
    return _atom_expr(Power(base, e))


def _func(name: str, arg) -> Expr:
    arg = as_expr(arg)
    if arg.is_constant:
        c = arg.constant_value
        if c == 0 and name in ("sin",):
            return ZERO
        if c == 0 and name in ("cos", "exp"):
            return ONE
        if c == 1 and name == "log":
            return ZERO
    return _atom_expr(Func(name, arg))


def sin(arg) -> Expr:
    return _func("sin", arg)


def cos(arg) -> Expr:
    return _func("cos", arg)


def exp(arg) -> Expr:
    return _func("exp", arg)


def log(arg) -> Expr:
    return _func("log", arg)


def abs_power(components: Sequence, k) -> Expr:
    """``|v|^k`` for a vector ``v`` of expressions, as ``(sum v_i^2)^(k/2)``."""
    k = _to_fraction(k)
    if k <= 1:
        raise ValueError(f"abs_power requires k > 1, got {k}")
    square = sum((as_expr(c) * as_expr(c) for c in components), ZERO)
    return power(square, k / 2)


# -- differentiation ----------------------------------------------------------


def _diff_atom(atom, v: str) -> Expr:
    if isinstance(atom, str):
        return ONE if atom == v else ZERO
    if isinstance(atom, Func):
        inner = differentiate(atom.arg, v)
        if not inner.terms:
            return ZERO
        if atom.name == "sin":
            outer = cos(atom.arg)
        elif atom.name == "cos":
            outer = -sin(atom.arg)
        elif atom.name == "exp":
            outer = _atom_expr(atom)
        else:
            outer = power(atom.arg, -1)
        return outer * inner
    inner = differentiate(atom.base, v)
    if not inner.terms:
        return ZERO
    return const(atom.exponent) * power(atom.base, atom.exponent - 1) * inner


def _depends_on(atom, v: str) -> bool:
    if isinstance(atom, str):
        return atom == v
    return v in (atom.arg if isinstance(atom, Func) else atom.base).free_symbols


@lru_cache(maxsize=65536)
def differentiate(e: Expr, v: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to the variable ``v``."""
    if v not in e.free_symbols:
        return ZERO
    acc: dict[tuple, Fraction] = {}
    extra = ZERO
    for mono, c in e.terms.items():
        for pos, (atom, k) in enumerate(mono):
            if not _depends_on(atom, v):
                continue
            rest = mono[:pos] + ((atom, k - 1),) + mono[pos + 1 :] if k > 1 else mono[:pos] + mono[pos + 1 :]
            if isinstance(atom, str):
                acc[rest] = acc.get(rest, 0) + c * k
            else:
                extra = extra + Expr({rest: c * k}) * _diff_atom(atom, v)
    return Expr(acc) + extra


# -- substitution -------------------------------------------------------------


def substitute(e: Expr, mapping: Mapping[str, object]) -> Expr:
    """Replace variables by expressions (simultaneously)."""
    repl = {k: as_expr(v) for k, v in mapping.items()}
    if not repl or not (e.free_symbols & repl.keys()):
        return e
    return _subs(e, repl, {})


def _subs(e: Expr, repl: dict, memo: dict) -> Expr:
    if not (e.free_symbols & repl.keys()):
        return e
    out = ZERO
    for mono, c in e.terms.items():
        term = const(c)
        for atom, k in mono:
            key = (atom, k)
            if key not in memo:
                memo[key] = _pow_int(_subs_atom(atom, repl, memo), k)
            term = term * memo[key]
        out = out + term
    return out


def _subs_atom(atom, repl: dict, memo: dict) -> Expr:
    if isinstance(atom, str):
        return repl.get(atom, _atom_expr(atom))
    if isinstance(atom, Func):
        return _func(atom.name, _subs(atom.arg, repl, memo))
    return power(_subs(atom.base, repl, memo), atom.exponent)


# -- evaluation ---------------------------------------------------------------


def _fraction_point(point: Mapping[str, object]) -> dict[str, Fraction]:
    out = {}
    for k, v in point.items():
        if isinstance(v, float):
            out[k] = Fraction(v)
        else:
            out[k] = _to_fraction(v)
    return out


def evaluate(e: Expr, point: Mapping[str, object]) -> float:
    """Evaluate at a point; polynomials are summed exactly and rounded once."""
    missing = e.free_symbols - point.keys()
    if missing:
        raise UnboundVariable(", ".join(sorted(missing, key=var_key)))
    if e.is_polynomial:
        return float(_eval_exact(e, _fraction_point(point)))
    return _eval_float(e, {k: float(v) for k, v in point.items()}, {})


def _eval_exact(e: Expr, point: dict[str, Fraction]) -> Fraction:
    total = Fraction(0)
    for mono, c in e.terms.items():
        t = c
        for atom, k in mono:
            t *= point[atom] ** k
        total += t
    return total


# a negative power base this close to zero, relative to the size of its
# terms, is cancellation round-off (typically an expanded sum of squares)
ROUNDOFF = 64 * np.finfo(float).eps


def _eval_float(e: Expr, point: dict[str, float], memo: dict, scale: list | None = None) -> float:
    total = 0.0
    size = 0.0
    for mono, c in e.terms.items():
        t = float(c)
        for atom, k in mono:
            if atom not in memo:
                memo[atom] = _eval_atom_float(atom, point, memo)
            t *= memo[atom] ** k
        total += t
        size += abs(t)
    if scale is not None:
        scale.append(size)
    return total


def _eval_atom_float(atom, point, memo) -> float:
    if isinstance(atom, str):
        return point[atom]
    if isinstance(atom, Func):
        a = _eval_float(atom.arg, point, memo)
        if atom.name == "log":
            if a <= 0:
                raise EvaluationSingularity(f"log of non-positive value {a!r}")
            return math.log(a)
        return getattr(math, atom.name)(a)
    size: list = []
    b = _eval_float(atom.base, point, memo, size)
    ex = atom.exponent
    if ex.denominator != 1 and b < 0 and -b <= ROUNDOFF * size[0]:
        b = 0.0
    if b == 0 and ex < 0:
        raise EvaluationSingularity(f"zero raised to negative power {ex}")
    if b < 0 and ex.denominator != 1:
        raise EvaluationSingularity(f"negative base {b!r} raised to non-integer power {ex}")
    if ex.denominator == 1:
        return b ** int(ex)
    return b ** float(ex)


def evaluate_array(e: Expr, env: Mapping[str, object], *, strict: bool = True) -> np.ndarray:
    """Vectorised floating-point evaluation over arrays of points.

    ``env`` maps each free variable to a 1-d array (or scalar); the result
    broadcasts to the common shape.  Singular nodes raise
    :class:`EvaluationSingularity` carrying the first offending index, or
    become NaN when ``strict`` is false.
    """
    missing = e.free_symbols - env.keys()
    if missing:
        raise UnboundVariable(", ".join(sorted(missing, key=var_key)))
    arrays = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    shape = np.broadcast_shapes(*(a.shape for a in arrays.values())) if arrays else ()
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _eval_arr(e, arrays, {}, {}, strict)
    return np.broadcast_to(out, shape).astype(float)


def _eval_arr(e: Expr, env, memo, powers, strict=True, scale: list | None = None):
    total = np.zeros(())
    size = np.zeros(())
    for mono, c in e.terms.items():
        t = np.asarray(float(c))
        for atom, k in mono:
            key = (atom, k)
            if key not in powers:
                if atom not in memo:
                    memo[atom] = _eval_atom_arr(atom, env, memo, powers, strict)
                powers[key] = memo[atom] ** k if k > 1 else memo[atom]
            t = t * powers[key]
        total = total + t
        if scale is not None:
            size = size + np.abs(t)
    if scale is not None:
        scale.append(size)
    return total


def _first_index(mask) -> int:
    return int(np.flatnonzero(np.atleast_1d(mask))[0])


def _eval_atom_arr(atom, env, memo, powers, strict=True):
    if isinstance(atom, str):
        return env[atom]
    if isinstance(atom, Func):
        a = _eval_arr(atom.arg, env, memo, powers, strict)
        if atom.name == "log":
            bad = a <= 0
            if not strict:
                return np.where(bad, np.nan, np.log(np.where(bad, 1.0, a)))
            if np.any(bad):
                raise EvaluationSingularity("log of non-positive value", _first_index(bad))
            return np.log(a)
        return getattr(np, atom.name)(a)
    size: list = []
    b = _eval_arr(atom.base, env, memo, powers, strict, size)
    ex = atom.exponent
    if ex.denominator != 1:
        b = np.where((b < 0) & (-b <= ROUNDOFF * size[0]), 0.0, b)
    bad = (b == 0) if ex < 0 else np.zeros(np.shape(b), dtype=bool)
    if ex.denominator != 1:
        bad = bad | (b < 0)
    if not strict and np.any(bad):
        safe = np.where(bad, 1.0, b)
        return np.where(bad, np.nan, np.power(safe, float(ex)))
    if np.any(bad):
        raise EvaluationSingularity(f"singular power with exponent {ex}", _first_index(bad))
    if ex.denominator == 1:
        return np.asarray(b, dtype=float) ** int(ex)
    return np.power(b, float(ex))


# -- zero test ----------------------------------------------------------------

ZERO_TEST_POINTS = 32


def is_zero(e: Expr, *, tol: float = 1e-9) -> bool:
    """True iff ``e`` is the zero function.

    Exact for polynomials.  For trees containing function or power atoms this
    falls back to evaluation at 32 pseudo-random points in ``[1/4, 5/4]``;
    a ``False`` answer is certain, a ``True`` answer is probabilistic.
    """
    if not e.terms:
        return True
    if e.is_polynomial:
        return False
    rng = random.Random(20240521)
    names = sorted(e.free_symbols, key=var_key)
    checked = 0
    for _ in range(4 * ZERO_TEST_POINTS):
        pt = {v: 0.25 + rng.random() for v in names}
        try:
            value = _eval_float(e, pt, {})
            scale = sum(abs(_eval_float(Expr({m: c}), pt, {})) for m, c in e.terms.items())
        except (EvaluationSingularity, OverflowError, ValueError):
            continue
        if abs(value) > tol * max(1.0, scale):
            return False
        checked += 1
        if checked == ZERO_TEST_POINTS:
            return True
    return checked > 0


# -- text form ----------------------------------------------------------------


def _fmt_rational(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def _display_key(item):
    mono, _ = item
    deg = sum(k for _, k in mono)
    return (-deg, tuple((_atom_key(a), -k) for a, k in mono))


def _fmt_atom(atom) -> str:
    if isinstance(atom, str):
        return atom
    if isinstance(atom, Func):
        return f"({atom.name} {to_prefix(atom.arg)})"
    return f"(^ {to_prefix(atom.base)} {_fmt_rational(atom.exponent)})"


def to_prefix(e: Expr) -> str:
    """Serialise to the prefix grammar; terms appear in graded-lex order."""
    if not e.terms:
        return "0"
    parts = []
    for mono, c in sorted(e.terms.items(), key=_display_key):
        factors = [_fmt_atom(a) if k == 1 else f"(^ {_fmt_atom(a)} {k})" for a, k in mono]
        if not factors:
            parts.append(_fmt_rational(c))
        elif c == 1 and len(factors) == 1:
            parts.append(factors[0])
        elif c == 1:
            parts.append("(* " + " ".join(factors) + ")")
        else:
            parts.append("(* " + " ".join([_fmt_rational(c)] + factors) + ")")
    return parts[0] if len(parts) == 1 else "(+ " + " ".join(parts) + ")"


_TOKEN_RE = re.compile(r"\s*(\(|\)|[^\s()]+)")
_NUMBER_RE = re.compile(r"^[+-]?(\d+(/\d+)?|\d*\.\d+([eE][+-]?\d+)?|\d+[eE][+-]?\d+)$")


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character at {pos} in {text!r}")
        out.append(m.group(1))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


def parse(text: str) -> Expr:
    """Parse the prefix grammar produced by :func:`to_prefix`."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression")
    expr, pos = _parse_at(tokens, 0)
    if pos != len(tokens):
        raise ParseError(f"trailing tokens in {text!r}")
    return expr


def _parse_rational(tok: str) -> Fraction:
    if not _NUMBER_RE.match(tok):
        raise ParseError(f"expected a number, got {tok!r}")
    return Fraction(tok)


def _parse_at(tokens: list[str], pos: int) -> tuple[Expr, int]:
    if pos >= len(tokens):
        raise ParseError("unexpected end of expression")
    tok = tokens[pos]
    if tok == ")":
        raise ParseError("unexpected ')'")
    if tok != "(":
        if _NUMBER_RE.match(tok):
            return const(Fraction(tok)), pos + 1
        if not _NAME_RE.match(tok):
            raise ParseError(f"invalid symbol {tok!r}")
        return var(tok), pos + 1
    if pos + 1 >= len(tokens):
        raise ParseError("unexpected end of expression")
    op = tokens[pos + 1]
    pos += 2
    if op in ("^", "abspow"):
        if op == "^":
            base, pos = _parse_at(tokens, pos)
            if pos >= len(tokens):
                raise ParseError("missing exponent")
            e = _parse_rational(tokens[pos])
            pos += 1
            result = power(base, e)
        else:
            k = _parse_rational(tokens[pos])
            pos += 1
            comps = []
            while pos < len(tokens) and tokens[pos] != ")":
                c, pos = _parse_at(tokens, pos)
                comps.append(c)
            result = abs_power(comps, k)
        if pos >= len(tokens) or tokens[pos] != ")":
            raise ParseError(f"expected ')' after ({op} ...)")
        return result, pos + 1
    args = []
    while pos < len(tokens) and tokens[pos] != ")":
        a, pos = _parse_at(tokens, pos)
        args.append(a)
    if pos >= len(tokens):
        raise ParseError("missing ')'")
    pos += 1
    if op == "+":
        return sum(args, ZERO), pos
    if op == "*":
        out = ONE
        for a in args:
            out = out * a
        return out, pos
    if op == "-":
        if len(args) == 1:
            return -args[0], pos
        if not args:
            raise ParseError("(-) needs arguments")
        return args[0] - sum(args[1:], ZERO), pos
    if op == "/":
        if len(args) != 2:
            raise ParseError("(/ a b) takes two arguments")
        return args[0] / args[1], pos
    if op in FUNCTIONS:
        if len(args) != 1:
            raise ParseError(f"({op} a) takes one argument")
        return _func(op, args[0]), pos
    raise ParseError(f"unknown operator {op!r}")


def variables(prefix: str, count: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i}" for i in range(1, count + 1))


def gradient(e: Expr, names: Iterable[str]) -> tuple[Expr, ...]:
    return tuple(differentiate(e, v) for v in names)
