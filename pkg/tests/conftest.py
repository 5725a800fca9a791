from fractions import Fraction

import numpy as np
import pytest
from hypothesis import strategies as st

from hkpoho.symbolic import ZERO, Expr, const, var


def monomial(names, exps, coeff):
    e = const(coeff)
    for name, k in zip(names, exps):
        if k:
            e = e * var(name) ** k
    return e


@st.composite
def polynomials(draw, names=("x1", "x2"), max_degree=3, max_terms=4):
    """Random polynomial with small rational coefficients."""
    count = draw(st.integers(1, max_terms))
    out = ZERO
    for _ in range(count):
        exps = [draw(st.integers(0, max_degree)) for _ in names]
        if sum(exps) > max_degree:
            exps = [min(e, 1) for e in exps]
        num = draw(st.integers(-5, 5))
        den = draw(st.integers(1, 4))
        out = out + monomial(names, exps, Fraction(num, den))
    return out


def random_polynomial(rng: np.random.Generator, names, degree=3, terms=5) -> Expr:
    out = ZERO
    for _ in range(terms):
        exps = rng.integers(0, degree + 1, len(names))
        while exps.sum() > degree:
            exps[rng.integers(len(names))] -= 1
            exps = np.maximum(exps, 0)
        out = out + monomial(names, exps.tolist(), Fraction(int(rng.integers(-6, 7)), int(rng.integers(1, 4))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def shipped_suite():
    """Two (F, u) pairs on each of the Euclidean disk, Grushin disk and Bony ball."""
    from hkpoho.calculus import Functional1, dirichlet_k_laplacian
    from hkpoho.fields import bony, euclidean, grushin
    from hkpoho.geometry import ball3, disk
    from hkpoho.symbolic import parse

    z = var("z")
    E, G, B = euclidean(2), grushin(1, 1, 1), bony(3)
    return [
        ("euclidean-quartic", E, dirichlet_k_laplacian(2, 2, 2, z**4 / 4), parse("(+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)))"), disk()),
        ("euclidean-xdep", E, Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* x1 z p2))"), 2, 2),
         parse("(+ (* x1 x2) x2)"), disk()),
        ("grushin-dirichlet", G, dirichlet_k_laplacian(2, 2, 2, 0), parse("(+ (^ x1 2) x2)"), disk()),
        ("grushin-quartic", G, dirichlet_k_laplacian(2, 2, 4, z**2 / 2), parse("(+ (* x1 x2) x1)"), disk()),
        ("bony-cubic", B, dirichlet_k_laplacian(3, 2, 2, z**3 / 3), parse("(+ (* x1 x3) (^ x2 2))"), ball3()),
        ("bony-xdep", B, Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* x1 p1 z))"), 3, 2),
         parse("(+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)) (* -1 (^ x3 2)))"), ball3()),
    ]


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
