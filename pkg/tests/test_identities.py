import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import shipped_suite
from hkpoho.calculus import Functional1, Functional2, dirichlet_k_laplacian, horizontal_biharmonic
from hkpoho.fields import bony, euclidean, grushin
from hkpoho.geometry import QuadratureSpec, ball3, disk, ellipse, radial2d
from hkpoho.identities import (
    AuditSampler,
    NotASolution,
    NotDirichlet,
    PreconditionViolated,
    audit_nonexistence_order1,
    audit_nonexistence_order2,
    check_boundary_identity_order2,
    classical_pohozaev_terms,
    default_a0,
    growth_audits,
    growth_verdict,
    verify_poho_order1,
    verify_poho_order2,
    verify_poho_pde,
)
from hkpoho.symbolic import ZERO, EvaluationSingularity, evaluate, parse, var

z = var("z")
E2, G1, B3 = euclidean(2), grushin(1, 1, 1), bony(3)
Q3 = QuadratureSpec(3)
BUMP = parse("(^ (+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2))) 2)")
HALF_SQ = parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)))")
EL_POS = parse("(* 1/2 (+ (^ x1 2) (^ x2 2) -1))")


def test_order1_zero_function():
    F = dirichlet_k_laplacian(2, 2, 3, z**4)
    rep = verify_poho_order1(G1.fields, G1.dilation, F, ZERO, disk(), Q3)
    assert all(t.value == 0 for t in rep.terms)
    assert rep.rel_residual == 0 and rep.passed


def test_order1_examples():
    F = dirichlet_k_laplacian(2, 2, 2, z**4)
    rep = verify_poho_order1(E2.fields, E2.dilation, F, parse("(+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)))"), disk(), Q3)
    assert rep.rel_residual <= 1e-8
    rep = verify_poho_order1(G1.fields, G1.dilation, Functional1(HALF_SQ, 2, 2), parse("(+ (^ x1 2) x2)"), disk(), Q3)
    assert rep.rel_residual <= 1e-8
    names = [t.name for t in rep.terms]
    assert names == [
        "q𝓕 − ⟨𝓕_p,∇_Xu⟩ bulk",
        "T(x↦𝓕) bulk",
        "EL-weighted bulk",
        "𝓕⟨T,ν⟩ boundary",
        "−Tu⟨𝓕_p,ν_X⟩ boundary",
    ]


@pytest.mark.parametrize("case", shipped_suite(), ids=lambda c: c[0])
def test_shipped_suite(case):
    _, fam, F, u, dom = case
    assert verify_poho_order1(fam.fields, fam.dilation, F, u, dom, QuadratureSpec(3)).rel_residual <= 1e-6
    assert verify_poho_order1(fam.fields, fam.dilation, F, u, dom, QuadratureSpec(4)).rel_residual <= 1e-9


def test_residual_convergence_on_curved_domains():
    u = parse("(+ (sin x1) (* x2 (exp x1)))")
    F = dirichlet_k_laplacian(2, 2, 2, z**4 / 4)
    for dom in (ellipse(2, 1, (0.3, 0.1)), radial2d("(+ 1 (* 1/5 (cos (* 3 theta))))")):
        res = [verify_poho_order1(G1.fields, G1.dilation, F, u, dom, QuadratureSpec(lv)).rel_residual for lv in (1, 2, 3, 4)]
        for a, b in zip(res, res[1:]):
            assert b <= a or b <= 1e-14
        assert res[2] <= 1e-6


def test_report_recompute_is_bit_for_bit():
    _, fam, F, u, dom = shipped_suite()[3]
    rep = verify_poho_order1(fam.fields, fam.dilation, F, u, dom, Q3)
    assert rep.recompute() == (rep.lhs, rep.rhs, rep.abs_residual, rep.rel_residual)
    lhs = sum(t.value for t in rep.terms if t.side == "lhs")
    scale = 1 + sum(abs(t.value) for t in rep.terms)
    assert rep.rel_residual == abs(lhs - rep.rhs) / scale
    d = rep.to_dict()
    assert d["rel_residual"] == rep.rel_residual and len(d["terms"]) == 5
    assert "rel residual" in rep.table()


def test_singularity_propagates():
    # k < 2 with a vanishing X-gradient at the origin, which is a volume node of the box rule
    from hkpoho.geometry import box

    F = dirichlet_k_laplacian(2, 2, Fraction(3, 2), 0)
    with pytest.raises(EvaluationSingularity):
        verify_poho_order1(E2.fields, E2.dilation, F, parse("(+ (^ x1 2) (^ x2 2))"), box((-1, 1), (-1, 1)), QuadratureSpec(1, base=5))


def test_pde_classical_example():
    F = Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* 2 z))"), 2, 2)
    out = verify_poho_pde(E2.fields, E2.dilation, F, EL_POS, disk(), Q3, a=(0, 1, Fraction(-1, 2)), dirichlet=True)
    assert out.max_el_residual == 0
    assert out.passed
    assert out.pde.rel_residual <= 1e-8
    assert out.claimed.rel_residual <= 1e-8
    assert set(out.bvp) == {0.0, 1.0, -0.5}
    assert all(r.rel_residual <= 1e-8 for r in out.bvp.values())
    assert out.boundary_reduction_defect <= 1e-10


def test_pde_a_zero_degeneration():
    F = Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* 2 z))"), 2, 2)
    out = verify_poho_pde(E2.fields, E2.dilation, F, EL_POS, disk(), Q3, a=0, dirichlet=True)
    bvp = out.bvp[0.0]
    assert abs(bvp.value("−a·u∂_z𝓕 bulk")) == 0
    assert abs(bvp.lhs - out.pde.lhs) <= 1e-12
    assert abs(bvp.rhs - out.pde.rhs) <= 1e-12


def test_classical_pohozaev_structure():
    # -Delta u + 2 = 0 in the convention above, so G(z) = -2z
    F = Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* 2 z))"), 2, 2)
    rep = classical_pohozaev_terms(F, EL_POS, disk(), Q3)
    assert abs(rep.lhs) <= 1e-8
    assert rep.value("(n−2)/2·|∇u|² bulk") == 0
    # -n ∫ G(u) = 4 ∫ u = -pi and the boundary term is +pi
    assert rep.value("−n·G(u) bulk") == pytest.approx(-math.pi, abs=1e-12)
    assert rep.value("½|∂_νu|²⟨x,ν⟩ boundary") == pytest.approx(math.pi, abs=1e-12)
    with pytest.raises(ValueError):
        classical_pohozaev_terms(dirichlet_k_laplacian(2, 2, 3, 0), EL_POS, disk(), Q3)


def test_not_a_solution():
    F = Functional1(HALF_SQ, 2, 2)
    with pytest.raises(NotASolution) as exc:
        verify_poho_pde(E2.fields, E2.dilation, F, parse("(^ x1 2)"), disk(), Q3)
    assert exc.value.max_residual == pytest.approx(2.0)


def test_not_dirichlet():
    F = Functional1(HALF_SQ, 2, 2)
    out = verify_poho_pde(E2.fields, E2.dilation, F, parse("(+ x1 1)"), disk(), Q3)
    assert out.passed and not out.bvp
    with pytest.raises(NotDirichlet) as exc:
        verify_poho_pde(E2.fields, E2.dilation, F, parse("(+ x1 1)"), disk(), Q3, dirichlet=True)
    assert exc.value.max_value == pytest.approx(2.0)


def test_solution_shortcut():
    F = Functional1(HALF_SQ, 2, 2)
    # X-harmonic functions for each family
    cases = [(E2, parse("(+ (^ x1 2) (* -1 (^ x2 2)))")), (G1, parse("(* x1 x2)"))]
    for fam, u_f in cases:
        r1 = verify_poho_order1(fam.fields, fam.dilation, F, u_f, disk(), Q3)
        pde = verify_poho_pde(fam.fields, fam.dilation, F, u_f, disk(), Q3).pde
        assert abs(r1.value("EL-weighted bulk")) <= 1e-12
        assert abs((r1.lhs - r1.value("EL-weighted bulk")) - pde.lhs) <= 1e-12


@pytest.mark.parametrize("fam", [E2, G1], ids=["euclidean", "grushin"])
def test_boundary_reduction_nodewise(fam, rng):
    F = dirichlet_k_laplacian(2, 2, 3, z**2)
    from hkpoho.identities import _Context, boundary_reduction_defect

    for _ in range(3):
        c = rng.integers(-3, 4, size=3)
        u = parse("(+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)))") * (int(c[0]) + int(c[1]) * var("x1") + int(c[2]) * var("x2"))
        ctx = _Context(fam.fields, fam.dilation, F, u, disk(), Q3)
        ctx.first_order()
        assert boundary_reduction_defect(ctx) <= 1e-10


def test_order2_zero_function():
    F = horizontal_biharmonic(2, 2, z**3)
    rep = verify_poho_order2(G1.fields, G1.dilation, F, ZERO, disk(), Q3)
    assert rep.rel_residual == 0


@pytest.mark.parametrize("fam", [E2, G1], ids=["euclidean", "grushin"])
def test_order2_biharmonic(fam):
    F = horizontal_biharmonic(2, 2, z**4 / 4)
    rep = verify_poho_order2(fam.fields, fam.dilation, F, BUMP, disk(), Q3)
    assert rep.rel_residual <= 1e-7
    spec = rep.specialized
    assert spec is not None and spec.rel_residual <= 1e-7
    # the coefficient (q/2 - 2) multiplies the integral of (Delta_X u)^2
    from hkpoho.calculus import sub_laplacian
    from hkpoho.geometry import volume_integral

    lap_sq, _ = volume_integral(disk(), sub_laplacian(fam.fields, BUMP) ** 2, Q3)
    q = fam.dilation.q
    assert spec.value("(q/2 − 2)(Δ_Xu)² bulk") == pytest.approx((q / 2 - 2) * lap_sq, rel=1e-13, abs=1e-13)


def test_order2_plain_functional2():
    F = Functional2(parse("(* 1/2 (+ r1_1 r2_2) (+ r1_1 r2_2))"), 2, 2)
    rep = verify_poho_order2(E2.fields, E2.dilation, F, BUMP, disk(), Q3)
    assert rep.rel_residual <= 1e-7
    assert rep.specialized is None


@pytest.mark.parametrize("case", shipped_suite(), ids=lambda c: c[0])
def test_order2_degenerates_to_order1(case):
    _, fam, F, u, dom = case
    r1 = verify_poho_order1(fam.fields, fam.dilation, F, u, dom, Q3)
    r2 = verify_poho_order2(fam.fields, fam.dilation, F, u, dom, Q3)
    for t in r1.terms:
        assert abs(r2.value(t.name) - t.value) <= 1e-12
    assert r2.value("−2Σ𝓕_rij X_j(X_iu) bulk") == 0
    assert r2.value("bracket boundary terms") == 0


@pytest.mark.parametrize("fam", [E2, G1], ids=["euclidean", "grushin"])
def test_boundary_identity_order2(fam):
    rep = check_boundary_identity_order2(fam.fields, fam.dilation, BUMP, disk(), Q3, F=horizontal_biharmonic(2, 2, 0))
    assert rep.defect <= 1e-10
    assert rep.induced_f_defect <= 1e-10
    assert rep.passed
    zero = check_boundary_identity_order2(fam.fields, fam.dilation, ZERO, disk(), Q3)
    assert zero.defect == 0 and zero.induced_f_defect is None


def test_boundary_identity_order2_bony():
    u = parse("(^ (+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)) (* -1 (^ x3 2))) 2)")
    rep = check_boundary_identity_order2(B3.fields, B3.dilation, u, ball3(), Q3)
    assert rep.defect <= 1e-10


def test_boundary_identity_precondition():
    with pytest.raises(PreconditionViolated) as exc:
        check_boundary_identity_order2(E2.fields, E2.dilation, parse("(+ 1 (* -1 (^ x1 2)) (* -1 (^ x2 2)))"), disk(), Q3)
    assert len(exc.value.node) == 2


def test_thread_count_does_not_change_results(monkeypatch):
    _, fam, F, u, dom = shipped_suite()[4]
    monkeypatch.setenv("HK_THREADS", "1")
    a = verify_poho_order2(fam.fields, fam.dilation, F, u, dom, Q3).to_dict()
    monkeypatch.setenv("HK_THREADS", "6")
    b = verify_poho_order2(fam.fields, fam.dilation, F, u, dom, Q3).to_dict()
    assert a == b


# -- audits -----------------------------------------------------------------------


def _by_condition(audits):
    return {a.condition: a for a in audits}


def test_audit_k2_euclidean_fails():
    audits = _by_condition(audit_nonexistence_order1(dirichlet_k_laplacian(2, 2, 2, z**4 / 4), E2.dilation, disk()))
    assert audits["i"].passed
    assert not audits["ii"].passed
    assert not audits["growth"].passed and not audits["growth-hor"].passed


def test_audit_grushin_growth():
    audits = _by_condition(audit_nonexistence_order1(dirichlet_k_laplacian(2, 2, 2, z**4 / 4), G1.dilation, disk()))
    assert not audits["growth-hor"].passed
    assert "growth" not in audits  # isotropic version needs q == n
    audits = _by_condition(audit_nonexistence_order1(dirichlet_k_laplacian(2, 2, 2, z**10 / 10), G1.dilation, disk()))
    assert audits["growth-hor"].passed
    assert audits["ii"].passed and audits["ii"].a0 == pytest.approx(0.5)
    assert audits["iii"].passed


def test_audit_condition_i_power_law():
    for k in (Fraction(3, 2), 2, 3):
        audits = _by_condition(audit_nonexistence_order1(dirichlet_k_laplacian(2, 2, k, z**4), G1.dilation, disk()))
        assert audits["i"].passed


def test_audit_explicit_functional_sampled():
    F = Functional1(parse("(+ (* 1/2 (^ p1 2)) (* 1/2 (^ p2 2)) (* -1/4 (^ z 4)))"), 2, 2)
    audits = _by_condition(audit_nonexistence_order1(F, G1.dilation, disk(), AuditSampler(a0_candidates=(Fraction(1, 2),))))
    assert audits["i"].passed
    ii = audits["ii"]
    assert not ii.passed and ii.witnesses
    # q F - (3/2)|p|^2 - z F_z / 2 = -z^4/4
    w = ii.witnesses[0]
    assert w["value"] == pytest.approx(-w["point"]["z"] ** 4 / 4)


def test_default_a0_scan():
    F = dirichlet_k_laplacian(2, 2, 2, z**4)
    assert default_a0(F, G1.dilation) == [Fraction(0), Fraction(1, 6), Fraction(1, 2)]
    assert default_a0(F, G1.dilation, [3]) == [Fraction(3), Fraction(0), Fraction(1, 6), Fraction(1, 2)]
    assert default_a0(Functional1(HALF_SQ, 2, 2), G1.dilation) == [Fraction(0)]


def test_audit_order2_biharmonic():
    F = horizontal_biharmonic(2, 2, 0)
    audits = _by_condition(audit_nonexistence_order2(F, G1.dilation, disk()))
    i = audits["i"]
    assert i.passed
    # value is -(r11 + r22)^2 / 2 on the sampled r box
    assert i.min_value == pytest.approx(-32.0)
    assert i.max_value == 0.0


def test_audit_order2_quadratic_g():
    F = horizontal_biharmonic(2, 2, z**2)
    audits = _by_condition(audit_nonexistence_order2(F, G1.dilation, disk()))
    ii = audits["ii"]
    assert not ii.passed
    # at (z, p, r) = (1, 0, 0) the (ii) expression is q F = -q
    expr = 3 * F.expr
    point = {"z": 1, "p1": 0, "p2": 0, "r1_1": 0, "r1_2": 0, "r2_1": 0, "r2_2": 0}
    assert evaluate(expr, point) == -3
    assert ii.min_value <= -3
    for w in ii.witnesses:
        assert w["value"] < 0


@pytest.mark.parametrize("s", [1, 3, 5])
def test_odd_power_growth_fails(s):
    ok, wz = growth_verdict(z**s / s, Fraction(1, 2))
    assert not ok and wz is not None


@given(st.sampled_from([Fraction(3, 2), 2, 3, 4]), st.integers(2, 6), st.integers(2, 9), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_growth_matches_closed_form(k, n, q, half_s):
    s = 2 * half_s
    growth, hor = growth_audits(z**s / s, k, n, q)
    for audit, rho in ((growth, 1 / Fraction(k) - Fraction(1, n)), (hor, 1 / Fraction(k) - Fraction(1, q))):
        expected = rho > 0 and s > 1 / rho
        assert audit.passed == expected
        assert "disagrees" not in audit.note
