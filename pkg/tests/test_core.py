"""Exact-core tests: rationals, normalization, zero test, differentiation."""

import math
import random
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcalc.core import (
    CExpr,
    ExpVec,
    LogExprAtom,
    LogPrime,
    LogUnitAtom,
    PolyUnit,
    Term,
    differentiate,
    differentiate_expr,
    expand_ratios,
    factorize,
    frac_pow,
    is_zero,
    log_const,
    normalize,
)
from cfcalc.errors import (
    NotNormalized,
    UnitCertificateViolated,
    ZeroTestUnsupported,
)

rationals = st.fractions(
    min_value=-100, max_value=100, max_denominator=64
)


@given(rationals, rationals)
def test_rational_arithmetic_exact(a, b):
    assert (a + b) - b == a


@given(rationals)
def test_frac_pow_squares(a):
    if a > 0:
        v = frac_pow(a * a, F(1, 2))
        assert v == a or v == -a  # principal root is positive
        assert v == abs(a)


def test_frac_pow_examples():
    assert frac_pow(F(1, 4), F(1, 2)) == F(1, 2)
    assert frac_pow(F(8), F(2, 3)) == 4
    assert frac_pow(F(1, 3), F(1, 2)) is None
    assert frac_pow(F(5), 0) == 1


def test_factorize():
    assert factorize(360) == {2: 3, 3: 2, 5: 1}
    assert factorize(1) == {}
    assert factorize(97) == {97: 1}


def test_log_const_prime_expansion():
    assert log_const(F(4)) == [(LogPrime(2), 2)]
    assert log_const(F(8, 9)) == [(LogPrime(2), 3), (LogPrime(3), -2)]
    assert log_const(F(1)) == []


def test_normalize_merges_like_terms():
    e = CExpr(1, (Term.make(2, [1]), Term.make(3, [1])))
    n = normalize(e)
    assert len(n.terms) == 1
    assert n.terms[0].coeff == 5


def test_normalize_cancellation():
    e = CExpr(1, (Term.make(1, [1]), Term.make(-1, [1])))
    n = normalize(e)
    assert n.terms == ()
    assert is_zero(n)


def test_normalize_unit_merge():
    # y^(1/2)(1 + y/4) + y^(1/2) = y^(1/2) * (2 + y/4): certificate holds
    u = PolyUnit.build(1, {ExpVec.of([1]): F(1, 4)})
    e = CExpr(1, (Term.make(1, [F(1, 2)], unit=u), Term.make(1, [F(1, 2)])))
    n = normalize(e)
    assert len(n.terms) == 1
    t = n.terms[0]
    assert t.coeff == 2 and t.exps[0] == F(1, 2)
    assert t.unit.constant == 1 and t.unit.monos[0][0] == F(1, 8)
    # value preserved at the expanded point y = 1/4
    assert abs(e.eval([0.25]) - n.eval([0.25])) < 1e-15


def test_normalize_distributes_when_units_cancel():
    # y(1 + y/4) - y(1 - y/4) = y^2/2: the merged "unit" has no constant
    up = PolyUnit.build(1, {ExpVec.of([1]): F(1, 4)})
    um = PolyUnit.build(1, {ExpVec.of([1]): F(-1, 4)})
    e = CExpr(1, (Term.make(1, [1], unit=up), Term.make(-1, [1], unit=um)))
    n = normalize(e)
    assert [(t.coeff, t.exps.exps) for t in n.terms] == [(F(1, 2), (F(2),))]


def test_normalize_idempotent_and_value_preserving(rng):
    for _ in range(20):
        terms = []
        for _ in range(rng.randint(1, 5)):
            r = F(rng.randint(-4, 4), 2)
            s = rng.randint(0, 2)
            u = PolyUnit.one()
            if rng.random() < 0.4:
                u = PolyUnit.build(
                    1, {ExpVec.of([rng.randint(1, 2)]): F(rng.choice([-1, 1]), 4)}
                )
            terms.append(Term.make(F(rng.randint(-6, 6) or 1), [r], [s], unit=u))
        e = CExpr(1, tuple(terms))
        n = normalize(e)
        assert normalize(n) == n
        for _ in range(100):
            y = 0.02 + 0.96 * rng.random()
            a, b = e.eval([y]), n.eval([y])
            assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_is_zero_requires_normalized():
    e = CExpr(1, (Term.make(1, [1]), Term.make(1, [1])))
    with pytest.raises(NotNormalized):
        is_zero(e)


def test_is_zero_soundness_positive_case(rng):
    e = normalize(
        CExpr(1, (Term.make(1, [F(1, 2)], [1]), Term.make(-1, [F(1, 2)], [1])))
    )
    assert is_zero(e)
    for _ in range(100):
        y = 0.02 + 0.96 * rng.random()
        assert abs(e.eval([y])) == 0.0


def test_is_zero_soundness_negative_case(rng):
    # nonzero verdict is witnessed along a sliver sample
    from cfcalc.sliver import build_sliver
    from tests.conftest import parabola_wedge

    cell = parabola_wedge()
    e = normalize(
        CExpr(2, (Term.make(1, ExpVec.of([1, 0])), Term.make(-1, ExpVec.of([0, 1]))))
    )
    assert not is_zero(e)
    sl = build_sliver(cell)
    assert any(
        abs(e.eval(sl.psi(sl.sample(rng)))) > 0 for _ in range(50)
    )


def test_is_zero_rejects_opaque_atoms():
    u = PolyUnit.build(1, {ExpVec.of([1]): F(1, 2)})
    e = normalize(CExpr(1, (Term.make(1, [0], extras=[(LogUnitAtom(u), 1)]),)))
    with pytest.raises(ZeroTestUnsupported):
        is_zero(e)


def test_log_const_cancellation_across_terms():
    # 2*log(4)*y - 4*log(2)*y is identically zero; prime canonicalization
    # must see it
    t1 = Term.make(2, [1], extras=[(LogUnitAtom(PolyUnit.constant_unit(4)), 1)])
    t2 = Term.make(-4, [1], extras=[(LogUnitAtom(PolyUnit.constant_unit(2)), 1)])
    assert is_zero(normalize(CExpr(1, (t1, t2))))


def test_unit_certificate_enforced():
    with pytest.raises(UnitCertificateViolated):
        PolyUnit.build(1, {ExpVec.of([1]): F(-3, 2)})
    # one-sided: big positive coefficients are fine on positive monomials
    u = PolyUnit.build(F(1, 2), {ExpVec.of([1]): F(1, 2)})
    assert u.value_bounds() == (F(1, 2), F(1))


def test_unit_positivity_on_samples(rng):
    u = PolyUnit.build(1, {ExpVec.of([1]): F(-1, 3), ExpVec.of([2]): F(1, 5)})
    lo, hi = u.value_bounds()
    assert lo > 0
    for _ in range(200):
        y = rng.random()
        assert lo - 1e-12 <= u.eval([y]) <= hi + 1e-12


@pytest.mark.parametrize(
    "term,expected",
    [
        (Term.make(1, [2]), [(F(2), (F(1),), (0,))]),
        # d/dy (log y)^3/3 = (log y)^2 / y
        (Term.make(F(1, 3), [0], [3]), [(F(1), (F(-1),), (2,))]),
    ],
)
def test_differentiate_examples(term, expected):
    d = differentiate(term, 0)
    got = [(t.coeff, t.exps.exps, t.logpows) for t in d.terms]
    assert got == expected


def test_differentiate_spec_identity():
    # d/dy [(log y)^(s+1)/(s+1)] = (log y)^s / y at s = 2
    d = differentiate(Term.make(F(1, 3), [0], [3]), 0)
    target = CExpr(1, (Term.make(1, [-1], [2]),))
    assert is_zero(normalize(d - target))


def test_differentiate_combination():
    # d/dy [y^(1/2)(2 log y - 4)] = y^(-1/2) log y
    e = CExpr(1, (Term.make(2, [F(1, 2)], [1]), Term.make(-4, [F(1, 2)])))
    d = differentiate_expr(e, 0)
    assert [(t.coeff, t.exps.exps, t.logpows) for t in d.terms] == [
        (F(1), (F(-1, 2),), (1,))
    ]


def _finite_difference(e, y, h):
    return (e.eval([y + h]) - e.eval([y - h])) / (2 * h)


def test_differentiate_matches_finite_differences(rng):
    for _ in range(20):
        terms = []
        for _ in range(rng.randint(1, 3)):
            terms.append(
                Term.make(
                    F(rng.randint(1, 5)),
                    [F(rng.randint(-3, 4), 2)],
                    [rng.randint(0, 2)],
                )
            )
        e = normalize(CExpr(1, tuple(terms)))
        d = differentiate_expr(e, 0)
        for y in (0.25, 0.5, 0.75):
            h = 1e-6 * y
            num = _finite_difference(e, y, h)
            sym = d.eval([y])
            assert abs(num - sym) <= 1e-6 * max(1.0, abs(sym))


def test_expand_ratios_roundtrip(rng):
    from cfcalc.core import RatioFactor

    rf = RatioFactor(ExpVec.of([-1, 1]), F(3, 2), F(1, 2), F(1))
    t = Term.make(2, ExpVec.of([1, 0]), ratios=[rf])
    e = expand_ratios(CExpr(2, (t,)))
    assert e.terms[0].ratios == ()
    for _ in range(50):
        x = 0.05 + 0.9 * rng.random()
        y = x * (0.5 + 0.5 * rng.random()) * 0.999
        assert abs(t.eval([x, y]) - e.terms[0].eval([x, y])) < 1e-12


@settings(max_examples=60)
@given(
    st.lists(
        st.tuples(
            st.fractions(min_value=-3, max_value=3, max_denominator=2).filter(bool),
            st.fractions(min_value=-2, max_value=2, max_denominator=2),
            st.integers(min_value=0, max_value=2),
        ),
        min_size=1,
        max_size=4,
    )
)
def test_sum_normalize_agrees_pointwise(data):
    terms = [Term.make(c, [r], [s]) for c, r, s in data]
    e = CExpr(1, tuple(terms))
    n = normalize(e)
    for y in (0.3, 0.7):
        assert abs(e.eval([y]) - n.eval([y])) <= 1e-9 * max(1.0, abs(e.eval([y])))
