"""Exact closed-form integration in the last variable, and the iterated driver.

The route per prepared term: distribute the polynomial unit (finitely many
monomial pieces), clear the fractional last-variable exponent by y = z^p,
sort the resulting integer powers into a Laurent tail (z^-i, i >= 2), the
z^-1 slot, and an analytic part (z^k, k >= 0), integrate each slab by the
log-power recursions, and evaluate the antiderivative at the monomial
bounds by exact substitution.  Improper endpoints are never approached by
limits: a zero lower bound is legal only when the Laurent part is empty,
and then every antiderivative piece vanishes at 0 by continuous extension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

from .analyze import integrable_locus, sum_integrable_last
from .cells import Cell, FatVar, MonomialBound, Zero
from .core import (
    CExpr,
    ExpVec,
    LogExprAtom,
    LogPrime,
    LogUnitAtom,
    LogVar,
    PolyUnit,
    RatLike,
    Term,
    expand_log_power,
    frac_pow,
    log_const_exponents,
    normalize,
    poly_scale,
)
from .errors import (
    BoundUnitUnsupported,
    FragmentEscape,
    NotIntegrable,
    NotPrepared,
)

# ---------------------------------------------------------------------------
# Antiderivatives of y^r (log y)^s
# ---------------------------------------------------------------------------


def _falling(s: int, k: int) -> int:
    """s * (s-1) * ... * (s-k+1)."""
    out = 1
    for j in range(k):
        out *= s - j
    return out


def antiderivative_pow_log(r: RatLike, s: int) -> CExpr:
    """Closed-form antiderivative of y^r (log y)^s (one ambient variable).

    r = -1: (log y)^(s+1) / (s+1).
    r != -1: y^(r+1) * sum_{k=0}^{s} (-1)^k s!/(s-k)! (log y)^(s-k)/(r+1)^(k+1).
    """
    r = Fraction(r)
    if s < 0:
        raise ValueError("log power must be nonnegative")
    if r == -1:
        return CExpr(1, (Term.make(Fraction(1, s + 1), [0], [s + 1]),))
    terms = []
    for k in range(s + 1):
        c = Fraction((-1) ** k * _falling(s, k), 1) / (r + 1) ** (k + 1)
        terms.append(Term.make(c, [r + 1], [s - k]))
    return normalize(CExpr(1, tuple(terms)))


def antiderivative_pow_log_recursive(r: RatLike, s: int) -> CExpr:
    """The same antiderivative via the integration-by-parts recursion
    (the reference route; must agree with the closed form)."""
    r = Fraction(r)
    if r == -1:
        return CExpr(1, (Term.make(Fraction(1, s + 1), [0], [s + 1]),))
    out = CExpr(1, (Term.make(1 / (r + 1), [r + 1], [s]),))
    if s > 0:
        rest = antiderivative_pow_log_recursive(r, s - 1)
        out = out + rest.scaled(Fraction(-s, 1) / (r + 1))
    return normalize(out)


def _anti_pieces(m: Fraction, s: int) -> list[tuple[Fraction, int, Fraction]]:
    """Antiderivative of z^m (log z)^s as (zpow, logpow, coeff) pieces."""
    return [
        (t.exps[0], t.logpows[0], t.coeff)
        for t in antiderivative_pow_log(m, s).terms
    ]


# ---------------------------------------------------------------------------
# The splitting lemma (three-way split by Y^i Z^j degree difference)
# ---------------------------------------------------------------------------

# polynomial in (X_1..X_N, Y, Z): {(x multidegree, i, j): coefficient}
Poly3 = dict[tuple[tuple[int, ...], int, int], Fraction]


@dataclass(frozen=True)
class SplitSeries:
    """Exact three-way split of F(X, Y, Z) by the degree difference i - j.

    With D standing for the product YZ, the parts reconstruct F as

        Z^2 * part_leq_minus2(X, D, Z) + Z * part_minus1(X, D)
            + part_geq0(X, D, Y).
    """

    part_leq_minus2: dict[tuple[tuple[int, ...], int, int], Fraction]
    part_minus1: dict[tuple[tuple[int, ...], int], Fraction]
    part_geq0: dict[tuple[tuple[int, ...], int, int], Fraction]

    def reconstruct(self) -> Poly3:
        """Substitute D = YZ and expand; must equal the original exactly."""
        out: Poly3 = {}

        def add(key, c):
            out[key] = out.get(key, Fraction(0)) + c
            if out[key] == 0:
                del out[key]

        for (x, d, z), c in self.part_leq_minus2.items():
            add((x, d, d + z + 2), c)
        for (x, d), c in self.part_minus1.items():
            add((x, d, d + 1), c)
        for (x, d, y), c in self.part_geq0.items():
            add((x, d + y, d), c)
        return out


def split(F: Poly3) -> SplitSeries:
    """Split a finite polynomial by i - j of its Y^i Z^j monomials."""
    leq: dict[tuple[tuple[int, ...], int, int], Fraction] = {}
    minus1: dict[tuple[tuple[int, ...], int], Fraction] = {}
    geq: dict[tuple[tuple[int, ...], int, int], Fraction] = {}
    for (x, i, j), c in F.items():
        if c == 0:
            continue
        if i - j <= -2:
            key = (x, i, j - i - 2)
            leq[key] = leq.get(key, Fraction(0)) + c
        elif i - j == -1:
            key2 = (x, i)
            minus1[key2] = minus1.get(key2, Fraction(0)) + c
        else:
            key = (x, j, i - j)
            geq[key] = geq.get(key, Fraction(0)) + c
    return SplitSeries(leq, minus1, geq)


# ---------------------------------------------------------------------------
# Changes of variables in the last coordinate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerSubst:
    """y = z^p for a positive integer p (clears fractional exponents)."""

    p: int


@dataclass(frozen=True)
class ReciprocalSubst:
    """y = d(x)/z for a positive base monomial d."""

    d: Term


@dataclass(frozen=True)
class AffineSubst:
    """y = scale(x) * (z + shift) for a positive base monomial scale."""

    scale: Term
    shift: Fraction = Fraction(0)


SubstRule = Union[PowerSubst, ReciprocalSubst, AffineSubst]


def _require_base_monomial(d: Term, pos: int) -> None:
    if d.coeff <= 0 or any(d.logpows) or d.extras or d.ratios or not d.unit.is_trivial:
        raise FragmentEscape("substitution data must be a positive base monomial")
    if d.exps[pos] != 0:
        raise FragmentEscape("substitution data must not involve the last variable")


def change_of_variables(t: Term, rule: SubstRule) -> CExpr:
    """Rewrite a term under a last-variable change of coordinates, with the
    exact Jacobian factor multiplied in (so integrals are preserved)."""
    nv = t.nvars
    pos = nv - 1
    if pos in t.opaque_support():
        raise FragmentEscape("opaque atoms involving the last variable")
    r = t.exps[pos]
    s = t.logpows[pos]

    if isinstance(rule, PowerSubst):
        p = rule.p
        if p <= 0:
            raise ValueError("power substitution needs a positive integer")
        coeff = t.coeff * p ** (s + 1)
        exps = t.exps.with_entry(pos, p * r + (p - 1))
        unit_poly = {
            (m.with_entry(pos, p * m[pos]) if m[pos] else m): c
            for m, c in t.unit.as_poly(nv).items()
        }
        from .core import poly_is_certifiable_unit, unit_from_poly

        if not poly_is_certifiable_unit(unit_poly):
            raise FragmentEscape("power substitution breaks the unit certificate")
        scale, u = unit_from_poly(unit_poly, nv).monic()
        return CExpr(
            nv,
            (Term.make(coeff * scale, exps, t.logpows, t.extras, t.ratios, u),),
        )

    if isinstance(rule, ReciprocalSubst):
        d = rule.d
        _require_base_monomial(d, pos)
        if pos in t.unit.support():
            raise FragmentEscape("reciprocal substitution under a unit")
        qr = frac_pow(d.coeff, r)
        if qr is None:
            raise FragmentEscape(f"{d.coeff}^{r} is irrational")
        # y^r -> d^r z^-r ; Jacobian dy = d * z^-2 dz
        coeff = t.coeff * qr * d.coeff
        exps = t.exps + d.exps.scale(r) + d.exps
        exps = exps.with_entry(pos, -r - 2)
        base = Term.make(coeff, exps, tuple(t.logpows[:pos]) + (0,),
                         t.extras, t.ratios, t.unit)
        if s == 0:
            return CExpr(nv, (base,))
        # log y = log d - log z
        items = [
            (Fraction(e), LogPrime(pr))
            for pr, e in sorted(log_const_exponents(d.coeff).items())
        ]
        for j, e in enumerate(d.exps):
            if e:
                items.append((e, LogVar(j)))
        items.append((Fraction(-1), LogVar(pos)))
        out = []
        for c, lp, ex in expand_log_power(items, s, nv):
            out.append(
                Term.make(
                    base.coeff * c,
                    base.exps,
                    tuple(a + b for a, b in zip(base.logpows, lp)),
                    tuple(base.extras) + ex,
                    base.ratios,
                    base.unit,
                )
            )
        return CExpr(nv, tuple(out))

    if isinstance(rule, AffineSubst):
        h, q = rule.scale, Fraction(rule.shift)
        _require_base_monomial(h, pos)
        if q < 0:
            raise FragmentEscape("affine shifts must be nonnegative")
        if pos in t.unit.support():
            raise FragmentEscape("affine substitution under a unit")
        if q == 0:
            hr = frac_pow(h.coeff, r)
            if hr is None:
                raise FragmentEscape(f"{h.coeff}^{r} is irrational")
            coeff = t.coeff * hr * h.coeff
            exps = t.exps + h.exps.scale(r) + h.exps
            base = Term.make(coeff, exps, tuple(t.logpows[:pos]) + (0,),
                             t.extras, t.ratios, t.unit)
            if s == 0:
                return CExpr(nv, (base,))
            items = [
                (Fraction(e), LogPrime(pr))
                for pr, e in sorted(log_const_exponents(h.coeff).items())
            ]
            for j, e in enumerate(h.exps):
                if e:
                    items.append((e, LogVar(j)))
            items.append((Fraction(1), LogVar(pos)))
        else:
            if r.denominator != 1 or r < 0:
                raise FragmentEscape(
                    f"power {r} of a shifted coordinate leaves the fragment"
                )
            hr = frac_pow(h.coeff, r)
            assert hr is not None  # integer power
            # (z+q)^r = q^r (1 + z/q)^r, a certifiable unit
            w = PolyUnit.build(1, {ExpVec.unit(nv, pos): 1 / q})
            coeff = t.coeff * hr * (q ** int(r)) * h.coeff
            exps = (t.exps + h.exps.scale(r) + h.exps).with_entry(pos, 0)
            unit = t.unit * w.power(int(r))
            scale, unit = unit.monic()
            base = Term.make(coeff * scale, exps, tuple(t.logpows[:pos]) + (0,),
                             t.extras, t.ratios, unit)
            if s == 0:
                return CExpr(nv, (base,))
            items = [
                (Fraction(e), LogPrime(pr))
                for pr, e in sorted(
                    log_const_exponents(h.coeff * q).items()
                )
            ]
            for j, e in enumerate(h.exps):
                if e:
                    items.append((e, LogVar(j)))
            items.append((Fraction(1), LogUnitAtom(w)))
        out = []
        for c, lp, ex in expand_log_power(items, s, nv):
            out.append(
                Term.make(
                    base.coeff * c,
                    base.exps,
                    tuple(a + b for a, b in zip(base.logpows, lp)),
                    tuple(base.extras) + ex,
                    base.ratios,
                    base.unit,
                )
            )
        return CExpr(nv, tuple(out))

    raise TypeError(f"unknown substitution rule {rule!r}")


# ---------------------------------------------------------------------------
# The claim form and its integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SForm:
    """One prepared summand in claim shape after clearing denominators:

        (sum_i laurent_i(x) z^-i + sum_k analytic_k(x) z^k) (log z)^s

    in z with y = z^p; coefficients are expressions over the base.  When the
    lower bound is zero the Laurent list is empty (integrability gate)."""

    nvars: int
    logpow: int
    p: int
    laurent: tuple[tuple[int, CExpr], ...]
    analytic: tuple[tuple[int, CExpr], ...]
    eps_bound: Fraction = Fraction(1)


def build_sform(t: Term, cell: Cell) -> SForm:
    """Put one prepared term into claim shape over the cell's base.

    The polynomial unit is distributed into finitely many monomial pieces
    (this is what keeps every series in sight finite), the last-variable
    exponent denominators are cleared by y = z^p, and the integer powers are
    sorted into the Laurent/analytic slots."""
    nv = t.nvars
    pos = nv - 1
    if pos in t.opaque_support():
        raise FragmentEscape(
            "opaque unit-log or ratio factors involve the integration variable"
        )
    for atom, _ in t.extras:
        if isinstance(atom, LogExprAtom):
            raise NotPrepared("prepare composite logs before integrating")
    s = t.logpows[pos]
    pieces: list[tuple[Fraction, ExpVec]] = []
    for m, c in poly_scale(t.unit.as_poly(nv), t.coeff).items():
        pieces.append((c, t.exps + m))
    p = 1
    for _, exps in pieces:
        den = exps[pos].denominator
        p = p * den // math.gcd(p, den)
    laurent: dict[int, list[Term]] = {}
    analytic: dict[int, list[Term]] = {}
    base_nv = nv - 1
    for c, exps in pieces:
        zpow = p * exps[pos] + (p - 1)
        assert zpow.denominator == 1
        zpow = int(zpow)
        base_term = Term.make(
            c * p ** (s + 1),
            ExpVec(exps.exps[:pos]),
            tuple(t.logpows[:pos]),
            t.extras,
            t.ratios,
        )
        if zpow <= -1:
            laurent.setdefault(-zpow, []).append(base_term)
        else:
            analytic.setdefault(zpow, []).append(base_term)
    # the claim's smallness bound: sup of the z-range
    _, y_hi = cell.var_interval(pos)
    eps = Fraction(1)
    if y_hi is not None and y_hi < 1:
        root = frac_pow(y_hi, Fraction(1, p))
        eps = root if root is not None else Fraction(1)
    return SForm(
        nv,
        s,
        p,
        tuple(
            (i, normalize(CExpr(base_nv, tuple(ts))))
            for i, ts in sorted(laurent.items())
        ),
        tuple(
            (k, normalize(CExpr(base_nv, tuple(ts))))
            for k, ts in sorted(analytic.items())
        ),
        eps,
    )


def _eval_antider_at_bound(
    pieces: Sequence[tuple[Fraction, int, Fraction]],
    bound: Union[Zero, MonomialBound],
    p: int,
    base_nv: int,
) -> CExpr:
    """Evaluate antiderivative pieces (zpow, logpow, coeff) at z = bound^(1/p).

    Zero bound: every piece must carry a positive power of z, and then the
    continuous extension vanishes (log powers notwithstanding)."""
    if isinstance(bound, Zero):
        for zpow, logpow, _ in pieces:
            if zpow <= 0 and logpow > 0:
                raise NotIntegrable(
                    "log power survives at the zero endpoint"
                )
            if zpow < 0:
                raise NotIntegrable("negative power at the zero endpoint")
        return CExpr.zero(base_nv)
    if not bound.unit.is_trivial:
        raise BoundUnitUnsupported(
            "symbolic bound evaluation needs a trivial unit part"
        )
    q = bound.coeff
    beta = ExpVec(bound.exps.exps[:base_nv])
    out: list[Term] = []
    for zpow, logpow, c in pieces:
        e = Fraction(zpow) / p
        qe = frac_pow(q, e)
        if qe is None:
            raise FragmentEscape(f"{q}^{e} is irrational")
        exps = beta.scale(e)
        if logpow == 0:
            out.append(Term.make(c * qe, exps))
            continue
        # log z = (1/p)(log q + sum beta_j log y_j)
        items = [
            (Fraction(ee, p), LogPrime(pr))
            for pr, ee in sorted(log_const_exponents(q).items())
        ]
        for j, b in enumerate(beta):
            if b:
                items.append((b / p, LogVar(j)))
        for cc, lp, ex in expand_log_power(items, logpow, base_nv):
            out.append(Term.make(c * qe * cc, exps, lp, ex))
    return normalize(CExpr(base_nv, tuple(out)))


def integrate_sform(
    sf: SForm,
    lower: Union[Zero, MonomialBound],
    upper: MonomialBound,
) -> CExpr:
    """Exact integral of the claim form over (lower, upper); bounds are
    monomials with trivial unit part."""
    base_nv = sf.nvars - 1
    if isinstance(lower, Zero) and sf.laurent:
        raise NotIntegrable("Laurent part with a zero lower endpoint")
    if not upper.unit.is_trivial or (
        isinstance(lower, MonomialBound) and not lower.unit.is_trivial
    ):
        raise BoundUnitUnsupported(
            "symbolic bound evaluation needs a trivial unit part"
        )
    total = CExpr.zero(base_nv)
    slabs = [(-i, coeff) for i, coeff in sf.laurent]
    slabs += [(k, coeff) for k, coeff in sf.analytic]
    for zpow, coeff_expr in slabs:
        pieces = _anti_pieces(Fraction(zpow), sf.logpow)
        up = _eval_antider_at_bound(pieces, upper, sf.p, base_nv)
        lo = _eval_antider_at_bound(pieces, lower, sf.p, base_nv)
        total = total + coeff_expr * (up - lo)
    return normalize(total)


def integrate_term_last(t: Term, cell: Cell) -> CExpr:
    """Integrate one prepared term over the last-variable fiber."""
    pos = cell.nvars - 1
    spec = cell.fat(pos)
    if isinstance(spec.lower, Zero) and t.exps[pos] <= -1:
        raise NotIntegrable(
            f"exponent {t.exps[pos]} <= -1 over an unconstrained fiber"
        )
    sf = build_sform(t, cell)
    return integrate_sform(sf, spec.lower, spec.upper)


def integrate_last(e: CExpr, cell: Cell) -> CExpr:
    """Exact parameterized integral of a prepared sum over the last fiber,
    as a constructible expression over the base cell."""
    e = normalize(e)
    if e.nvars != cell.nvars:
        raise ValueError("expression/cell ambient size mismatch")
    verdictless = sum_integrable_last(e, cell, "all")
    if not verdictless.verdict:
        bad = [i for i, ok in enumerate(verdictless.per_term) if not ok]
        raise NotIntegrable(f"terms {bad} are not fiberwise integrable")
    total = CExpr.zero(cell.nvars - 1)
    for t in e.terms:
        total = total + integrate_term_last(t, cell)
    return normalize(total)


# ---------------------------------------------------------------------------
# Iterated integration with integrability gating
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FubiniResult:
    pieces: tuple[tuple[Cell, CExpr], ...]
    assumptions: tuple[str, ...]

    def value(self) -> CExpr:
        """The integral when everything reduced to a single base."""
        if len(self.pieces) != 1:
            raise ValueError(
                f"{len(self.pieces)} base cells remain; no single value"
            )
        return self.pieces[0][1]

    def constant(self) -> Fraction:
        """The exact rational value of a full integration (no log atoms)."""
        v = self.value()
        if not v.terms:
            return Fraction(0)
        return v.eval_exact([])


def integrate_fubini(
    pieces: Sequence[tuple[Cell, CExpr]],
    m: int,
    hypothesis: str = "all",
) -> FubiniResult:
    """Integrate the last m variables, cell by cell, gating each round on
    fiberwise integrability; discarded cells contribute zero (the
    characteristic-function step) and a gating assumption is recorded."""
    work = [(c, normalize(e)) for c, e in pieces]
    assumptions: list[str] = []
    for round_no in range(m):
        locus = integrable_locus(work, hypothesis)
        if locus.discarded:
            if hypothesis == "all":
                failing = [
                    (c, e) for c, e in locus.discarded
                    if isinstance(c.specs[c.nvars - 1], FatVar)
                ]
                if failing:
                    raise NotIntegrable(
                        f"round {round_no + 1}: {len(failing)} cell(s) fail "
                        "fiberwise integrability under the 'all' hypothesis"
                    )
            assumptions.append(
                f"round {round_no + 1}: {len(locus.discarded)} cell(s) "
                "discarded as non-integrable or thin; their contribution is "
                "a null set under the density hypothesis"
            )
        if hypothesis == "dense":
            assumptions.extend(locus.assumptions)
        merged: dict[Cell, CExpr] = {}
        for cell, e in locus.kept:
            base = cell.drop_last()
            val = integrate_last(e, cell)
            if base in merged:
                merged[base] = merged[base] + val
            else:
                merged[base] = val
        work = [(c, normalize(e)) for c, e in merged.items()]
        if not work:
            break
    return FubiniResult(tuple(work), tuple(assumptions))
