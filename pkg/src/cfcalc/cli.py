"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 parse error, 3 fragment escape,
4 not integrable, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from fractions import Fraction

from . import __version__
from .analyze import decay_rate, sum_integrable_last
from .cells import normalize_cell, transform_H
from .core import CExpr, Term, differentiate_expr, is_zero, normalize
from .errors import (
    CalcError,
    DomainError,
    FragmentEscape,
    NotIntegrable,
    ParseError,
)
from .generators import random_integrable_instance
from .integrate import (
    antiderivative_pow_log,
    antiderivative_pow_log_recursive,
    integrate_fubini,
)
from .oracle import divergence_probe, fiber_bounds, quadrature_last
from .parser import parse, print_expr
from .prepare import prepare_expr, substitute_thin
from .sliver import build_sliver


class _Usage(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def _rat_str(q: Fraction) -> str:
    return str(q)


def _read_source(args) -> str:
    if args.input:
        with open(args.input, "r", encoding="utf-8") as fh:
            return fh.read()
    if args.source:
        return args.source
    raise _Usage("provide SOURCE text or --input FILE")


def _emit(args, report: dict, text_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(report, sort_keys=True, separators=(",", ":")))
    else:
        for line in text_lines:
            print(line)


def _pipeline(source: str, with_jacobian: bool):
    """parse -> eliminate thins -> normalize the cell -> pull the expression
    back to the unit box (optionally with the Jacobian folded in)."""
    form = parse(source)
    raw, expr = substitute_thin(form.raw_cell, form.expr)
    norm = normalize_cell(raw)
    pulled = norm.pull_back(expr, with_jacobian=with_jacobian)
    return form, raw, norm, pulled


def _cmd_prepare(args) -> int:
    source = _read_source(args)
    form, raw, norm, pulled = _pipeline(source, with_jacobian=False)
    pieces = prepare_expr(pulled, norm.cell)
    report = {
        "command": "prepare",
        "input": source.strip(),
        "result": {
            "pieces": [
                {
                    "vars": list(norm.names),
                    "terms": print_expr(p.terms, norm.names),
                    "J": list(p.J),
                    "centers": [_rat_str(c) for c in p.centers],
                }
                for p in pieces
            ]
        },
        "status": "ok",
        "tool": "cfcalc",
        "version": __version__,
    }
    lines = [f"prepared pieces: {len(pieces)}"]
    for p in pieces:
        lines.append(f"  J = {list(p.J)}: {print_expr(p.terms, norm.names)}")
    _emit(args, report, lines)
    return 0


def _cmd_integrate(args) -> int:
    source = _read_source(args)
    form, raw, norm, pulled = _pipeline(source, with_jacobian=True)
    m = args.vars
    if m < 1 or m > norm.cell.nvars:
        raise _Usage(f"--vars must be between 1 and {norm.cell.nvars}")
    prepared = prepare_expr(pulled, norm.cell)
    work = [(p.cell, _drop_ratio_free(p.terms)) for p in prepared]
    res = integrate_fubini(work, m, hypothesis=args.hypothesis)
    base_names = norm.names[: norm.cell.nvars - m]
    values = [print_expr(e, base_names) for _, e in res.pieces]
    exact = None
    if len(res.pieces) == 1 and res.pieces[0][0].nvars == 0:
        try:
            exact = _rat_str(res.pieces[0][1].eval_exact([]))
        except (FragmentEscape, CalcError):
            exact = None
    report = {
        "command": "integrate",
        "input": source.strip(),
        "result": {
            "vars": m,
            "values": values,
            "exact": exact,
            "assumptions": list(res.assumptions),
        },
        "status": "ok",
        "tool": "cfcalc",
        "version": __version__,
    }
    lines = [v for v in values] or ["0"]
    if exact is not None and exact not in values:
        lines.append(f"= {exact}")
    _emit(args, report, lines)
    return 0


def _drop_ratio_free(e: CExpr) -> CExpr:
    """Fold absorbed ratio factors back into exponents for integration."""
    from .core import expand_ratios

    return normalize(expand_ratios(e))


def _cmd_check(args) -> int:
    source = _read_source(args)
    form, raw, norm, pulled = _pipeline(source, with_jacobian=True)
    prepared = prepare_expr(pulled, norm.cell)[0]
    res = sum_integrable_last(
        _drop_ratio_free(prepared.terms), norm.cell, args.hypothesis
    )
    rbar = None
    wtext = None
    certificate = None
    if res.report is not None:
        rep = res.report
        rbar = _rat_str(rep.rbar)
        wtext = print_expr(CExpr(norm.cell.nvars, (rep.W,)), norm.names)
        certificate = {
            "lbar": rep.lbar,
            "lbar_prime": rep.lbar_prime,
            "chain": [list(ix) for ix in rep.chain],
            "margin": _rat_str(rep.margin),
            "sliver": {
                "epsilon": _rat_str(rep.sliver.epsilon),
                "box": [[_rat_str(lo), _rat_str(hi)] for lo, hi in rep.sliver.box],
            },
        }
    report = {
        "command": "check-integrability",
        "input": source.strip(),
        "result": {
            "integrable": res.verdict,
            "per_term": list(res.per_term),
            "hypothesis": res.hypothesis,
            "rbar": rbar,
            "W": wtext,
            "certificate": certificate,
        },
        "status": "ok" if res.verdict else "not-integrable",
        "tool": "cfcalc",
        "version": __version__,
    }
    lines = [f"integrable: {res.verdict}"]
    if rbar is not None:
        lines.append(f"rbar = {rbar}, W = {wtext}")
    _emit(args, report, lines)
    return 0 if res.verdict else 4


def _cmd_decay(args) -> int:
    source = _read_source(args)
    form, raw, norm, pulled = _pipeline(source, with_jacobian=False)
    prepared = prepare_expr(pulled, norm.cell)[0]
    dr = decay_rate(_drop_ratio_free(prepared.terms), norm.cell)
    report = {
        "command": "decay-rate",
        "input": source.strip(),
        "result": {
            "r": _rat_str(dr.r),
            "epsilon": _rat_str(dr.epsilon),
            "delta": _rat_str(dr.delta),
            "rbar": _rat_str(dr.report.rbar),
            "lbar": dr.report.lbar,
        },
        "status": "ok",
        "tool": "cfcalc",
        "version": __version__,
    }
    _emit(args, report, [f"r = {dr.r} (rbar = {dr.report.rbar}, "
                         f"eps = {dr.epsilon}, delta = {dr.delta})"])
    return 0


def _cmd_sliver(args) -> int:
    source = _read_source(args)
    form, raw, norm, pulled = _pipeline(source, with_jacobian=False)
    ht = transform_H(norm.cell)
    sl = build_sliver(ht.cell)
    report = {
        "command": "sliver",
        "input": source.strip(),
        "result": {
            "epsilon": _rat_str(sl.epsilon),
            "box": [[_rat_str(lo), _rat_str(hi)] for lo, hi in sl.box],
            "notes": list(sl.notes),
            "transform_steps": len(ht.steps),
        },
        "status": "ok",
        "tool": "cfcalc",
        "version": __version__,
    }
    lines = [f"epsilon = {sl.epsilon}"]
    for (lo, hi), note in zip(sl.box, sl.notes[1:]):
        lines.append(f"  ({lo}, {hi})")
    _emit(args, report, lines)
    return 0


def _cmd_eval(args) -> int:
    source = _read_source(args)
    form = parse(source)
    try:
        point = [float(Fraction(x)) for x in args.at.split(",")]
    except (ValueError, ZeroDivisionError) as exc:
        raise _Usage(f"bad --at point: {exc}")
    if len(point) != form.raw_cell.nvars:
        raise _Usage(
            f"point arity {len(point)} != variable count {form.raw_cell.nvars}"
        )
    value = form.expr.eval(point)
    report = {
        "command": "eval",
        "input": source.strip(),
        "result": {"point": args.at, "value": value},
        "status": "ok",
        "tool": "cfcalc",
        "version": __version__,
    }
    _emit(args, report, [repr(value)])
    return 0


def _cmd_validate(args) -> int:
    seed = args.seed
    rng = random.Random(seed)
    samples = int(os.environ.get("CF_ORACLE_SAMPLES", "20"))
    tol = args.tol
    checks = []

    # antiderivative round trip and route agreement (exact)
    ok = True
    dev = 0.0
    for _ in range(samples):
        r = Fraction(rng.randint(-6, 6), 2)
        s = rng.randint(0, 4)
        anti = antiderivative_pow_log(r, s)
        target = CExpr(1, (Term.make(1, [r], [s]),))
        if not is_zero(normalize(differentiate_expr(anti, 0) - target)):
            ok = False
        if not is_zero(normalize(anti - antiderivative_pow_log_recursive(r, s))):
            ok = False
    checks.append({"name": "antiderivative-roundtrip", "passed": ok,
                   "max_deviation": 0.0})

    # symbolic vs quadrature on random certified-integrable instances
    ok = True
    dev = 0.0
    for _ in range(max(4, samples // 2)):
        cell, e = random_integrable_instance(rng, rng.choice([1, 2]))
        try:
            sym = integrate_fubini([(cell, e)], 1).pieces
        except CalcError:
            continue
        if len(sym) != 1:
            continue
        base_cell, val = sym[0]
        for _ in range(3):
            base_pt = base_cell.sample_point(rng) if base_cell.nvars else []
            lo, hi = fiber_bounds(cell, base_pt)
            num, err = quadrature_last(e, base_pt, lo, hi, tol=1e-10)
            want = val.eval(base_pt)
            d = abs(num - want) / max(1.0, abs(want))
            dev = max(dev, d)
            if d > max(tol, 1e-8):
                ok = False
    checks.append({"name": "quadrature-oracle", "passed": ok,
                   "max_deviation": dev})

    # probe battery
    ok = True
    for rr in (Fraction(-3, 2), Fraction(-1), Fraction(-1, 2)):
        for s in range(4):
            pe = CExpr(1, (Term.make(1, [rr], [s]),))
            rep = divergence_probe(pe, [], 1.0)
            want = "converged" if rr > -1 else "diverged"
            if rep.verdict != want:
                ok = False
    checks.append({"name": "probe-battery", "passed": ok, "max_deviation": 0.0})

    # normalize value preservation
    ok = True
    dev = 0.0
    for _ in range(samples):
        cell, e = random_integrable_instance(rng, 2)
        n = normalize(e)
        for _ in range(3):
            pt = cell.sample_point(rng)
            a, b = e.eval(pt), n.eval(pt)
            d = abs(a - b) / max(1.0, abs(a))
            dev = max(dev, d)
            if d > 1e-12:
                ok = False
    checks.append({"name": "normalize-value-preservation", "passed": ok,
                   "max_deviation": dev})

    passed = all(c["passed"] for c in checks)
    report = {
        "command": "validate",
        "input": "",
        "result": {"seed": seed, "samples": samples, "checks": checks,
                   "passed": passed},
        "status": "ok" if passed else "failed",
        "tool": "cfcalc",
        "version": __version__,
    }
    lines = [
        f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} "
        f"(max deviation {c['max_deviation']:.3e})"
        for c in checks
    ]
    _emit(args, report, lines)
    return 0 if passed else 5


def build_parser() -> _ArgumentParser:
    ap = _ArgumentParser(prog="cfcalc", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, needs_source=True):
        if needs_source:
            p.add_argument("source", nargs="?", help="source text")
            p.add_argument("--input", help="read source from a file")
        p.add_argument("--json", action="store_true", help="JSON report output")
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prepare")
    common(p)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("integrate")
    common(p)
    p.add_argument("--vars", type=int, default=1)
    p.add_argument("--hypothesis", choices=("dense", "all"), default="all")
    p.set_defaults(func=_cmd_integrate)

    p = sub.add_parser("check-integrability")
    common(p)
    p.add_argument("--hypothesis", choices=("dense", "all"), default="dense")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("decay-rate")
    common(p)
    p.set_defaults(func=_cmd_decay)

    p = sub.add_parser("sliver")
    common(p)
    p.set_defaults(func=_cmd_sliver)

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--at", required=True, help="comma-separated rationals")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("validate")
    common(p, needs_source=False)
    p.set_defaults(func=_cmd_validate)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except FragmentEscape as exc:
        print(f"fragment escape: {exc}", file=sys.stderr)
        return 3
    except NotIntegrable as exc:
        print(f"not integrable: {exc}", file=sys.stderr)
        return 4
    except (CalcError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except Exception as exc:  # pragma: no cover
        print(f"internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
