"""
Mixed-integer encodings of piecewise-linear functions.

Each helper returns a new continuous variable that equals the encoded function
at every feasible point. Big-M constants come from the interval bounds of the
argument expressions, so every variable involved must carry finite bounds.
"""
from typing import List, Optional, Sequence
import math

from flexindex.logger import get_logger
from flexindex.milp_backend.model import MilpModel, bounds_of

logger = get_logger('encodings')


def _pad(big_m: float) -> float:
    return big_m * (1.0 + 1e-3) + 1e-3


def encode_abs(model: MilpModel, expr, bound: Optional[float] = None, name: str = 'abs'):
    """Variable a with a = |expr|, |expr| <= bound."""
    if bound is None:
        lb, ub = bounds_of(expr)
        bound = max(abs(lb), abs(ub))
    if not math.isfinite(bound):
        raise ValueError(f"encode_abs needs a finite bound, got {bound}")
    bound = float(bound)
    a = model.var(name, 0.0, bound)
    b = model.var(f"{name}_sign", binary=True)
    model.add(a >= expr)
    model.add(a >= -expr)
    model.add(a <= expr + 2 * bound * (1 - b))
    model.add(a <= -expr + 2 * bound * b)
    model.record_big_m(f"{name}:neg", a - expr, 2 * bound, 1 - b)
    model.record_big_m(f"{name}:pos", a + expr, 2 * bound, b)
    return a


def encode_min(model: MilpModel, exprs: Sequence, name: str = 'min'):
    """Variable m with m = min(exprs)."""
    if not exprs:
        raise ValueError('encode_min needs at least one expression')
    bounds = [bounds_of(e) for e in exprs]
    lo = min(b[0] for b in bounds)
    hi = min(b[1] for b in bounds)
    m = model.var(name, lo, hi)
    if len(exprs) == 1:
        model.add(m == exprs[0])
        return m
    selectors = []
    for i, (e, (_, ub)) in enumerate(zip(exprs, bounds)):
        b = model.var(f"{name}_sel", binary=True)
        selectors.append(b)
        big_m = _pad(ub - lo)
        model.add(m <= e)
        model.add(m >= e - big_m * (1 - b))
        model.record_big_m(f"{name}:{i}", e - m, big_m, 1 - b)
    model.add(sum(selectors) >= 1)
    return m


def encode_max(model: MilpModel, exprs: Sequence, name: str = 'max'):
    """Variable m with m = max(exprs)."""
    if not exprs:
        raise ValueError('encode_max needs at least one expression')
    bounds = [bounds_of(e) for e in exprs]
    lo = max(b[0] for b in bounds)
    hi = max(b[1] for b in bounds)
    m = model.var(name, lo, hi)
    if len(exprs) == 1:
        model.add(m == exprs[0])
        return m
    selectors = []
    for i, (e, (lb, _)) in enumerate(zip(exprs, bounds)):
        b = model.var(f"{name}_sel", binary=True)
        selectors.append(b)
        big_m = _pad(hi - lb)
        model.add(m >= e)
        model.add(m <= e + big_m * (1 - b))
        model.record_big_m(f"{name}:{i}", m - e, big_m, 1 - b)
    model.add(sum(selectors) >= 1)
    return m


def encode_min2(model: MilpModel, e1, e2, name: str = 'min2'):
    return encode_min(model, [e1, e2], name=name)


def encode_clamp(model: MilpModel, expr, lo: float, hi: float, name: str = 'clamp'):
    """Variable c with c = mid(lo, expr, hi)."""
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ValueError(f"encode_clamp needs lo <= hi, got [{lo}, {hi}]")
    lb, ub = bounds_of(expr)
    c = model.var(name, lo, hi)
    b_lo = model.var(f"{name}_lo", binary=True)
    b_hi = model.var(f"{name}_hi", binary=True)
    span = hi - lo
    down = _pad(max(0.0, hi - lb))
    up = _pad(max(0.0, ub - lo))

    model.add(b_lo + b_hi <= 1)
    model.add(c <= lo + span * (1 - b_lo))
    model.add(c >= hi - span * (1 - b_hi))
    model.add(c - expr <= down * (b_lo + b_hi))
    model.add(expr - c <= up * (b_lo + b_hi))
    model.add(expr <= lo + up * (1 - b_lo))
    model.add(expr >= hi - down * (1 - b_hi))
    model.record_big_m(f"{name}:below", expr - lo, up, 1 - b_lo)
    model.record_big_m(f"{name}:above", hi - expr, down, 1 - b_hi)
    return c


def encode_indicator(model: MilpModel, binary, expr, lo: Optional[float] = None, hi: Optional[float] = None,
                     name: str = 'ind'):
    """Enforce lo <= expr <= hi whenever binary = 1."""
    lb, ub = bounds_of(expr)
    if hi is not None and ub > hi:
        big_m = _pad(ub - hi)
        model.add(expr <= hi + big_m * (1 - binary))
        model.record_big_m(f"{name}:hi", expr - hi, big_m, 1 - binary)
    if lo is not None and lb < lo:
        big_m = _pad(lo - lb)
        model.add(expr >= lo - big_m * (1 - binary))
        model.record_big_m(f"{name}:lo", lo - expr, big_m, 1 - binary)


def check_truncation(model: MilpModel, tol: float = 1e-4) -> List[str]:
    """Warn about big-M rows whose slack reached the big-M value at the loaded point."""
    flagged = model.truncated_big_m(tol)
    if flagged:
        logger.warning('Possible big-M truncation in %s: %s', model.name, ', '.join(flagged[:10]))
    return flagged
