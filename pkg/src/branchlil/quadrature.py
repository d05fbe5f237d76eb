"""Adaptive Simpson quadrature for smooth vector/complex-valued integrands.

The integrands met in this package are finite sums of (possibly oscillating)
exponentials, so a plain adaptive Simpson rule with an absolute error target
is both adequate and easy to audit.  Oscillating integrands are pre-split
into panels of at most one eighth of the shortest period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_TOL = 1e-10
MAX_DEPTH = 50
TAIL_TOL = 1e-12


class QuadratureError(ArithmeticError):
    pass


class DivergentIntegral(QuadratureError):
    pass


@dataclass
class QuadResult:
    value: np.ndarray | complex | float
    error: float
    evaluations: int

    def __iter__(self):
        yield self.value
        yield self.error


def _norm(x) -> float:
    return float(np.max(np.abs(x))) if np.ndim(x) else abs(x)


def simpson(f: Callable, a: float, b: float, tol: float = DEFAULT_TOL,
            period: float | None = None, max_depth: int = MAX_DEPTH) -> QuadResult:
    """Integrate ``f`` over ``[a, b]`` to absolute tolerance ``tol``.

    ``f`` may return a scalar or an array; the error is measured in the max
    norm.  ``period`` (shortest oscillation period, if any) forces an initial
    split into panels of length <= period / 8.
    """
    if b < a:
        r = simpson(f, b, a, tol, period, max_depth)
        return QuadResult(-r.value, r.error, r.evaluations)
    if b == a:
        z = np.zeros_like(np.asarray(f(a)) * 0.0)
        return QuadResult(z if np.ndim(z) else 0.0 * z, 0.0, 1)

    n_panels = 1
    if period is not None and period > 0 and np.isfinite(period):
        n_panels = max(1, int(math.ceil((b - a) / (period / 8.0))))
    edges = np.linspace(a, b, n_panels + 1)
    cache: dict[float, np.ndarray] = {}
    evals = 0

    def fx(x):
        nonlocal evals
        v = cache.get(x)
        if v is None:
            v = np.asarray(f(x))
            cache[x] = v
            evals += 1
        return v

    total = 0.0
    err = 0.0
    panel_tol = tol / n_panels
    for lo, hi in zip(edges[:-1], edges[1:]):
        lo, hi = float(lo), float(hi)
        m = 0.5 * (lo + hi)
        fa, fm, fb = fx(lo), fx(m), fx(hi)
        whole = (hi - lo) / 6.0 * (fa + 4 * fm + fb)
        stack = [(lo, hi, fa, fm, fb, whole, panel_tol, 0)]
        while stack:
            lo_, hi_, fa_, fm_, fb_, whole_, tol_, depth = stack.pop()
            mid = 0.5 * (lo_ + hi_)
            lm, rm = 0.5 * (lo_ + mid), 0.5 * (mid + hi_)
            flm, frm = fx(lm), fx(rm)
            left = (mid - lo_) / 6.0 * (fa_ + 4 * flm + fm_)
            right = (hi_ - mid) / 6.0 * (fm_ + 4 * frm + fb_)
            delta = left + right - whole_
            e = _norm(delta) / 15.0
            if e <= tol_ or depth >= max_depth or hi_ - lo_ < 1e-12 * max(1.0, abs(lo_)):
                total = total + left + right + delta / 15.0
                err += e
                continue
            stack.append((mid, hi_, fm_, frm, fb_, right, tol_ / 2, depth + 1))
            stack.append((lo_, mid, fa_, flm, fm_, left, tol_ / 2, depth + 1))
    return QuadResult(total, err, evals)


def integrate_to_infinity(f: Callable, rate: float, bound: float, tol: float = DEFAULT_TOL,
                          period: float | None = None, start: float = 0.0) -> QuadResult:
    """Integrate over ``[start, inf)`` given ``|f(s)| <= bound * exp(-rate * s)``.

    The domain is truncated at ``T*`` where the analytic tail
    ``bound * exp(-rate T*) / rate`` drops below ``TAIL_TOL``; the tail bound
    is added to the reported error.
    """
    if not rate > 0:
        raise DivergentIntegral(f"integrand envelope does not decay (rate={rate})")
    bound = max(float(bound), 1e-300)
    t_star = max(start, math.log(bound / (rate * TAIL_TOL)) / rate)
    tail = bound * math.exp(-rate * t_star) / rate
    r = simpson(f, start, t_star, tol=tol, period=period)
    return QuadResult(r.value, r.error + tail, r.evaluations)
