"""Second-order branching functional and the deterministic limit constants.

``theta(model, f, g)`` is the bilinear offspring pair-correlation (BMP) or
``2 b f g`` plus the jump quadratic form (SP).  Two conventions exist for
BMPs:

* ``AS_STATED``: the pair functional alone, i.e. the variance formula
  ``Var = int_0^t T_{t-s}(theta[T_s f]) ds`` taken literally;
* ``CLASSICAL``: adds the motion/branching spread
  ``sum_y Q[x,y](f_y - f_x)(g_y - g_x) + beta_x E[(k.f - f_x)(k.g - g_x)]``
  minus the pair term already counted, which makes the same integral equal to
  the exact BMP variance.

For superprocesses the two coincide.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import Model
from .quadrature import DivergentIntegral, QuadResult, integrate_to_infinity, simpson
from .spectral import SpectralContext, normalized_semigroup

REGIME_RTOL = 1e-9
REAL_ATOL = 1e-12


class Convention(str, enum.Enum):
    AS_STATED = "as-stated"
    CLASSICAL = "classical"

    @classmethod
    def parse(cls, value) -> "Convention":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().replace("_", "-"))


class Regime(str, enum.Enum):
    SUB = "sub"
    CRIT = "crit"
    SUPER = "super"


def theta(model: Model, f, g, convention=Convention.AS_STATED) -> np.ndarray:
    """Bilinear branching functional theta[f, g] as a vector over types."""
    f = np.asarray(f)
    g = np.asarray(g)
    conv = Convention.parse(convention)
    dtype = np.result_type(f, g, float)
    out = np.zeros(model.d, dtype=dtype)
    if model.kind == "sp":
        out += 2.0 * model.b * f * g
        for x, atoms in enumerate(model.jumps):
            if atoms.n_atoms:
                out[x] += np.sum(atoms.rates * (atoms.masses @ f) * (atoms.masses @ g))
        return out
    for x, law in enumerate(model.offspring):
        k = law.counts.astype(float)
        kf, kg = k @ f, k @ g
        if conv is Convention.AS_STATED:
            out[x] = model.beta[x] * np.dot(law.probs, kf * kg - k @ (f * g))
        else:
            out[x] = model.beta[x] * np.dot(law.probs, (kf - f[x]) * (kg - g[x]))
            out[x] += np.dot(model.Q[x], (f - f[x]) * (g - g[x]))
    return out


def theta_bound(model: Model, convention=Convention.AS_STATED) -> float:
    """C with ``|theta[u, v](x)| <= C ||u|| ||v||`` for all x (sup norms)."""
    conv = Convention.parse(convention)
    if model.kind == "sp":
        jump = [float(np.sum(a.rates * a.masses.sum(axis=1) ** 2)) if a.n_atoms else 0.0 for a in model.jumps]
        return float(np.max(2 * model.b + np.array(jump)))
    vals = []
    for x, law in enumerate(model.offspring):
        n = law.counts.sum(axis=1).astype(float)
        if conv is Convention.AS_STATED:
            vals.append(model.beta[x] * np.dot(law.probs, n * n + n))
        else:
            vals.append(model.beta[x] * np.dot(law.probs, (n + 1) ** 2) + 4 * abs(model.Q[x, x]))
    return float(max(vals))


def f_factor(s: float, z) -> complex:
    """F_s(z) = (exp(s z) - 1) / z, continuous at z = 0 where it equals s."""
    if not s > 0:
        raise ValueError("s must be > 0")
    z = complex(z)
    sz = s * z
    if abs(sz) < 1e-6:
        return s * (1 + sz / 2 + sz * sz / 6)
    return complex(np.expm1(sz) / z)


@dataclass(frozen=True)
class Eigenpair:
    lam: complex
    g: np.ndarray
    regime: Regime

    @property
    def c(self) -> float:
        return self.lam.real

    @property
    def is_real(self) -> bool:
        return abs(self.lam.imag) <= REAL_ATOL

    def rotated(self, phase: complex) -> "Eigenpair":
        """Same eigenvalue with eigenfunction ``phase * g``."""
        return Eigenpair(self.lam, self.g * phase, self.regime)

    def conj(self) -> "Eigenpair":
        return Eigenpair(self.lam.conjugate(), np.conj(self.g), self.regime)


def classify(c: float, lambda1: float, rtol: float = REGIME_RTOL) -> Regime:
    half = lambda1 / 2
    if abs(c - half) <= rtol * max(1.0, lambda1):
        return Regime.CRIT
    return Regime.SUB if c < half else Regime.SUPER


def make_eigenpair(ctx: SpectralContext, lam: complex, g, rtol: float = REGIME_RTOL) -> Eigenpair:
    g = np.asarray(g, dtype=complex)
    lam = complex(lam)
    res = np.abs(ctx.A @ g - lam * g).max()
    if res > 1e-8 * max(1.0, np.abs(g).max()):
        raise ValueError(f"(lam, g) is not an eigenpair of A (residual {res:.2e})")
    return Eigenpair(lam, g, classify(lam.real, ctx.lambda1, rtol))


def eigenpair(ctx: SpectralContext, index: int, rtol: float = REGIME_RTOL) -> Eigenpair:
    lam, g = ctx.pair(index)
    return make_eigenpair(ctx, lam, g, rtol)


def all_eigenpairs(ctx: SpectralContext, rtol: float = REGIME_RTOL) -> list[Eigenpair]:
    return [eigenpair(ctx, i, rtol) for i in range(ctx.d)]


@dataclass(frozen=True)
class TestCombo:
    """h = sum of eigenfunctions with pairwise distinct, non-conjugate eigenvalues."""

    terms: tuple

    __test__ = False  # not a pytest class

    def __init__(self, terms):
        terms = tuple(sorted(terms, key=lambda e: (-e.lam.real, -e.lam.imag)))
        if not terms:
            raise ValueError("a combination needs at least one term")
        for i in range(len(terms)):
            for j in range(i + 1, len(terms)):
                a, b = terms[i].lam, terms[j].lam
                if abs(a - b) <= 1e-10 * max(1, abs(a)) or abs(a - b.conjugate()) <= 1e-10 * max(1, abs(a)):
                    raise ValueError(f"eigenvalues {a} and {b} are equal or conjugate")
        object.__setattr__(self, "terms", terms)

    @property
    def h(self) -> np.ndarray:
        return sum(t.g for t in self.terms)

    def by_regime(self, regime: Regime) -> list[Eigenpair]:
        return [t for t in self.terms if t.regime is regime]


def projections(ctx: SpectralContext, model: Model, ep: Eigenpair, convention=Convention.AS_STATED):
    """(<theta[g, conj g], phi_tilde>, <theta[g, g], phi_tilde>)."""
    a = complex(theta(model, ep.g, np.conj(ep.g), convention) @ ctx.phi_tilde).real
    b = complex(theta(model, ep.g, ep.g, convention) @ ctx.phi_tilde)
    return a, b


def g_sigma(ctx: SpectralContext, model: Model, ep: Eigenpair, sigma: float, t,
            convention=Convention.AS_STATED):
    """Window variance combination G_sigma(t); vectorized over ``t``."""
    a, b = projections(ctx, model, ep, convention)
    lam1 = ctx.lambda1
    steady = a * f_factor(sigma, lam1 - 2 * ep.c).real
    osc = b * f_factor(sigma, lam1 - 2 * ep.lam)
    t = np.asarray(t, dtype=float)
    out = steady + np.real(np.exp(-2j * t * ep.lam.imag) * osc)
    return float(out) if out.ndim == 0 else out


def g_sigma_bound(ctx, model, ep, sigma, convention=Convention.AS_STATED) -> float:
    a, b = projections(ctx, model, ep, convention)
    return a * f_factor(sigma, ctx.lambda1 - 2 * ep.c).real + abs(b * f_factor(sigma, ctx.lambda1 - 2 * ep.lam))


@dataclass
class RegimeConstant:
    regime: Regime
    K: float
    degenerate: bool
    theta_conj: float
    theta_plain: complex
    convention: Convention

    def envelope(self, wphi):
        return np.sqrt(self.K * np.asarray(wphi))


def regime_constant(ctx: SpectralContext, model: Model, ep: Eigenpair,
                    convention=Convention.AS_STATED) -> RegimeConstant:
    """Coefficient K with limsup equal to sqrt(K * W_infinity^phi)."""
    a, b = projections(ctx, model, ep, convention)
    lam1 = ctx.lambda1
    if ep.regime is Regime.SUB:
        K = a / (lam1 - 2 * ep.c) + abs(b / (lam1 - 2 * ep.lam))
    elif ep.regime is Regime.SUPER:
        K = a / (2 * ep.c - lam1) + abs(b / (2 * ep.lam - lam1))
    else:
        K = (1 + (1 if ep.is_real else 0)) * a
    degenerate = abs(a) <= 1e-14 * max(1.0, abs(b))
    return RegimeConstant(ep.regime, float(max(K, 0.0)), degenerate, a, b, Convention.parse(convention))


def _oscillation_period(ctx: SpectralContext, extra: float = 0.0) -> float | None:
    freq = max(np.abs(ctx.eigenvalues.imag).max(initial=0.0), 0.0) + abs(extra)
    return 2 * math.pi / freq if freq > 0 else None


def _semigroup_bound(ctx: SpectralContext) -> float:
    """Bound on sup_s ||exp(s(A - lambda1))||_inf."""
    if np.all(np.isfinite(ctx.right_inv)):
        return float(np.abs(ctx.right).sum(axis=1).max() * np.abs(ctx.right_inv).sum(axis=1).max())
    return float(ctx.cond)


def covariance_integral(ctx: SpectralContext, model: Model, ep_j: Eigenpair, ep_k: Eigenpair,
                        t=math.inf, convention=Convention.AS_STATED, x=None,
                        tol: float = 1e-11) -> QuadResult:
    """Bilinear covariance of W(lam_j, g_j) and W(lam_k, g_k) at time t.

    Returns ``int_0^t exp(-(lam_j + lam_k) s) T_s(theta[g_j, g_k]) ds``
    projected on phi_tilde (``x=None``), at type ``x``, or as the full vector
    (``x="all"``).
    """
    v = theta(model, ep_j.g, ep_k.g, convention).astype(complex)
    z = ep_j.lam + ep_k.lam
    lam1 = ctx.lambda1

    def integrand(s):
        w = np.exp((lam1 - z) * s) * (normalized_semigroup(ctx, s) @ v)
        if x is None:
            return w @ ctx.phi_tilde
        if isinstance(x, str):
            return w
        return w[x]

    period = _oscillation_period(ctx, z.imag)
    if math.isinf(t):
        rate = z.real - lam1
        if not rate > 0:
            raise DivergentIntegral(
                f"Re(lam_j + lam_k) = {z.real:.6g} must exceed lambda1 = {lam1:.6g}"
            )
        scale = max(1.0, float(np.sum(ctx.phi_tilde))) if x is None else 1.0
        bound = scale * _semigroup_bound(ctx) * float(np.abs(v).max())
        if bound == 0:
            zero = integrand(0.0) * 0
            return QuadResult(zero, 0.0, 1)
        return integrate_to_infinity(integrand, rate, bound, tol=tol, period=period)
    if t == 0:
        return QuadResult(integrand(0.0) * 0, 0.0, 1)
    return simpson(integrand, 0.0, float(t), tol=tol, period=period)


@dataclass
class ComboConstants:
    Hsm: float
    Hla: float
    Kcrit: float
    error: float
    convention: Convention

    def normalization(self) -> str:
        return "sqrt(t log log t)" if self.Kcrit > 0 else "sqrt(2 log t)"

    @property
    def K(self) -> float:
        """Constant under the square root of the limit (times W^phi)."""
        return self.Kcrit if self.Kcrit > 0 else self.Hsm + self.Hla


def combo_constants(ctx: SpectralContext, model: Model, h: TestCombo,
                    convention=Convention.AS_STATED, has_crit: bool | None = None) -> ComboConstants:
    """Subcritical integral, supercritical terminal variance and critical sum."""
    lam1 = ctx.lambda1
    sub = h.by_regime(Regime.SUB)
    sup = h.by_regime(Regime.SUPER)
    crit = h.by_regime(Regime.CRIT)
    err = 0.0

    Hsm = 0.0
    if sub:
        def integrand(s):
            u = sum(np.real(np.exp(ep.lam * s) * ep.g) for ep in sub)
            return float(np.real(theta(model, u, u, convention) @ ctx.phi_tilde)) * math.exp(-lam1 * s)

        cmax = max(ep.c for ep in sub)
        gnorm = sum(float(np.abs(ep.g).max()) for ep in sub)
        bound = theta_bound(model, convention) * gnorm**2 * float(np.sum(ctx.phi_tilde))
        freq = max(abs(ep.lam.imag) for ep in sub) * 2
        period = 2 * math.pi / freq if freq > 0 else None
        r = integrate_to_infinity(integrand, lam1 - 2 * cmax, bound, tol=1e-11, period=period)
        Hsm, err = float(r.value), err + r.error

    Hla = 0.0
    for ej in sup:
        for ek in sup:
            c1 = covariance_integral(ctx, model, ej, ek, math.inf, convention)
            c2 = covariance_integral(ctx, model, ej, ek.conj(), math.inf, convention)
            Hla += 0.5 * complex(c1.value + c2.value).real
            err += 0.5 * (c1.error + c2.error)

    Kcrit = sum((1 + (1 if ep.is_real else 0)) * projections(ctx, model, ep, convention)[0] for ep in crit)
    return ComboConstants(Hsm, Hla, float(Kcrit), err, Convention.parse(convention))


def hsm_closed_form(ctx: SpectralContext, model: Model, h: TestCombo, convention=Convention.AS_STATED) -> float:
    """Closed form of the subcritical integral (used as an oracle)."""
    sub = h.by_regime(Regime.SUB)
    lam1 = ctx.lambda1
    total = 0.0
    for ej in sub:
        for ek in sub:
            t1 = theta(model, ej.g, ek.g, convention) @ ctx.phi_tilde / (lam1 - ej.lam - ek.lam)
            t2 = theta(model, ej.g, np.conj(ek.g), convention) @ ctx.phi_tilde / (lam1 - ej.lam - ek.lam.conjugate())
            total += 0.5 * complex(t1 + t2).real
    return total
