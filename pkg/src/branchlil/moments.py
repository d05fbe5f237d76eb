"""Deterministic moment oracle for <f, X_t> and the eigen-martingales."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .functionals import (
    Convention,
    Eigenpair,
    Regime,
    _oscillation_period,
    _semigroup_bound,
    classify,
    projections,
    theta,
    theta_bound,
)
from .model import InitState, Model
from .quadrature import integrate_to_infinity, simpson
from .spectral import SpectralContext, normalized_semigroup, semigroup

QUAD_TOL = 1e-10


def _mu(mu) -> np.ndarray:
    return np.asarray(mu.values if isinstance(mu, InitState) else mu, dtype=float)


def mean_functional(ctx: SpectralContext, mu, f, t: float):
    """E_mu <f, X_t> = mu^T exp(tA) f."""
    val = _mu(mu) @ (semigroup(ctx, t) @ np.asarray(f))
    return complex(val) if np.iscomplexobj(val) else float(val)


def _spread(ctx: SpectralContext, f, t: float) -> np.ndarray:
    """T_t(f^2) - (T_t f)^2, the single-particle correction for BMPs."""
    P = semigroup(ctx, t)
    return P @ (f * f) - (P @ f) ** 2


def variance_vector(ctx: SpectralContext, model: Model, f, t: float,
                    convention=Convention.AS_STATED, tol: float | None = None):
    """Var_{delta_x} <f, X_t> for every x, with its quadrature error bound.

    Computes ``int_0^t T_{t-s}(theta[T_s f]) ds``; the classical convention
    adds ``T_t(f^2) - (T_t f)^2`` on BMPs.
    """
    f = np.asarray(f, dtype=float)
    conv = Convention.parse(convention)
    if t == 0:
        return np.zeros(ctx.d), 0.0

    def integrand(s):
        Tf = semigroup(ctx, s) @ f
        return semigroup(ctx, t - s) @ theta(model, Tf, Tf, Convention.AS_STATED)

    if tol is None:
        grid = np.linspace(0.0, t, 9)
        scale = t * max(float(np.abs(integrand(s)).max()) for s in grid)
        coarse = simpson(integrand, 0.0, t, tol=1e-6 * max(1.0, scale), period=_oscillation_period(ctx))
        tol = QUAD_TOL * max(1.0, float(np.abs(coarse.value).max()))
    r = simpson(integrand, 0.0, t, tol=tol, period=_oscillation_period(ctx))
    var = np.asarray(r.value, dtype=float)
    if conv is Convention.CLASSICAL and model.kind == "bmp":
        var = var + _spread(ctx, f, t)
    return var, float(r.error)


@dataclass
class MomentReport:
    t: float
    mean: float
    second: float
    variance: float
    convention: Convention
    quadrature_error: float
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t": self.t, "mean": self.mean, "second": self.second, "variance": self.variance,
            "convention": self.convention.value, "quadrature_error": self.quadrature_error,
        }


def second_moment(ctx: SpectralContext, model: Model, mu, f, t: float,
                  convention=Convention.AS_STATED) -> MomentReport:
    """E_mu <f, X_t>^2 under the chosen convention (real f)."""
    conv = Convention.parse(convention)
    mu = _mu(mu)
    f = np.asarray(f, dtype=float)
    mean = float(mu @ (semigroup(ctx, t) @ f))
    var_x, err = variance_vector(ctx, model, f, t, conv)
    var = float(mu @ var_x)
    rep = MomentReport(t, mean, mean**2 + var, var, conv, float(np.sum(np.abs(mu)) * err))
    if var < -1e-9:
        rep.notes.append("negative variance under this convention")
    return rep


def _re_part(ep: Eigenpair, t: float) -> np.ndarray:
    return np.real(np.exp(-1j * t * ep.lam.imag) * ep.g)


def variance_re_martingale(ctx: SpectralContext, model: Model, ep: Eigenpair, x, t: float,
                           convention=Convention.AS_STATED, tol: float = QUAD_TOL):
    """Var_{delta_x}[Re W_t(lam, g)]; ``x=None`` returns the vector over types."""
    conv = Convention.parse(convention)
    c, om = ep.c, ep.lam.imag
    if t == 0:
        return 0.0 if x is not None else np.zeros(ctx.d)
    tgg = theta(model, ep.g, np.conj(ep.g), Convention.AS_STATED)
    tg = theta(model, ep.g, ep.g, Convention.AS_STATED)
    lam1 = ctx.lambda1

    def integrand(s):
        v = np.real(tgg + np.exp(-2j * s * om) * tg)
        return 0.5 * math.exp((lam1 - 2 * c) * s) * (normalized_semigroup(ctx, s) @ v)

    scale = max(1.0, math.exp((lam1 - 2 * c) * t))
    r = simpson(integrand, 0.0, t, tol=tol * scale, period=_oscillation_period(ctx, 2 * om))
    var = np.asarray(r.value, dtype=float)
    if conv is Convention.CLASSICAL and model.kind == "bmp":
        var = var + math.exp(-2 * c * t) * _spread(ctx, _re_part(ep, t), t)
    return float(var[x]) if x is not None else var


def predicted_variance_limit(ctx: SpectralContext, model: Model, ep: Eigenpair, t: float,
                             convention=Convention.AS_STATED) -> np.ndarray:
    """Asymptotic form of the normalized Var[Re W_t] by regime (vector over x)."""
    a, b = projections(ctx, model, ep, convention)
    lam1 = ctx.lambda1
    if ep.regime is Regime.SUB:
        return 0.5 * ctx.phi * (a / (lam1 - 2 * ep.c)
                                + np.real(np.exp(-2j * t * ep.lam.imag) * b / (lam1 - 2 * ep.lam)))
    if ep.regime is Regime.CRIT:
        return (1 + (1 if ep.is_real else 0)) / 2 * ctx.phi * a
    return terminal_variance(ctx, model, ep, convention)


def terminal_variance(ctx: SpectralContext, model: Model, ep: Eigenpair,
                      convention=Convention.AS_STATED) -> np.ndarray:
    """lim Var_{delta_x}[Re W_t] in the supercritical regime."""
    conv = Convention.parse(convention)
    tgg = theta(model, ep.g, np.conj(ep.g), conv)
    tg = theta(model, ep.g, ep.g, conv)
    lam1, c, om = ctx.lambda1, ep.c, ep.lam.imag

    def integrand(s):
        v = np.real(tgg + np.exp(-2j * s * om) * tg)
        return 0.5 * math.exp((lam1 - 2 * c) * s) * (normalized_semigroup(ctx, s) @ v)

    bound = _semigroup_bound(ctx) * (np.abs(tgg).max() + np.abs(tg).max())
    if bound == 0:
        return np.zeros(ctx.d)
    r = integrate_to_infinity(integrand, 2 * c - lam1, bound, tol=1e-12,
                              period=_oscillation_period(ctx, 2 * om))
    return np.asarray(r.value, dtype=float)


@dataclass
class AsymptoteTable:
    regime: Regime
    x: int
    t: np.ndarray
    variance: np.ndarray
    normalized: np.ndarray
    predicted: np.ndarray
    convention: Convention

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.normalized - self.predicted)


def variance_asymptote(ctx: SpectralContext, model: Model, ep: Eigenpair, x: int, t_grid,
                       convention=Convention.AS_STATED) -> AsymptoteTable:
    """Normalized Var_{delta_x}[Re W_t] next to its predicted limit."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing")
    conv = Convention.parse(convention)
    lam1, c = ctx.lambda1, ep.c
    var, norm, pred = [], [], []
    limit = terminal_variance(ctx, model, ep, conv) if ep.regime is Regime.SUPER else None
    for t in t_grid:
        v = variance_re_martingale(ctx, model, ep, x, t, conv)
        var.append(v)
        if ep.regime is Regime.SUB:
            norm.append(math.exp(-(lam1 - 2 * c) * t) * v)
            pred.append(predicted_variance_limit(ctx, model, ep, t, conv)[x])
        elif ep.regime is Regime.CRIT:
            norm.append(v / t)
            pred.append(predicted_variance_limit(ctx, model, ep, t, conv)[x])
        else:
            norm.append(v)
            pred.append(limit[x])
    return AsymptoteTable(ep.regime, x, t_grid, np.array(var), np.array(norm), np.array(pred), conv)


@dataclass
class IntegralCheck:
    regime: Regime
    t: np.ndarray
    computed: np.ndarray
    predicted: np.ndarray
    residual: np.ndarray

    def decreasing(self, floor: float = 1e-12) -> bool:
        r = self.residual
        return bool(np.all((r[1:] < r[:-1]) | (r[1:] <= floor)))


def integral_asymptotics_check(ctx: SpectralContext, alpha: float, theta_freq: float, f, t_grid,
                               tol: float = 1e-13) -> IntegralCheck:
    """Compare int_0^t exp(-2 alpha s + i theta s) T_s f ds with its asymptote.

    Regimes follow the sign of lambda1 - 2 alpha: exponential growth with a
    rotating limit, linear growth (Cesaro limit), or convergence.
    """
    f = np.asarray(f, dtype=complex)
    t_grid = np.asarray(t_grid, dtype=float)
    lam1 = ctx.lambda1
    regime = classify(alpha, lam1)
    proj = complex(f @ ctx.phi_tilde)
    period = _oscillation_period(ctx, theta_freq)
    comp, pred = [], []

    if regime is Regime.SUB:
        k = lam1 - 2 * alpha
        for t in t_grid:
            # exp(-k t) * integral, written with bounded integrand
            def integrand(s, t=t):
                return math.exp(-k * (t - s)) * np.exp(1j * theta_freq * s) * (normalized_semigroup(ctx, s) @ f)

            comp.append(np.asarray(simpson(integrand, 0.0, t, tol=tol, period=period).value))
            pred.append(ctx.phi * proj * np.exp(1j * theta_freq * t) / (k + 1j * theta_freq))
    elif regime is Regime.CRIT:
        def integrand(s):
            return np.exp(1j * theta_freq * s) * (normalized_semigroup(ctx, s) @ f)

        for t in t_grid:
            comp.append(np.asarray(simpson(integrand, 0.0, t, tol=tol * t, period=period).value) / t)
            target = ctx.phi * proj if abs(theta_freq) <= 1e-12 else np.zeros(ctx.d)
            pred.append(target)
    else:
        k = 2 * alpha - lam1

        def integrand(s):
            return math.exp(-k * s) * np.exp(1j * theta_freq * s) * (normalized_semigroup(ctx, s) @ f)

        bound = _semigroup_bound(ctx) * float(np.abs(f).max())
        limit = np.asarray(integrate_to_infinity(integrand, k, max(bound, 1e-300), tol=tol, period=period).value)
        for t in t_grid:
            comp.append(np.asarray(simpson(integrand, 0.0, t, tol=tol, period=period).value))
            pred.append(limit)
    comp = np.array(comp)
    pred = np.array(pred)
    resid = np.abs(comp - pred).max(axis=1)
    return IntegralCheck(regime, t_grid, comp, pred, resid)


def conditional_covariance(ctx: SpectralContext, model: Model, dt: float) -> np.ndarray:
    """Cov_{delta_x}(X_dt) as an array ``C[x, y, z]`` (exact BMP/SP covariance).

    Uses the classical convention so that it is the true covariance of the
    type-count (or mass) vector started from one unit at ``x``.
    """
    d = ctx.d
    C = np.zeros((d, d, d))
    eye = np.eye(d)
    conv = Convention.CLASSICAL

    def integrand(s):
        P = semigroup(ctx, s)
        Pt = semigroup(ctx, dt - s)
        out = np.empty((d, d, d))
        for y in range(d):
            for z in range(y, d):
                v = Pt @ theta(model, P[:, y], P[:, z], conv)
                out[:, y, z] = v
                out[:, z, y] = v
        return out

    if dt > 0:
        C = np.asarray(simpson(integrand, 0.0, dt, tol=1e-12 * max(1.0, math.exp(2 * abs(ctx.lambda1) * dt)),
                               period=_oscillation_period(ctx)).value)
    return C
