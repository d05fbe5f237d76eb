"""Statistical verdicts computed from simulated ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .ensemble import Ensemble
from .functionals import (
    Convention,
    Eigenpair,
    Regime,
    TestCombo,
    combo_constants,
    covariance_integral,
    regime_constant,
)
from .model import Model
from .moments import variance_re_martingale
from .spectral import SpectralContext, semigroup, verify_h1

LIL_BAND = (0.4, 1.3)


class AnalysisError(ValueError):
    pass


class InsufficientSurvivors(AnalysisError):
    pass


class PreconditionViolated(AnalysisError):
    pass


class DegenerateConditionalVariance(AnalysisError):
    pass


class WindowTooShort(AnalysisError):
    pass


class NoneFound(AnalysisError):
    pass


@dataclass
class TestVerdict:
    """Outcome of one check.  ``status`` is one of pass, fail, soft-pass,
    soft-miss or skip; the soft variants come from non-probative scans."""

    name: str
    statistic: float
    threshold: object
    status: str
    details: dict = field(default_factory=dict)

    __test__ = False

    @property
    def hard_failure(self) -> bool:
        return self.status == "fail"

    @property
    def soft_miss(self) -> bool:
        return self.status == "soft-miss"

    def to_dict(self) -> dict:
        return {"name": self.name, "statistic": _jsonable(self.statistic),
                "threshold": _jsonable(self.threshold), "status": self.status,
                "details": _jsonable(self.details)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, (Regime, Convention)):
        return obj.value
    return obj


@dataclass
class MartingalePath:
    """W_t(lam, g) per replica.  ``increments[:, k]`` is W_{t_{k+1}} - W_{t_k};
    for leaped segments it is formed from the recorded innovations."""

    times: np.ndarray
    values: np.ndarray  # (replicas, n_times) complex
    increments: np.ndarray  # (replicas, n_times - 1) complex
    wphi_terminal: np.ndarray  # (replicas,)

    def tail(self) -> np.ndarray:
        """W_T - W_t at every sample time, summed from increments."""
        inc = self.increments[:, ::-1]
        out = np.zeros_like(self.values)
        out[:, :-1] = np.cumsum(inc, axis=1)[:, ::-1]
        return out


def martingale_paths(ensemble: Ensemble, ep: Eigenpair, ctx: SpectralContext) -> MartingalePath:
    times = ensemble.sample_times
    disc = np.exp(-ep.lam * times)
    proj = ensemble.states @ ep.g
    values = proj * disc
    increments = np.diff(values, axis=1)
    if ensemble.noise is not None:
        leaped = ~np.isnan(ensemble.noise[..., 0])
        inc_noise = (np.nan_to_num(ensemble.noise) @ ep.g) * disc[1:]
        increments = np.where(leaped, inc_noise, increments)
        values = np.concatenate([values[:, :1], values[:, :1] + np.cumsum(increments, axis=1)], axis=1)
    wphi = np.exp(-ctx.lambda1 * times[-1]) * (ensemble.states[:, -1] @ ctx.phi)
    return MartingalePath(times, values, increments, np.maximum(np.real(wphi), 0.0))


def martingale_mean_check(ensemble: Ensemble, ep: Eigenpair, ctx: SpectralContext, k: float = 3.0) -> TestVerdict:
    """Ensemble mean of W_t equals <g, init> at every sample time (real and imaginary parts)."""
    mp = martingale_paths(ensemble, ep, ctx)
    ok = ensemble.valid()
    vals = mp.values[ok]
    n = len(vals)
    target = complex(ensemble.init @ ep.g)
    worst = 0.0
    rows = []
    for j, t in enumerate(mp.times):
        for part, fn in (("re", np.real), ("im", np.imag)):
            v = fn(vals[:, j])
            se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            dev = float(v.mean() - fn(target))
            # floor for deterministic entries (t = 0), where only roundoff remains
            se_eff = max(se, 1e-12 * max(1.0, abs(target)))
            z = abs(dev) / se_eff
            worst = max(worst, z)
            rows.append({"t": float(t), "part": part, "mean": float(v.mean()), "stderr": se, "z": z})
    return TestVerdict(f"martingale-mean[{ep.lam:.6g}]", worst, k, "pass" if worst <= k else "fail",
                       {"target": target, "rows": rows, "replicas": n})


def lln_test(ensemble: Ensemble, ctx: SpectralContext, f, min_survivors: int = 100,
             delta_max: float = 0.01) -> TestVerdict:
    f = np.asarray(f, dtype=float)
    proj = float(f @ ctx.phi_tilde)
    T = float(ensemble.sample_times[-1])
    name = "lln"
    if abs(proj) <= 1e-12 * max(1.0, float(np.abs(f).max())):
        return TestVerdict(name, math.nan, None, "skip", {"reason": "NotApplicable: <f, phi_tilde> = 0"})
    delta = float(verify_h1(ctx, [T]).delta[0])
    if delta >= delta_max:
        raise PreconditionViolated(f"Delta_T = {delta:.3g} is not below {delta_max}")
    wphi = np.exp(-ctx.lambda1 * T) * (ensemble.states[:, -1] @ ctx.phi)
    eps0 = 1e-3 * float(ensemble.init @ ctx.phi)
    keep = (wphi > eps0) & ensemble.valid()
    if keep.sum() < min_survivors:
        raise InsufficientSurvivors(f"{int(keep.sum())} survivors, need {min_survivors}")
    lhs = np.exp(-ctx.lambda1 * T) * (ensemble.states[keep, -1] @ f)
    rhs = proj * wphi[keep]
    corr = float(np.corrcoef(lhs, rhs)[0, 1]) if np.std(lhs) > 0 and np.std(rhs) > 0 else 1.0
    ratio = lhs / rhs
    med = float(np.median(ratio))
    ok = corr > 0.99 and 0.95 <= med <= 1.05
    return TestVerdict(name, corr, {"correlation": 0.99, "median_ratio": [0.95, 1.05]},
                       "pass" if ok else "fail",
                       {"median_ratio": med, "survivors": int(keep.sum()), "T": T, "delta_T": delta,
                        "f_phi_tilde": proj})


def l2_convergence_test(ensemble: Ensemble, ep: Eigenpair, ctx: SpectralContext, model: Model,
                        pairs=None, k: float = 3.0) -> TestVerdict:
    """E|W_{t'} - W_t|^2 over time pairs against the exact oracle, and its decay."""
    if ep.regime is not Regime.SUPER:
        raise PreconditionViolated("L2 convergence needs Re(lambda) > lambda1 / 2")
    times = ensemble.sample_times
    if pairs is None:
        pos = [t for t in times if t > 0]
        pairs = [(a, b) for a in pos for b in pos if abs(b - 2 * a) <= 1e-9 * b]
    mp = martingale_paths(ensemble, ep, ctx)
    ok = ensemble.valid()
    mean0 = ensemble.init
    rows = []
    worst = 0.0
    for t1, t2 in pairs:
        i = int(np.argmin(np.abs(times - t1)))
        j = int(np.argmin(np.abs(times - t2)))
        if i == j:
            rows.append({"t": float(t1), "t2": float(t2), "mc": 0.0, "stderr": 0.0, "oracle": 0.0, "z": 0.0})
            continue
        diff = mp.increments[ok, i:j].sum(axis=1)
        sq = np.abs(diff) ** 2
        se = float(sq.std(ddof=1) / math.sqrt(len(sq)))
        var_x = covariance_integral(ctx, model, ep, ep.conj(), times[j] - times[i],
                                    Convention.CLASSICAL, x="all").value
        mass = mean0 @ semigroup(ctx, times[i])
        oracle = float(np.real(mass @ var_x) * math.exp(-2 * ep.c * times[i]))
        z = abs(float(sq.mean()) - oracle) / se if se > 0 else 0.0
        worst = max(worst, z)
        rows.append({"t": float(t1), "t2": float(t2), "mc": float(sq.mean()), "stderr": se,
                     "oracle": oracle, "z": z})
    mc = [r["mc"] for r in rows if r["t2"] != r["t"]]
    decreasing = len(mc) >= 3 and all(b < a for a, b in zip(mc, mc[1:]))
    ok_all = decreasing and worst <= k
    return TestVerdict("l2-convergence", worst, k, "pass" if ok_all else "fail",
                       {"pairs": rows, "decreasing": decreasing})


def increment_gaussianity_test(ensemble: Ensemble, ep: Eigenpair, ctx: SpectralContext, model: Model,
                               t: float, s: float, alpha: float = 0.01) -> TestVerdict:
    """KS test of (Re W_{t+s} - Re W_t) / conditional sd against N(0, 1)."""
    if not s > 0:
        raise PreconditionViolated("s must be positive")
    reg = regime_constant(ctx, model, ep, Convention.CLASSICAL)
    if reg.degenerate:
        raise DegenerateConditionalVariance("<theta[g, conj g], phi_tilde> = 0")
    times = ensemble.sample_times
    i = int(np.argmin(np.abs(times - t)))
    j = int(np.argmin(np.abs(times - (t + s))))
    if abs(times[i] - t) > 1e-9 or abs(times[j] - (t + s)) > 1e-9:
        raise PreconditionViolated("t and t + s must be sample times")
    mp = martingale_paths(ensemble, ep, ctx)
    dW = np.real(mp.increments[:, i:j].sum(axis=1))
    rot = ep.rotated(np.exp(-1j * ep.lam.imag * t))
    vx = variance_re_martingale(ctx, model, rot, None, s, Convention.CLASSICAL)
    cond = math.exp(-2 * ep.c * t) * (ensemble.states[:, i] @ vx)
    keep = ensemble.valid() & (cond > 0)
    z = dW[keep] / np.sqrt(cond[keep])
    n = len(z)
    if n < 2:
        raise InsufficientSurvivors("no surviving paths")
    m, v = float(z.mean()), float(z.var(ddof=1))
    pre = abs(m) <= 3 / math.sqrt(n) and abs(v - 1) <= 5 / math.sqrt(n)
    ks = stats.kstest(z, "norm")
    ok = pre and ks.pvalue > alpha
    return TestVerdict("increment-gaussianity", float(ks.pvalue), alpha, "pass" if ok else "fail",
                       {"ks_statistic": float(ks.statistic), "z_mean": m, "z_var": v, "paths": n,
                        "moment_checks": pre, "t": float(t), "s": float(s)})


@dataclass
class LilReport:
    label: str
    regime: str
    convention: Convention
    K: float
    normalization: str
    window: tuple
    ratios: np.ndarray
    median: float
    iqr: tuple
    band: tuple
    survivors: int

    @property
    def in_band(self) -> bool:
        return self.band[0] <= self.median <= self.band[1]

    def verdict(self) -> TestVerdict:
        return TestVerdict(
            f"lil[{self.label},{self.convention.value}]", self.median, list(self.band),
            "soft-pass" if self.in_band else "soft-miss",
            {"K": self.K, "normalization": self.normalization, "window": list(self.window),
             "iqr": list(self.iqr), "survivors": self.survivors, "regime": self.regime,
             "note": "desk-scale envelope scan; not evidence for or against the limsup identity"},
        )


def _window(times, regime: Regime, start, end):
    if start is None:
        start = math.exp(math.e) if regime is Regime.CRIT else math.e
    mask = (times >= start) & (times <= end)
    if mask.sum() < 2:
        raise WindowTooShort(f"scan window [{start:.3g}, {end:.3g}] holds fewer than two sample times")
    return mask, start


def _check_horizon(T: float, regime: Regime) -> None:
    if regime is Regime.CRIT:
        if not (T > math.e and math.log(math.log(T)) >= 1):
            raise WindowTooShort("critical scans need log log T >= 1")
    elif math.log(T) < 3:
        raise WindowTooShort("scans need log T >= 3")


def _term_series(mp: MartingalePath, ep: Eigenpair, lam1: float, regime: Regime):
    """e^{(lam - lam1/2) t} W-part entering the normalized series (complex)."""
    times = mp.times
    grow = np.exp((ep.lam - lam1 / 2) * times)
    if regime is Regime.SUPER:
        return grow * (-mp.tail())
    return grow * mp.values


def lil_scan(ensemble: Ensemble, target, ctx: SpectralContext, model: Model,
             convention=Convention.AS_STATED, band=LIL_BAND, start: float | None = None,
             end_margin: float | None = None, label: str | None = None) -> LilReport:
    """Running maximum of the normalized series relative to sqrt(K W^phi).

    ``target`` is an Eigenpair or a TestCombo.  Supercritical parts use the
    terminal value in place of the limit, so the window stops
    ``end_margin`` (default 10 / (2 Re lam - lam1)) before the horizon.
    """
    conv = Convention.parse(convention)
    times = ensemble.sample_times
    T = float(times[-1])
    lam1 = ctx.lambda1
    terms = list(target.terms) if isinstance(target, TestCombo) else [target]
    has_crit = any(t.regime is Regime.CRIT for t in terms)
    sup = [t for t in terms if t.regime is Regime.SUPER]
    if isinstance(target, TestCombo):
        cc = combo_constants(ctx, model, target, conv)
        K = cc.K
        regime = Regime.CRIT if has_crit else (Regime.SUPER if sup and len(sup) == len(terms) else Regime.SUB)
        norm_name = cc.normalization()
        scale2 = 2.0
    else:
        rc = regime_constant(ctx, model, target, conv)
        K = rc.K
        regime = target.regime
        norm_name = "sqrt(t log log t)" if regime is Regime.CRIT else "sqrt(log t)"
        scale2 = 1.0
    _check_horizon(T, regime)
    if end_margin is None:
        end_margin = max((10.0 / (2 * t.c - lam1) for t in sup), default=0.0)
    mask, start = _window(times, regime, start, T - end_margin)

    series = 0.0
    wphi = None
    for ep in terms:
        mp = martingale_paths(ensemble, ep, ctx)
        wphi = mp.wphi_terminal
        series = series + np.real(_term_series(mp, ep, lam1, ep.regime))
    tw = times[mask]
    if has_crit:
        denom = np.sqrt(tw * np.log(np.log(tw)))
    else:
        denom = np.sqrt(scale2 * np.log(tw))
    norm = series[:, mask] / denom
    eps0 = 1e-3 * float(ensemble.init @ ctx.phi)
    keep = (wphi > eps0) & ensemble.valid()
    if K <= 0:
        raise DegenerateConditionalVariance("limit constant is zero")
    ratios = norm[keep].max(axis=1) / np.sqrt(K * wphi[keep])
    q1, med, q3 = np.percentile(ratios, [25, 50, 75]) if len(ratios) else (math.nan,) * 3
    return LilReport(label or (f"{target.lam:.4g}" if isinstance(target, Eigenpair) else "combo"),
                     regime.value, conv, float(K), norm_name, (float(start), float(T - end_margin)),
                     ratios, float(med), (float(q1), float(q3)), tuple(band), int(keep.sum()))


@dataclass
class NearReturns:
    times: np.ndarray
    max_gap: int
    density: float

    def to_dict(self) -> dict:
        return {"count": int(len(self.times)), "max_gap": self.max_gap, "density": self.density,
                "first": self.times[:20].tolist()}


def near_return_times(frequencies, eps: float, budget: int, chunk: int = 1 << 20) -> NearReturns:
    """Integers n in [1, budget] with max_j |exp(i n w_j) - 1| < eps."""
    if not 0 < eps < 2:
        raise ValueError("eps must lie in (0, 2)")
    w = np.asarray(frequencies, dtype=float)
    found = []
    for lo in range(1, int(budget) + 1, chunk):
        n = np.arange(lo, min(lo + chunk, int(budget) + 1), dtype=float)
        # |e^{i x} - 1| = 2 |sin(x / 2)|, with the angle reduced mod 2 pi first
        ang = np.remainder(np.outer(n, w), 2 * math.pi)
        dist = np.abs(2 * np.sin(ang / 2)).max(axis=1) if len(w) else np.zeros(len(n))
        found.append(n[dist < eps].astype(np.int64))
    times = np.concatenate(found) if found else np.zeros(0, dtype=np.int64)
    if len(times) == 0:
        raise NoneFound(f"no near-return time up to {budget}")
    gaps = np.diff(np.concatenate([[0], times]))
    return NearReturns(times, int(gaps.max()), len(times) / float(budget))
