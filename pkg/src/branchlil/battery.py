"""Named verification batteries shared by the command line and the test suite.

Each check returns a ``TestVerdict``.  Oracle checks are deterministic; the
Monte Carlo checks draw every random number from the single base seed.
"""

from __future__ import annotations

import math

import numpy as np

from .analysis import (
    TestVerdict,
    increment_gaussianity_test,
    l2_convergence_test,
    lil_scan,
    lln_test,
    martingale_mean_check,
)
from .functionals import Convention, all_eigenpairs, regime_constant
from .model import Model
from .moments import integral_asymptotics_check, second_moment, variance_asymptote
from .spectral import SpectralContext, verify_h1

BATTERIES = ("oracle", "standard", "full")
LEAP_THRESHOLD = 1e4
VARIANCE_FLOOR = 1e-12


def distinct_eigenpairs(ctx: SpectralContext):
    """One representative per conjugate pair (the one with Im >= 0)."""
    return [ep for ep in all_eigenpairs(ctx) if ep.lam.imag >= -1e-12]


def default_init(model: Model) -> np.ndarray:
    init = np.zeros(model.d)
    init[0] = 1.0
    return init


def default_horizon(ctx: SpectralContext, model: Model, init) -> float:
    """Horizon at which the expected population is about 1e5 (BMP) or 5 (SP)."""
    lam1 = ctx.lambda1
    if model.kind == "sp":
        return 5.0
    total = max(float(np.sum(init)), 1.0)
    return round(math.log(1e5 / total) / lam1, 1) if lam1 > 0 else 10.0


# -- oracle checks -----------------------------------------------------------

def h1_check(ctx: SpectralContext) -> TestVerdict:
    gap = ctx.gap if np.isfinite(ctx.gap) and ctx.gap > 0 else 1.0
    grid = (1.0 / gap) * 2.0 ** np.arange(0, 5)
    tab = verify_h1(ctx, grid)
    d = tab.delta
    ok = tab.bounded and bool(np.all((d[1:] < d[:-1]) | (d[1:] <= 1e-12)))
    return TestVerdict("h1-decay", float(d[-1]), "decreasing", "pass" if ok else "fail",
                       {"t": grid, "delta": d, "fitted_rate": tab.fitted_rate, "gap": tab.gap})


def variance_regime_check(ctx: SpectralContext, model: Model, convention=Convention.AS_STATED) -> list:
    out = []
    for ep in distinct_eigenpairs(ctx):
        reg = regime_constant(ctx, model, ep, convention)
        if reg.degenerate:
            out.append(TestVerdict(f"variance-regime[{ep.lam:.6g}]", 0.0, None, "skip",
                                   {"reason": "<theta[g, conj g], phi_tilde> = 0"}))
            continue
        for x in range(ctx.d):
            tab = variance_asymptote(ctx, model, ep, x, [10.0, 20.0], convention)
            r10, r20 = tab.residual
            scale = max(1.0, abs(tab.predicted[-1]))
            ok = r20 < 0.5 * r10 or r20 <= VARIANCE_FLOOR * scale
            out.append(TestVerdict(f"variance-regime[{ep.lam:.6g},x={x}]", float(r20), 0.5 * float(r10),
                                   "pass" if ok else "fail",
                                   {"regime": ep.regime, "residual_10": r10, "residual_20": r20,
                                    "normalized": tab.normalized, "predicted": tab.predicted}))
    return out


def integral_asymptotics_battery(ctx: SpectralContext) -> list:
    out = []
    lam1 = ctx.lambda1
    grid = 2.0 ** np.arange(0, 6)
    for label, alpha in (("sub", lam1 / 2 - 0.5), ("crit", lam1 / 2), ("super", lam1 / 2 + 0.5)):
        for freq in (0.0, 1.0):
            for x in range(ctx.d):
                f = np.zeros(ctx.d)
                f[x] = 1.0
                chk = integral_asymptotics_check(ctx, alpha, freq, f, grid)
                ok = chk.decreasing(1e-12)
                out.append(TestVerdict(f"integral-asymptotics[{label},theta={freq:g},x={x}]",
                                       float(chk.residual[-1]), "decreasing", "pass" if ok else "fail",
                                       {"t": grid, "residual": chk.residual}))
    return out


def oracle_battery(ctx: SpectralContext, model: Model) -> list:
    return [h1_check(ctx), *variance_regime_check(ctx, model), *integral_asymptotics_battery(ctx)]


# -- Monte Carlo checks ------------------------------------------------------

def simulate(model: Model, init, times, replicas: int, seed: int, jobs: int = 1,
             dt: float | None = None, leap_threshold: float | None = None):
    if model.kind == "bmp":
        from .sim_bmp import simulate_ensemble

        return simulate_ensemble(model, init, times, replicas, seed, parallelism=jobs,
                                 leap_threshold=leap_threshold)
    from .sim_sp import simulate_sp_ensemble

    return simulate_sp_ensemble(model, init, times, replicas, seed, dt=dt, parallelism=jobs)


def moment_check(ens, ctx: SpectralContext, model: Model, k: float = 3.0) -> TestVerdict:
    """Sample mean and second moment of <1, X_T> against the classical oracle."""
    T = float(ens.sample_times[-1])
    f = np.ones(model.d)
    rep = second_moment(ctx, model, ens.init, f, T, Convention.CLASSICAL)
    v = ens.functional(f)[ens.valid(), -1]
    n = len(v)
    se_m = float(v.std(ddof=1) / math.sqrt(n))
    se_2 = float((v * v).std(ddof=1) / math.sqrt(n))
    z_m = abs(v.mean() - rep.mean) / se_m if se_m > 0 else 0.0
    z_2 = abs((v * v).mean() - rep.second) / se_2 if se_2 > 0 else 0.0
    slack = 0.05 * rep.second if model.kind == "sp" else 0.0
    ok = z_m <= k and abs((v * v).mean() - rep.second) <= slack + k * se_2
    return TestVerdict("moments", float(max(z_m, z_2)), k, "pass" if ok else "fail",
                       {"t": T, "mean": float(v.mean()), "oracle_mean": rep.mean,
                        "second": float((v * v).mean()), "oracle_second": rep.second,
                        "stderr_mean": se_m, "stderr_second": se_2})


def run_battery(model: Model, ctx: SpectralContext, battery: str, seed: int, replicas: int,
                horizon: float | None = None, init=None, jobs: int = 1, dt: float | None = None,
                convention=Convention.AS_STATED) -> dict:
    """Run a named battery; returns ``{"verdicts": [...], "series": {name: rows}}``."""
    if battery not in BATTERIES:
        raise ValueError(f"unknown battery '{battery}' (choose from {', '.join(BATTERIES)})")
    init = default_init(model) if init is None else np.asarray(init, dtype=float)
    verdicts = list(oracle_battery(ctx, model))
    series: dict = {}
    if battery == "oracle":
        return {"verdicts": verdicts, "series": series}

    T = horizon if horizon is not None else default_horizon(ctx, model, init)
    times = np.linspace(0.0, T, int(round(T)) + 1) if T >= 2 else np.linspace(0.0, T, 5)
    ens = simulate(model, init, times, replicas, seed, jobs, dt)
    verdicts.append(moment_check(ens, ctx, model))
    rows = []
    for ep in distinct_eigenpairs(ctx):
        v = martingale_mean_check(ens, ep, ctx)
        verdicts.append(v)
        for r in v.details["rows"]:
            rows.append((f"{ep.lam:.6g}", r["t"], r["part"], r["mean"], r["stderr"]))
    series["martingale"] = (("eigenvalue", "t", "part", "mean", "stderr"), rows)
    f = np.zeros(model.d)
    f[0] = 1.0
    try:
        verdicts.append(lln_test(ens, ctx, f))
    except ValueError as exc:
        verdicts.append(TestVerdict("lln", math.nan, None, "skip", {"reason": str(exc)}))

    if battery == "full" and model.kind == "bmp":
        verdicts.extend(_full_extras(model, ctx, init, seed, replicas, jobs, convention, series))
    return {"verdicts": verdicts, "series": series}


def _full_extras(model, ctx, init, seed, replicas, jobs, convention, series) -> list:
    out = []
    principal = distinct_eigenpairs(ctx)[0]
    times = np.array([0.0, 1, 2, 4, 8, 16])
    ens = simulate(model, init, times, replicas, seed + 1, jobs, leap_threshold=LEAP_THRESHOLD)
    try:
        out.append(l2_convergence_test(ens, principal, ctx, model))
    except ValueError as exc:
        out.append(TestVerdict("l2-convergence", math.nan, None, "skip", {"reason": str(exc)}))
    ens = simulate(model, init, np.arange(0.0, 10.0), replicas, seed + 2, jobs)
    try:
        out.append(increment_gaussianity_test(ens, principal, ctx, model, 8.0, 1.0))
    except ValueError as exc:
        out.append(TestVerdict("increment-gaussianity", math.nan, None, "skip", {"reason": str(exc)}))
    lattice = np.arange(0.0, 201.0)
    ens = simulate(model, init, lattice, replicas, seed + 3, jobs, leap_threshold=LEAP_THRESHOLD)
    out.extend(lil_battery(ens, ctx, model, series))
    return out


def lil_battery(ens, ctx, model, series=None, conventions=("as-stated", "classical")) -> list:
    out = []
    rows = []
    for ep in distinct_eigenpairs(ctx):
        for conv in conventions:
            try:
                rep = lil_scan(ens, ep, ctx, model, conv)
            except ValueError as exc:
                out.append(TestVerdict(f"lil[{ep.lam:.4g},{conv}]", math.nan, None, "skip", {"reason": str(exc)}))
                continue
            out.append(rep.verdict())
            rows.extend((f"{ep.lam:.6g}", conv, r, float(x)) for r, x in enumerate(rep.ratios))
    if series is not None:
        series["lil_ratios"] = (("eigenvalue", "convention", "survivor", "ratio"), rows)
    return out


def exit_code(verdicts) -> int:
    if any(v.status == "fail" for v in verdicts):
        return 2
    if any(v.status == "soft-miss" for v in verdicts):
        return 3
    return 0


__all__ = ["BATTERIES", "run_battery", "exit_code", "oracle_battery", "lil_battery", "distinct_eigenpairs",
           "default_init", "default_horizon"]
