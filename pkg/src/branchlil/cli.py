"""Command line entry point.

Exit codes: 0 all checks pass, 2 a hard check failed, 3 only soft envelope
scans missed their band, 64 usage error, 65 unreadable or invalid model.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import _jsonable
from .battery import (
    BATTERIES,
    LEAP_THRESHOLD,
    default_horizon,
    default_init,
    distinct_eigenpairs,
    exit_code,
    lil_battery,
    run_battery,
    simulate,
)
from .functionals import Convention, TestCombo, combo_constants, regime_constant
from .model import ModelError, load_model, model_hash, model_to_dict, validate
from .moments import second_moment, variance_re_martingale
from .spectral import SpectralError, spectral_context, verify_h1

EX_USAGE = 64
EX_DATAERR = 65
SUBCOMMANDS = ("spectral", "constants", "moments", "simulate", "verify", "lil", "manifest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run.  ``digest`` covers all fields
    except wall-clock time and the worker count, neither of which changes
    any output."""

    tool_version: str
    command: str
    model_hash: str
    seed: int | None
    config: dict
    parameters: dict
    wall_clock: float = 0.0
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def reproducible_part(self) -> dict:
        return {"tool_version": self.tool_version, "command": self.command, "model_hash": self.model_hash,
                "seed": self.seed, "config": self.config, "parameters": self.parameters}

    @property
    def digest(self) -> str:
        blob = json.dumps(_jsonable(self.reproducible_part()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        d = self.reproducible_part()
        d.update({"digest": self.digest, "wall_clock_seconds": self.wall_clock, "jobs": self.jobs})
        return _jsonable(d)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchlil", description="Oracles and Monte Carlo checks for branching processes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=False, sim=False):
        sp.add_argument("--model", required=True, help="model JSON file or bundled name (yule, t2, rot3, feller)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--convention", default="as-stated", choices=[c.value for c in Convention])
        sp.add_argument("--init", default=None, help="comma separated initial counts or masses")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if sim:
            sp.add_argument("--replicas", type=int, default=2000)
            sp.add_argument("--horizon", type=float, default=None)
            sp.add_argument("--dt", type=float, default=None)
            sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("spectral", help="eigensystem and Delta_t table")
    common(sp)
    sp.add_argument("--horizon", type=float, default=20.0)
    common(sub.add_parser("constants", help="limit constants for every eigenpair"))
    sp = sub.add_parser("moments", help="moment oracle at the horizon")
    common(sp)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp = sub.add_parser("simulate", help="simulate an ensemble")
    common(sp, seed=True, sim=True)
    sp.add_argument("--leap-threshold", type=float, default=None)
    sp = sub.add_parser("verify", help="run a verification battery")
    common(sp, seed=True, sim=True)
    sp.add_argument("--battery", default="standard", choices=BATTERIES)
    sp = sub.add_parser("lil", help="soft law-of-iterated-logarithm envelope scans")
    common(sp, seed=True, sim=True)
    sp = sub.add_parser("manifest", help="write the reproducibility manifest only")
    common(sp, seed=True, sim=True)
    sp.add_argument("--battery", default="standard", choices=BATTERIES)
    return p


def _parse_init(model, text):
    if text is None:
        return default_init(model)
    try:
        vals = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"--init must be a comma separated list of numbers, got '{text}'") from None
    if vals.shape != (model.d,):
        raise UsageError(f"--init needs {model.d} entries")
    return vals


class _Output:
    def __init__(self, out, manifest: RunManifest):
        self.dir = Path(out) if out else None
        self.manifest = manifest
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, payload: dict) -> str:
        doc = {"manifest": self.manifest.digest, **_jsonable(payload)}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        if self.dir:
            (self.dir / name).write_text(text)
        return text

    def csv(self, name: str, header, rows) -> str:
        buf = io.StringIO()
        buf.write(f"# manifest: {self.manifest.digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
        text = buf.getvalue()
        if self.dir:
            (self.dir / name).write_text(text)
        return text

    def finish(self, started: float) -> None:
        self.manifest.wall_clock = round(time.time() - started, 3)
        if self.dir:
            (self.dir / "manifest.json").write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _eig_rows(ctx):
    for i, lam in enumerate(ctx.eigenvalues):
        g = ctx.right[:, i]
        yield (i, lam.real, lam.imag, *[f"{complex(v).real!r}{complex(v).imag:+}j" for v in g])


def cmd_spectral(args, model, ctx, out):
    grid = np.unique(np.concatenate([[0.5, 1, 2, 5, 10], np.linspace(0, args.horizon, 11)[1:]]))
    tab = verify_h1(ctx, grid)
    rows = list(tab.rows())
    out.csv("delta.csv", ("t", "delta", "delta_nonneg", "fitted_bound"), rows)
    out.csv("eigensystem.csv", ("index", "re", "im", *[f"g_{x}" for x in range(ctx.d)]), _eig_rows(ctx))
    report = {
        "lambda1": ctx.lambda1, "phi": ctx.phi, "phi_tilde": ctx.phi_tilde,
        "eigenvalues": [[z.real, z.imag] for z in ctx.eigenvalues],
        "condition": ctx.cond, "gap": ctx.gap, "fitted_rate": tab.fitted_rate,
        "validation": validate(model).to_dict(),
    }
    out.json("report.json", report)
    print(f"lambda1 = {ctx.lambda1!r}")
    print("eigenvalues: " + ", ".join(f"{z.real:.10g}{z.imag:+.10g}i" for z in ctx.eigenvalues))
    print("t,delta,fitted_bound")
    for t, d, _, fb in rows:
        print(f"{t!r},{d!r},{fb!r}")
    return 0


def cmd_constants(args, model, ctx, out):
    conv = Convention.parse(args.convention)
    eps = distinct_eigenpairs(ctx)
    rows = []
    for ep in eps:
        rc = regime_constant(ctx, model, ep, conv)
        rows.append((ep.lam.real, ep.lam.imag, rc.regime.value, rc.K, rc.theta_conj,
                     rc.theta_plain.real, rc.theta_plain.imag, rc.degenerate))
    cc = combo_constants(ctx, model, TestCombo(eps), conv)
    out.csv("constants.csv", ("re", "im", "regime", "K", "theta_conj", "theta_re", "theta_im", "degenerate"), rows)
    report = {"convention": conv.value, "eigenpairs": rows,
              "combo": {"Hsm": cc.Hsm, "Hla": cc.Hla, "Kcrit": cc.Kcrit, "normalization": cc.normalization(),
                        "quadrature_error": cc.error}}
    out.json("report.json", report)
    for r in rows:
        print(f"lambda={r[0]:.10g}{r[1]:+.10g}i regime={r[2]} K={r[3]!r}")
    print(f"combo: Hsm={cc.Hsm!r} Hla={cc.Hla!r} Kcrit={cc.Kcrit!r}")
    return 0


def cmd_moments(args, model, ctx, out):
    conv = Convention.parse(args.convention)
    init = _parse_init(model, args.init)
    t = args.horizon
    rep1 = second_moment(ctx, model, init, np.ones(model.d), t, conv)
    repphi = second_moment(ctx, model, init, ctx.phi, t, conv)
    wvar = {}
    for ep in distinct_eigenpairs(ctx):
        wvar[f"{ep.lam:.6g}"] = float(init @ variance_re_martingale(ctx, model, ep, None, t, conv))
    report = {"t": t, "convention": conv.value, "init": init, "total": rep1.to_dict(), "phi": repphi.to_dict(),
              "var_re_W": wvar}
    out.json("report.json", report)
    print(f"E<1,X_t> = {rep1.mean!r}  E<1,X_t>^2 = {rep1.second!r}  Var = {rep1.variance!r}")
    return 0


def cmd_simulate(args, model, ctx, out):
    init = _parse_init(model, args.init)
    T = args.horizon if args.horizon is not None else default_horizon(ctx, model, init)
    times = np.linspace(0.0, T, 11)
    if model.kind == "bmp":
        from .sim_bmp import horizon_guidance

        guide = horizon_guidance(ctx.lambda1, float(init.sum()))
        if T > guide and not args.leap_threshold:
            print(f"warning: horizon {T} exceeds the event-cap guidance {guide:.3g}", file=sys.stderr)
    ens = simulate(model, init, times, args.replicas, args.seed, args.jobs, args.dt,
                   getattr(args, "leap_threshold", None))
    header = ["replica", "t", *[f"n_{x}" for x in range(model.d)]]
    rows = ens.csv_rows()
    if model.kind == "sp":
        header.append("dt")
        rows = ((*r, ens.dt) for r in rows)
    out.csv("trajectories.csv", header, rows)
    summ = ens.summary()
    summ["status"] = {s: ens.status.count(s) for s in sorted(set(ens.status))}
    out.json("summary.json", summ)
    out.json("report.json", {"summary": summ})
    print(json.dumps(_jsonable({"mean": summ["mean"], "variance": summ["variance"]})))
    return 0


def _verdict_report(verdicts, series, out):
    for name, (header, rows) in series.items():
        out.csv(f"{name}.csv", header, rows)
    out.csv("verdicts.csv", ("name", "status", "statistic", "threshold"),
            ((v.name, v.status, v.statistic, json.dumps(_jsonable(v.threshold))) for v in verdicts))
    code = exit_code(verdicts)
    out.json("report.json", {"verdicts": [v.to_dict() for v in verdicts], "exit_code": code})
    for v in verdicts:
        print(f"{v.status:9s} {v.name}  statistic={_jsonable(v.statistic)}")
    return code


def cmd_verify(args, model, ctx, out):
    init = _parse_init(model, args.init)
    res = run_battery(model, ctx, args.battery, args.seed, args.replicas, args.horizon, init, args.jobs,
                      args.dt, args.convention)
    return _verdict_report(res["verdicts"], res["series"], out)


def cmd_lil(args, model, ctx, out):
    if model.kind != "bmp":
        raise UsageError("lil scans are provided for BMP models")
    init = _parse_init(model, args.init)
    T = args.horizon if args.horizon is not None else 200.0
    ens = simulate(model, init, np.arange(0.0, math.floor(T) + 1.0), args.replicas, args.seed, args.jobs,
                   leap_threshold=LEAP_THRESHOLD)
    series: dict = {}
    verdicts = lil_battery(ens, ctx, model, series)
    return _verdict_report(verdicts, series, out)


def cmd_manifest(args, model, ctx, out):
    print(json.dumps(out.manifest.to_dict(), indent=2, sort_keys=True))
    return 0


HANDLERS = {"spectral": cmd_spectral, "constants": cmd_constants, "moments": cmd_moments,
            "simulate": cmd_simulate, "verify": cmd_verify, "lil": cmd_lil, "manifest": cmd_manifest}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        for name in ("replicas", "jobs"):
            if getattr(args, name, 1) < 1:
                raise UsageError(f"--{name} must be >= 1")
    except UsageError as exc:
        print(f"branchlil: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EX_USAGE
    started = time.time()
    try:
        model = load_model(args.model)
        ctx = spectral_context(model)
    except (ModelError, SpectralError, OSError) as exc:
        print(f"branchlil: model error: {exc}", file=sys.stderr)
        return EX_DATAERR
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "jobs", "command", "model")}
    manifest = RunManifest(__version__, args.command, model_hash(model), getattr(args, "seed", None),
                           model_to_dict(model), params, jobs=getattr(args, "jobs", 1))
    out = _Output(args.out, manifest)
    try:
        code = HANDLERS[args.command](args, model, ctx, out)
    except UsageError as exc:
        print(f"branchlil: error: {exc}", file=sys.stderr)
        return EX_USAGE
    except ValueError as exc:
        print(f"branchlil: error: {exc}", file=sys.stderr)
        return EX_USAGE
    out.finish(started)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
