"""Euler scheme for finite-type superprocesses.

Between jumps the mass vector follows

    dX_y = sum_x X_x D[x, y] dt + sqrt(2 b_y X_y) dB_y,

with ``D = Q - diag(a) + eta - diag(local jump mass rate)``.  Each jump atom
``(r, nu)`` of type ``x`` fires at rate ``r X_x`` and adds ``nu``.  The local
compensation in ``D`` makes the mean generator of the whole dynamics equal to
``mean_generator(model)``.

The diffusion uses full truncation: the root sees ``max(X, 0)`` and the state
is clamped at zero after every step, so zero is absorbing.  Jump counts per
step are Poisson with intensity frozen at the left endpoint, drawn from a
separate random substream so that Brownian increments stay aligned across
step sizes (common random numbers for convergence sweeps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .ensemble import Ensemble, Trajectory, assemble, run_replicas
from .model import InitState, SpModel
from .rng import replica_generator
from .sim_bmp import SimulationError, ZeroInitialMass
from .spectral import mean_generator

STABILITY_LIMIT = 0.1
JUMP_SUBSTREAM = 1


class StepTooLarge(SimulationError):
    pass


def default_dt(model: SpModel) -> float:
    norm = float(np.abs(mean_generator(model)).sum(axis=1).max())
    return 1e-3 * min(1.0, 1.0 / norm) if norm > 0 else 1e-3


@nb.njit(nogil=True, cache=True)
def _euler(rng, jrng, D, b, jump_rate, atom_start, atom_cum, atom_mass,
           init, sample_times, h, substeps):
    d = init.shape[0]
    n = sample_times.shape[0]
    states = np.zeros((n, d))
    X = init.copy()
    dX = np.zeros(d)
    step = h * substeps
    t = 0.0
    jumps = 0
    steps = 0
    for k in range(n):
        target = sample_times[k]
        while t < target - 1e-12 * max(1.0, target):
            full = t + step <= target + 1e-12 * max(1.0, target)
            dt = step if full else target - t
            alive = False
            for y in range(d):
                if X[y] > 0.0:
                    alive = True
                    break
            if not alive:
                t = target
                break
            for y in range(d):
                s = 0.0
                for x in range(d):
                    s += X[x] * D[x, y]
                dX[y] = s * dt
            for y in range(d):
                if full:
                    z = 0.0
                    for _ in range(substeps):
                        z += rng.normal()
                    w = z * math.sqrt(h)
                else:
                    w = rng.normal() * math.sqrt(dt)
                if b[y] > 0.0 and X[y] > 0.0:
                    dX[y] += math.sqrt(2.0 * b[y] * X[y]) * w
            for x in range(d):
                if jump_rate[x] > 0.0 and X[x] > 0.0:
                    m = jrng.poisson(jump_rate[x] * X[x] * dt)
                    for _ in range(m):
                        u = jrng.random()
                        i = atom_start[x + 1] - 1
                        for j in range(atom_start[x], atom_start[x + 1]):
                            if u < atom_cum[j]:
                                i = j
                                break
                        for y in range(d):
                            dX[y] += atom_mass[i, y]
                    jumps += m
            for y in range(d):
                X[y] = max(X[y] + dX[y], 0.0)
            t = target if not full else t + step
            steps += 1
        for y in range(d):
            states[k, y] = X[y]
    return states, steps, jumps


@dataclass(frozen=True, eq=False)
class SpPlan:
    model: SpModel
    D: np.ndarray
    b: np.ndarray
    jump_rate: np.ndarray
    atom_start: np.ndarray
    atom_cum: np.ndarray
    atom_mass: np.ndarray
    norm: float

    @classmethod
    def build(cls, model: SpModel) -> "SpPlan":
        d = model.d
        A = mean_generator(model)
        D = model.Q - np.diag(model.a) + model.eta
        rates = np.zeros(d)
        starts, cums, masses = [0], [], []
        for x, atoms in enumerate(model.jumps):
            if atoms.n_atoms:
                D[x, x] -= atoms.rates @ atoms.masses[:, x]
                rates[x] = atoms.rates.sum()
            if atoms.n_atoms and rates[x] > 0:
                c = np.cumsum(atoms.rates) / rates[x]
                c[-1] = 1.0
                cums.extend(c.tolist())
                masses.extend(atoms.masses.tolist())
            starts.append(len(cums))
        mass = np.array(masses, dtype=float).reshape(-1, d)
        return cls(model, D, np.asarray(model.b, dtype=float), rates,
                   np.array(starts, dtype=np.int64), np.array(cums, dtype=float), mass,
                   float(np.abs(A).sum(axis=1).max()))


def _check(model: SpModel, init, sample_times, dt, horizon):
    init = np.asarray(init.values if isinstance(init, InitState) else init, dtype=float)
    if init.shape != (model.d,):
        raise ValueError(f"initial state must have length {model.d}")
    if np.any(init < 0) or not np.all(np.isfinite(init)):
        raise ValueError("initial masses must be finite and nonnegative")
    if init.sum() == 0:
        raise ZeroInitialMass("initial configuration is empty")
    times = np.asarray(sample_times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("sample_times must be a nonempty increasing sequence of times >= 0")
    if horizon is not None and horizon < times[-1]:
        raise ValueError("horizon must be >= the last sample time")
    if dt is None:
        dt = default_dt(model)
    if not dt > 0:
        raise ValueError("dt must be positive")
    return init, times, float(dt)


def _guard(plan: SpPlan, dt: float) -> None:
    if dt * plan.norm > STABILITY_LIMIT:
        raise StepTooLarge(f"dt*||A|| = {dt * plan.norm:.3g} exceeds {STABILITY_LIMIT}")


def _simulate(plan, init, times, dt, seed, replica, substeps=1) -> Trajectory:
    rng = replica_generator(seed, replica)
    jrng = replica_generator(seed, replica, JUMP_SUBSTREAM)
    states, steps, jumps = _euler(rng, jrng, plan.D, plan.b, plan.jump_rate, plan.atom_start,
                                  plan.atom_cum, plan.atom_mass, init, times, dt / substeps, substeps)
    return Trajectory(times, states, seed, replica, int(steps), dt=dt, jump_count=int(jumps))


def simulate_sp(model: SpModel, init, sample_times, seed: int, dt: float | None = None,
                horizon: float | None = None, replica: int = 0) -> Trajectory:
    """One Euler path sampled at ``sample_times``; ``events`` counts steps."""
    init, times, dt = _check(model, init, sample_times, dt, horizon)
    plan = SpPlan.build(model)
    _guard(plan, dt)
    return _simulate(plan, init, times, dt, seed, replica)


def simulate_sp_ensemble(model: SpModel, init, sample_times, replicas: int, base_seed: int,
                         dt: float | None = None, parallelism: int = 1, horizon: float | None = None,
                         substeps: int = 1) -> Ensemble:
    """Replica ensemble; ``substeps`` > 1 builds each Brownian increment from
    that many finer draws, which couples runs at different ``dt`` when the
    fine step ``dt / substeps`` is held fixed."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    init, times, dt = _check(model, init, sample_times, dt, horizon)
    plan = SpPlan.build(model)
    _guard(plan, dt)
    trajs = run_replicas(lambda r: _simulate(plan, init, times, dt, base_seed, r, substeps),
                         replicas, parallelism)
    ens = assemble("sp", model.name, trajs, base_seed, init, dt)
    ens.meta["jump_count"] = int(sum(t.jump_count for t in trajs))
    ens.meta["substeps"] = substeps
    return ens


@dataclass
class SweepLevel:
    dt: float
    mean: float
    variance: float
    variance_stderr: float
    diff_to_next: float | None = None
    diff_stderr: float | None = None


@dataclass
class DtSweep:
    t: float
    oracle_mean: float
    oracle_variance: float
    levels: list

    @property
    def monotone(self) -> bool:
        """Coupled variance differences shrink level to level and the coarsest one is resolved."""
        diffs = [lv for lv in self.levels if lv.diff_to_next is not None]
        if not diffs:
            return True
        if abs(diffs[0].diff_to_next) <= 3 * diffs[0].diff_stderr:
            return False
        return all(abs(b.diff_to_next) < abs(a.diff_to_next) for a, b in zip(diffs, diffs[1:]))

    def to_dict(self) -> dict:
        return {
            "t": self.t, "oracle_mean": self.oracle_mean, "oracle_variance": self.oracle_variance,
            "monotone": self.monotone,
            "levels": [vars(lv) for lv in self.levels],
        }


def dt_sweep(model: SpModel, init, t: float, dts, replicas: int, base_seed: int,
             f=None, parallelism: int = 1) -> DtSweep:
    """Variance of <f, X_t> at several step sizes using common random numbers.

    Step sizes must be integer multiples of the smallest one.  The coupled
    differences between consecutive levels isolate the discretization bias
    from Monte Carlo noise, which would otherwise dominate at small dt.
    """
    from .moments import second_moment
    from .spectral import spectral_context

    dts = sorted((float(x) for x in dts), reverse=True)
    fine = dts[-1]
    f = np.ones(model.d) if f is None else np.asarray(f, dtype=float)
    vals = []
    for dt in dts:
        m = round(dt / fine)
        if abs(m * fine - dt) > 1e-9 * dt:
            raise ValueError("step sizes must be integer multiples of the smallest")
        ens = simulate_sp_ensemble(model, init, [t], replicas, base_seed, dt=dt,
                                   parallelism=parallelism, substeps=m)
        vals.append(ens.functional(f)[:, 0])
    levels = []
    n = replicas
    for i, dt in enumerate(dts):
        v = vals[i]
        c = v - v.mean()
        var = float(c @ c / (n - 1))
        lv = SweepLevel(dt, float(v.mean()), var, float(np.std(c * c, ddof=1) / math.sqrt(n)))
        if i + 1 < len(dts):
            w = vals[i + 1]
            cw = w - w.mean()
            diff = c * c - cw * cw
            lv.diff_to_next = float(diff.mean() * n / (n - 1))
            lv.diff_stderr = float(np.std(diff, ddof=1) / math.sqrt(n))
        levels.append(lv)
    ctx = spectral_context(model)
    rep = second_moment(ctx, model, np.asarray(init, dtype=float), f, t)
    return DtSweep(t, rep.mean, rep.variance, levels)
