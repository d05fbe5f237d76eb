"""Exact event-driven simulation of finite-type branching Markov processes.

The population is tracked as a vector of type counts, which has the same law
as the particle system by exchangeability.  Each event is either a motion
step ``x -> y`` (rate ``Q[x, y]`` per particle) or a branching at ``x`` (rate
``beta[x]`` per particle) that replaces the particle by an offspring vector
drawn from the type-``x`` point law.

For very long horizons the exact phase can hand over to Gaussian leaps once
the population exceeds ``leap_threshold``: between consecutive sample times
the count vector moves by its exact conditional mean plus a Gaussian with the
exact conditional covariance.  Leaped trajectories are flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .ensemble import Ensemble, Trajectory, assemble, run_replicas
from .model import BmpModel, InitState
from .rng import replica_generator

DEFAULT_EVENT_CAP = 10**8


class SimulationError(RuntimeError):
    pass


class EventCapExceeded(SimulationError):
    def __init__(self, trajectory: Trajectory):
        self.trajectory = trajectory
        super().__init__(f"event cap reached at t={trajectory.cap_time:.6g}")


class ZeroInitialMass(SimulationError):
    pass


@nb.njit(nogil=True, cache=True)
def _gillespie(rng, move, branch, move_cum, atom_start, atom_cum, atom_counts,
               init, sample_times, event_cap, leap_threshold):
    d = init.shape[0]
    n = sample_times.shape[0]
    states = np.full((n, d), np.nan)
    N = init.copy()
    total = 0
    for x in range(d):
        total += N[x]
    t = 0.0
    k = 0
    events = 0
    capped = False
    cap_time = np.inf
    leap_index = -1

    R = 0.0
    for x in range(d):
        R += N[x] * (move[x] + branch[x])

    while k < n and sample_times[k] <= 0.0:
        for x in range(d):
            states[k, x] = N[x]
        k += 1
    if k > 0 and total >= leap_threshold:
        return states, events, capped, cap_time, k - 1

    while k < n:
        if R <= 0.0:
            while k < n:
                for x in range(d):
                    states[k, x] = N[x]
                k += 1
            break
        t_next = t + rng.exponential(1.0 / R)
        while k < n and sample_times[k] < t_next:
            for x in range(d):
                states[k, x] = N[x]
            k += 1
            if total >= leap_threshold:
                return states, events, capped, cap_time, k - 1
        if k >= n:
            break
        if events >= event_cap:
            capped = True
            cap_time = t
            break
        t = t_next

        u = rng.random() * R
        acc = 0.0
        x = d - 1
        for j in range(d):
            acc += N[j] * (move[j] + branch[j])
            if u < acc:
                x = j
                break
        v = rng.random() * (move[x] + branch[x])
        w = rng.random()
        if v < move[x]:
            y = d - 1
            for j in range(d):
                if w < move_cum[x, j]:
                    y = j
                    break
            N[x] -= 1
            N[y] += 1
        else:
            i = atom_start[x + 1] - 1
            for j in range(atom_start[x], atom_start[x + 1]):
                if w < atom_cum[j]:
                    i = j
                    break
            N[x] -= 1
            total -= 1
            for y in range(d):
                N[y] += atom_counts[i, y]
                total += atom_counts[i, y]
        events += 1
        R = 0.0
        for j in range(d):
            R += N[j] * (move[j] + branch[j])
    return states, events, capped, cap_time, leap_index


@nb.njit(nogil=True, cache=True)
def _leap(rng, states, start, P, C):
    """Gaussian leaps from sample index ``start``; P[k], C[k] belong to interval k -> k+1.

    Returns the innovations alongside the states so that martingale
    increments can be formed without cancellation at huge populations.
    """
    n, d = states.shape
    noise = np.full((n - 1, d), np.nan)
    X = states[start].copy()
    for k in range(start, n - 1):
        mean = np.zeros(d)
        cov = np.zeros((d, d))
        for x in range(d):
            for y in range(d):
                mean[y] += X[x] * P[k, x, y]
                for z in range(d):
                    cov[y, z] += X[x] * C[k, x, y, z]
        w, V = np.linalg.eigh(cov)
        z = np.empty(d)
        for j in range(d):
            z[j] = rng.normal() * math.sqrt(max(w[j], 0.0))
        for y in range(d):
            e = 0.0
            for j in range(d):
                e += V[y, j] * z[j]
            noise[k, y] = e
            X[y] = max(mean[y] + e, 0.0)
            states[k + 1, y] = X[y]
    return states, noise


@dataclass(frozen=True, eq=False)
class BmpPlan:
    """Model data flattened for the kernel."""

    model: BmpModel
    move: np.ndarray
    branch: np.ndarray
    move_cum: np.ndarray
    atom_start: np.ndarray
    atom_cum: np.ndarray
    atom_counts: np.ndarray

    @classmethod
    def build(cls, model: BmpModel) -> "BmpPlan":
        d = model.d
        move = -np.diag(model.Q).copy()
        move_cum = np.zeros((d, d))
        for x in range(d):
            if move[x] > 0:
                row = np.clip(model.Q[x], 0, None).copy()
                row[x] = 0.0
                move_cum[x] = np.cumsum(row) / row.sum()
                move_cum[x, -1] = 1.0
        starts, cums, counts = [0], [], []
        for law in model.offspring:
            c = np.cumsum(law.probs)
            c[-1] = 1.0
            cums.extend(c.tolist())
            counts.extend(law.counts.tolist())
            starts.append(len(cums))
        return cls(model, move, np.array(model.beta, dtype=float), move_cum,
                   np.array(starts, dtype=np.int64), np.array(cums), np.array(counts, dtype=np.int64).reshape(-1, d))


class _LeapTables:
    def __init__(self, model: BmpModel, sample_times: np.ndarray):
        from .moments import conditional_covariance
        from .spectral import semigroup, spectral_context

        ctx = spectral_context(model)
        steps = np.diff(sample_times)
        self.P = np.zeros((len(steps), model.d, model.d))
        self.C = np.zeros((len(steps), model.d, model.d, model.d))
        cache: dict = {}
        for k, dt in enumerate(steps):
            key = round(float(dt), 12)
            if key not in cache:
                cache[key] = (semigroup(ctx, dt), conditional_covariance(ctx, model, dt))
            self.P[k], self.C[k] = cache[key]


def _check_inputs(model, init, sample_times):
    init = init.values if isinstance(init, InitState) else np.asarray(init)
    init = np.asarray(init)
    if init.shape != (model.d,):
        raise ValueError(f"initial state must have length {model.d}")
    if np.any(init < 0) or np.any(init != np.round(init)):
        raise ValueError("BMP initial counts must be nonnegative integers")
    if init.sum() == 0:
        raise ZeroInitialMass("initial configuration is empty")
    times = np.asarray(sample_times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("sample_times must be a nonempty increasing sequence of times >= 0")
    return init.astype(np.int64), times


def _simulate(plan: BmpPlan, init, times, seed, replica, event_cap, leap_threshold, leap_tables) -> Trajectory:
    rng = replica_generator(seed, replica)
    states, events, capped, cap_time, leap_index = _gillespie(
        rng, plan.move, plan.branch, plan.move_cum, plan.atom_start, plan.atom_cum,
        plan.atom_counts, init, times, np.int64(event_cap), float(leap_threshold),
    )
    leap_time = np.inf
    noise = None
    if leap_index >= 0 and leap_index < len(times) - 1:
        states, noise = _leap(rng, states, leap_index, leap_tables.P, leap_tables.C)
        leap_time = float(times[leap_index])
    return Trajectory(times, states, seed, replica, int(events), bool(capped), float(cap_time), leap_time,
                      noise=noise)


def simulate(model: BmpModel, init, sample_times, seed: int, event_cap: int = DEFAULT_EVENT_CAP,
             replica: int = 0, strict: bool = False, leap_threshold: float | None = None) -> Trajectory:
    """Sample one trajectory at ``sample_times``.

    Deterministic given ``(model, init, seed, replica)``.  When the event cap
    is hit the trajectory is returned with ``capped=True`` and NaN states
    after the cap time (``strict=True`` raises ``EventCapExceeded`` instead).
    """
    if event_cap < 1:
        raise ValueError("event_cap must be >= 1")
    init, times = _check_inputs(model, init, sample_times)
    plan = BmpPlan.build(model)
    tables = _LeapTables(model, times) if leap_threshold else None
    traj = _simulate(plan, init, times, seed, replica, event_cap, leap_threshold or np.inf, tables)
    if strict and traj.capped:
        raise EventCapExceeded(traj)
    return traj


def simulate_ensemble(model: BmpModel, init, sample_times, replicas: int, base_seed: int,
                      parallelism: int = 1, event_cap: int = DEFAULT_EVENT_CAP,
                      leap_threshold: float | None = None) -> Ensemble:
    """Independent replicas; replica ``r`` uses the stream keyed by ``(base_seed, r)``."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if event_cap < 1:
        raise ValueError("event_cap must be >= 1")
    init, times = _check_inputs(model, init, sample_times)
    plan = BmpPlan.build(model)
    tables = _LeapTables(model, times) if leap_threshold else None
    thr = leap_threshold or np.inf

    def one(r):
        return _simulate(plan, init, times, base_seed, r, event_cap, thr, tables)

    trajs = run_replicas(one, replicas, parallelism)
    ens = assemble("bmp", model.name, trajs, base_seed, init)
    ens.meta.update({"event_cap": int(event_cap), "leap_threshold": leap_threshold})
    return ens


def horizon_guidance(lambda1: float, initial_total: float, event_cap: int = DEFAULT_EVENT_CAP) -> float:
    """Rough largest horizon reachable under the event cap, (1/lambda1) ln(cap / <1, init>)."""
    if lambda1 <= 0:
        return math.inf
    return math.log(event_cap / max(initial_total, 1.0)) / lambda1
