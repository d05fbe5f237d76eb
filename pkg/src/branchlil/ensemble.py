"""Replica-parallel execution and the ensemble container shared by both simulators."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Trajectory:
    """One sampled path.  States are float arrays so that leaped (continuum)
    segments and superprocess masses share the representation; exact BMP
    segments hold integral values."""

    sample_times: np.ndarray
    states: np.ndarray
    seed: int
    replica: int
    events: int
    capped: bool = False
    cap_time: float = np.inf
    leap_time: float = np.inf
    dt: float | None = None
    jump_count: int = 0
    noise: np.ndarray | None = None  # leap innovations X_{k+1} - P_k^T X_k, NaN before the leap

    @property
    def status(self) -> str:
        if self.capped:
            return "capped"
        if np.isfinite(self.leap_time):
            return "leaped"
        return "ok"


@dataclass
class Ensemble:
    kind: str
    model_name: str
    sample_times: np.ndarray
    states: np.ndarray  # (replicas, n_times, d)
    base_seed: int
    events: np.ndarray
    status: list
    init: np.ndarray
    leap_times: np.ndarray | None = None
    dt: float | None = None
    meta: dict = field(default_factory=dict)
    noise: np.ndarray | None = None  # (replicas, n_times - 1, d) when any replica leaped

    @property
    def replicas(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def valid(self) -> np.ndarray:
        """Mask of replicas that ran to the final sample time."""
        return np.array([s != "capped" for s in self.status])

    def functional(self, f) -> np.ndarray:
        """<f, X_t> per replica and sample time."""
        return self.states @ np.asarray(f)

    def summary(self, f=None) -> dict:
        f = np.ones(self.d) if f is None else np.asarray(f, dtype=float)
        vals = self.functional(f)[self.valid()]
        n = max(len(vals), 1)
        return {
            "replicas": int(self.replicas),
            "valid": int(self.valid().sum()),
            "times": self.sample_times.tolist(),
            "mean": vals.mean(axis=0).tolist(),
            "variance": vals.var(axis=0, ddof=1).tolist() if len(vals) > 1 else [0.0] * len(self.sample_times),
            "stderr": (vals.std(axis=0, ddof=1) / np.sqrt(n)).tolist() if len(vals) > 1 else [0.0] * len(self.sample_times),
            "events_total": int(self.events.sum()),
        }

    def summary_json(self, f=None) -> str:
        return json.dumps(self.summary(f), indent=2, sort_keys=True)

    def csv_rows(self):
        """Rows (replica, t, n_0, ..., n_{d-1}) in replica order."""
        for r in range(self.replicas):
            for k, t in enumerate(self.sample_times):
                yield (r, float(t), *self.states[r, k].tolist())


def run_replicas(fn: Callable[[int], Trajectory], replicas: int, jobs: int = 1) -> list:
    """Run ``fn(replica)`` for every replica index; results come back in index order."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if jobs <= 1:
        return [fn(r) for r in range(replicas)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, range(replicas)))


def assemble(kind: str, model_name: str, trajs: list, base_seed: int, init, dt=None) -> Ensemble:
    states = np.stack([t.states for t in trajs])
    noise = None
    if any(t.noise is not None for t in trajs):
        shape = (len(trajs[0].sample_times) - 1, states.shape[2])
        noise = np.stack([t.noise if t.noise is not None else np.full(shape, np.nan) for t in trajs])
    return Ensemble(
        kind=kind,
        model_name=model_name,
        sample_times=trajs[0].sample_times,
        states=states,
        base_seed=base_seed,
        events=np.array([t.events for t in trajs], dtype=np.int64),
        status=[t.status for t in trajs],
        init=np.asarray(init, dtype=float),
        leap_times=np.array([t.leap_time for t in trajs]),
        dt=dt,
        noise=noise,
    )
