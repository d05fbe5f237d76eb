import math

import numpy as np
import pytest

from branchlil.model import BmpModel, OffspringLaw, bundled
from branchlil.sim_bmp import (
    EventCapExceeded,
    ZeroInitialMass,
    horizon_guidance,
    simulate,
    simulate_ensemble,
)
from branchlil.spectral import semigroup, spectral_context


def test_same_seed_same_path():
    m = bundled("t2")
    a = simulate(m, [1, 0], [0.0, 1.0, 2.0], seed=11)
    b = simulate(m, [1, 0], [0.0, 1.0, 2.0], seed=11)
    c = simulate(m, [1, 0], [0.0, 1.0, 2.0], seed=11, replica=1)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.events == b.events
    assert not np.array_equal(a.states, c.states) or a.events != c.events


def test_parallel_ensemble_is_identical():
    m = bundled("rot3")
    e1 = simulate_ensemble(m, [1, 0, 0], [0.5, 1.5], 64, 3, parallelism=1)
    e4 = simulate_ensemble(m, [1, 0, 0], [0.5, 1.5], 64, 3, parallelism=4)
    np.testing.assert_array_equal(e1.states, e4.states)
    np.testing.assert_array_equal(e1.events, e4.events)


def test_no_branching_no_motion_is_constant():
    m = BmpModel([[0.0]], [0.0], [OffspringLaw([1.0], [[2]])])
    t = simulate(m, [5], [0.0, 1.0, 10.0], seed=1)
    assert t.states[:, 0].tolist() == [5, 5, 5]
    assert t.events == 0


def test_motion_conserves_population():
    m = BmpModel([[-1.0, 1.0], [2.0, -2.0]], [0.0, 0.0],
                 [OffspringLaw([1.0], [[2, 0]]), OffspringLaw([1.0], [[0, 2]])])
    ens = simulate_ensemble(m, [3, 4], [0.5, 3.0], 50, 2)
    assert np.all(ens.states.sum(axis=2) == 7)


def test_pure_death_goes_extinct():
    m = BmpModel([[0.0]], [2.0], [OffspringLaw([1.0], [[0]])])
    ens = simulate_ensemble(m, [3], [0.0, 30.0], 100, 5)
    assert np.all(ens.states[:, 1, 0] == 0)
    assert np.all(ens.states[:, 0, 0] == 3)


def test_yule_marginal_is_geometric():
    # N_1 ~ Geometric(p = e^-1) on {1, 2, ...}
    n = 4000
    ens = simulate_ensemble(bundled("yule"), [1], [1.0], n, 2024)
    N = ens.states[:, 0, 0]
    p = math.exp(-1)
    for k in (1, 2, 3):
        freq = np.mean(N == k)
        target = p * (1 - p) ** (k - 1)
        assert abs(freq - target) < 4 * math.sqrt(target * (1 - target) / n)
    assert abs(N.mean() - math.e) < 4 * math.sqrt((1 - p) / p**2 / n)


def test_mean_matches_semigroup():
    m = bundled("t2")
    ens = simulate_ensemble(m, [1, 0], [1.5], 3000, 17)
    target = np.array([1.0, 0.0]) @ semigroup(spectral_context(m), 1.5)
    x = ens.states[:, 0, :]
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - target) < 4 * se)


def test_event_cap():
    m = bundled("yule")
    t = simulate(m, [1], [1.0, 10.0], seed=0, event_cap=50)
    assert t.capped and t.status == "capped"
    assert np.isnan(t.states[-1]).all()
    with pytest.raises(EventCapExceeded):
        simulate(m, [1], [1.0, 10.0], seed=0, event_cap=50, strict=True)


def test_bad_inputs():
    m = bundled("yule")
    with pytest.raises(ZeroInitialMass):
        simulate(m, [0], [1.0], seed=0)
    with pytest.raises(ValueError):
        simulate(m, [1], [2.0, 1.0], seed=0)
    with pytest.raises(ValueError):
        simulate(m, [1.5], [1.0], seed=0)
    with pytest.raises(ValueError):
        simulate_ensemble(m, [1], [1.0], 0, 0)


def test_leap_records_innovations():
    m = bundled("t2")
    times = np.arange(0.0, 9.0)
    ens = simulate_ensemble(m, [1, 0], times, 40, 8, leap_threshold=200)
    ctx = spectral_context(m)
    P = semigroup(ctx, 1.0)
    leaped = [i for i, s in enumerate(ens.status) if s == "leaped"]
    assert leaped
    for r in leaped:
        k0 = int(np.searchsorted(times, ens.leap_times[r]))
        for k in range(k0, len(times) - 1):
            expected = ens.states[r, k + 1] - P.T @ ens.states[r, k]
            np.testing.assert_allclose(ens.noise[r, k], expected, rtol=1e-9, atol=1e-6)
        assert np.all(np.isnan(ens.noise[r, :k0]))
    assert np.all(ens.states >= 0)


def test_leap_preserves_mean():
    m = bundled("yule")
    ens = simulate_ensemble(m, [1], [0.0, 4.0, 8.0], 2000, 21, leap_threshold=50)
    x = ens.states[:, -1, 0]
    assert abs(x.mean() / math.exp(8) - 1) < 4 * x.std(ddof=1) / math.sqrt(len(x)) / math.exp(8)


def test_horizon_guidance():
    assert horizon_guidance(1.0, 1.0, 10**8) == pytest.approx(math.log(1e8))
    assert horizon_guidance(-0.5, 1.0) == math.inf


def test_yule_never_goes_extinct():
    ens = simulate_ensemble(bundled("yule"), [1], [10.0], 500, 31, leap_threshold=1e4)
    assert np.all(ens.states[:, 0, 0] > 0)


@pytest.mark.parametrize("p0", [0.3, 0.6])
def test_extinction_fraction_with_death_atom(p0):
    m = BmpModel([[0.0]], [1.0], [OffspringLaw([p0, 1 - p0], [[0], [2]])])
    n = 4000
    ens = simulate_ensemble(m, [1], [10.0], n, 77)
    frac = float(np.mean(ens.states[:, 0, 0] == 0))
    q = min(1.0, p0 / (1 - p0))
    # linear birth-death with b = 1 - p0, d = p0: exact P(extinct by t)
    b, d, t = 1 - p0, p0, 10.0
    g = math.exp((b - d) * t)
    q_t = d * (g - 1) / (b * g - d)
    se = math.sqrt(max(q_t * (1 - q_t), 1e-12) / n)
    assert abs(frac - q_t) <= 3 * se
    assert abs(frac - q) <= 3 * se + abs(q - q_t)


@pytest.mark.slow
def test_yule_mean_at_horizon_five():
    ens = simulate_ensemble(bundled("yule"), [1], [5.0], 10_000, 55)
    n = ens.states[:, 0, 0]
    assert abs(n.mean() - math.exp(5)) <= 3 * n.std(ddof=1) / math.sqrt(len(n))


@pytest.mark.slow
def test_yule_variance_at_two():
    ens = simulate_ensemble(bundled("yule"), [1], [2.0], 100_000, 56)
    n = ens.states[:, 0, 0]
    c = n - n.mean()
    var = c @ c / (len(n) - 1)
    se = np.std(c * c, ddof=1) / math.sqrt(len(n))
    assert abs(var - (math.exp(4) - math.exp(2))) <= 3 * se
