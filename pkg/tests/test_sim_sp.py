import math

import numpy as np
import pytest

from branchlil.model import SpModel, bundled
from branchlil.sim_sp import StepTooLarge, default_dt, dt_sweep, simulate_sp, simulate_sp_ensemble
from branchlil.spectral import semigroup, spectral_context


def test_zero_noise_follows_the_mean_ode():
    m = SpModel([[-1.0, 1.0], [0.5, -0.5]], [-1.0, 0.0], [0.0, 0.0])
    t = simulate_sp(m, [1.0, 2.0], [0.5, 1.0], seed=3, dt=1e-4)
    exact = np.array([1.0, 2.0]) @ semigroup(spectral_context(m), 1.0)
    np.testing.assert_allclose(t.states[-1], exact, rtol=1e-3)


def test_euler_growth_factor_is_exact_for_scalar_drift():
    m = SpModel([[0.0]], [-1.0], [0.0])
    t = simulate_sp(m, [1.0], [1.0], seed=0, dt=1e-3)
    assert t.states[-1, 0] == pytest.approx((1 + 1e-3) ** 1000, rel=1e-10)


@pytest.mark.parametrize("a", [-1.0, 0.7])
def test_scalar_ode_error_is_first_order(a):
    # Euler's relative error for x' = -a x is about a^2 t dt / 2
    m = SpModel([[0.0]], [a], [0.0])
    dt, t = 1e-4, 1.0
    x = simulate_sp(m, [2.0], [t], seed=0, dt=dt).states[-1, 0]
    exact = 2.0 * math.exp(-a * t)
    assert abs(x / exact - 1) <= a * a * t * dt / 2 * 1.01
    short = simulate_sp(m, [2.0], [0.01], seed=0, dt=dt).states[-1, 0]
    assert abs(short / (2.0 * math.exp(-a * 0.01)) - 1) < 1e-6


def test_step_too_large():
    with pytest.raises(StepTooLarge):
        simulate_sp(bundled("feller"), [1.0], [1.0], seed=0, dt=0.5)


def test_default_dt_is_stable():
    m = bundled("feller")
    simulate_sp(m, [1.0], [0.1], seed=0, dt=default_dt(m))


def test_zero_is_absorbing():
    m = SpModel([[0.0]], [2.0], [4.0])
    ens = simulate_sp_ensemble(m, [0.2], [0.5, 1.0, 3.0], 200, 9, dt=1e-3)
    x = ens.states[:, :, 0]
    assert np.all(x >= 0)
    dead = x[:, 0] == 0
    assert dead.any()
    assert np.all(x[dead, 1:] == 0)


def test_determinism_and_parallelism():
    m = bundled("feller")
    a = simulate_sp_ensemble(m, [1.0], [0.5, 1.0], 32, 4, dt=1e-3)
    b = simulate_sp_ensemble(m, [1.0], [0.5, 1.0], 32, 4, dt=1e-3, parallelism=3)
    np.testing.assert_array_equal(a.states, b.states)


def test_jump_model_mean():
    m = SpModel(np.zeros((2, 2)), [0.2, 0.1], [0.3, 0.3], eta=[[0, 0.3], [0.2, 0]],
                jumps=[[(0.5, [0.4, 0.2])], []])
    ens = simulate_sp_ensemble(m, [1.0, 1.0], [1.0], 4000, 12, dt=2e-3)
    target = np.array([1.0, 1.0]) @ semigroup(spectral_context(m), 1.0)
    x = ens.states[:, 0, :]
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - target) < 4 * se)
    assert ens.meta["jump_count"] > 0


def test_bad_inputs():
    m = bundled("feller")
    with pytest.raises(ValueError):
        simulate_sp_ensemble(m, [1.0], [1.0], 0, 0)
    with pytest.raises(ValueError):
        simulate_sp(m, [-1.0], [1.0], seed=0)
    with pytest.raises(ValueError):
        simulate_sp(m, [1.0], [1.0, 2.0], seed=0, horizon=1.5)
    with pytest.raises(ValueError):
        dt_sweep(m, [1.0], 1.0, [1e-2, 3e-3], 10, 0)


def test_substeps_couple_levels():
    m = bundled("feller")
    coarse = simulate_sp_ensemble(m, [1.0], [1.0], 200, 5, dt=1e-2, substeps=10)
    fine = simulate_sp_ensemble(m, [1.0], [1.0], 200, 5, dt=1e-3)
    # same Brownian path, so the coupled gap is far below the marginal spread
    gap = np.abs(coarse.states - fine.states).mean()
    assert gap < 0.1 * fine.states.std()
