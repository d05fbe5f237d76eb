import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from branchlil.model import bundled
from branchlil.spectral import (
    DegenerateSpectrum,
    NonPositivePrincipal,
    Overflow,
    apply_semigroup,
    eigensystem,
    mean_generator,
    normalized_semigroup,
    semigroup,
    spectral_context,
    verify_h1,
)


def test_yule_triple():
    ctx = spectral_context(bundled("yule"))
    assert ctx.lambda1 == pytest.approx(1.0, abs=1e-12)
    assert ctx.phi[0] == pytest.approx(1.0, abs=1e-12)
    assert ctx.phi_tilde[0] == pytest.approx(1.0, abs=1e-12)


def test_t2_triple_and_second_eigenvalue():
    ctx = spectral_context(bundled("t2"))
    np.testing.assert_allclose(mean_generator(bundled("t2")), [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)
    assert ctx.lambda1 == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(ctx.phi, [1, 1], atol=1e-12)
    np.testing.assert_allclose(ctx.phi_tilde, [0.5, 0.5], atol=1e-12)
    assert ctx.eigenvalues[1].real == pytest.approx(0.5, abs=1e-12)


def test_rot3_complex_pair():
    ctx = spectral_context(bundled("rot3"))
    got = sorted(ctx.eigenvalues, key=lambda z: (z.real, z.imag))
    want = [-2 - 1j * math.sqrt(3), -2 + 1j * math.sqrt(3), 1.0]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_biorthogonality():
    for name in ("t2", "rot3", "feller"):
        ctx = spectral_context(bundled(name))
        np.testing.assert_allclose(ctx.left @ ctx.right, np.eye(ctx.d), atol=1e-10)
        assert float(ctx.phi_tilde @ ctx.phi) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", ["t2", "rot3"])
def test_semigroup_matches_ode(name):
    ctx = spectral_context(bundled(name))
    f = np.arange(1.0, ctx.d + 1)
    sol = solve_ivp(lambda _, u: ctx.A @ u, (0, 2.0), f, t_eval=[0.5, 1.0, 2.0], rtol=1e-11, atol=1e-12)
    for k, t in enumerate(sol.t):
        np.testing.assert_allclose(apply_semigroup(ctx, t, f), sol.y[:, k], rtol=1e-8)


def test_semigroup_property():
    ctx = spectral_context(bundled("rot3"))
    np.testing.assert_allclose(semigroup(ctx, 0.7) @ semigroup(ctx, 1.1), semigroup(ctx, 1.8), rtol=1e-10)
    np.testing.assert_array_equal(semigroup(ctx, 0.0), np.eye(3))


def test_normalized_semigroup_converges_to_projection():
    ctx = spectral_context(bundled("t2"))
    np.testing.assert_allclose(normalized_semigroup(ctx, 60.0), np.outer(ctx.phi, ctx.phi_tilde), atol=1e-12)


def test_t2_delta_is_exponential():
    grid = np.array([0.5, 1.0, 2.0, 4.0, 8.0])
    tab = verify_h1(spectral_context(bundled("t2")), grid)
    np.testing.assert_allclose(tab.delta, np.exp(-0.5 * grid), rtol=1e-9)
    assert tab.fitted_rate == pytest.approx(0.5, rel=1e-6)
    assert tab.bounded


def test_verify_h1_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        verify_h1(spectral_context(bundled("t2")), [2.0, 1.0])


def test_degenerate_and_non_positive_principal():
    with pytest.raises(DegenerateSpectrum):
        eigensystem(np.eye(2))
    with pytest.raises(DegenerateSpectrum):
        eigensystem([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(NonPositivePrincipal):
        eigensystem([[0.0, -1.0], [-1.0, 0.0]])


def test_overflow_and_negative_time():
    ctx = spectral_context(bundled("yule"))
    with pytest.raises(Overflow):
        semigroup(ctx, 1e6)
    with pytest.raises(ValueError):
        semigroup(ctx, -1.0)


def _irreducible(n):
    return st.lists(st.floats(0.05, 3.0), min_size=n * n, max_size=n * n).map(
        lambda xs: np.array(xs).reshape(n, n))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4).flatmap(_irreducible), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_semigroup_property_random(M, s, t):
    A = M - np.diag(M.sum(axis=1)) + np.diag(np.diag(M))
    ctx = eigensystem(A)
    np.testing.assert_allclose(semigroup(ctx, s) @ semigroup(ctx, t), semigroup(ctx, s + t),
                               rtol=1e-8, atol=1e-10 * np.abs(semigroup(ctx, s + t)).max())
    assert np.all(ctx.phi > 0)


def test_mean_generators():
    np.testing.assert_array_equal(mean_generator(bundled("yule")), [[1.0]])
    S = np.roll(np.eye(3), 1, axis=1)
    np.testing.assert_allclose(mean_generator(bundled("rot3")), 2 * S - np.eye(3), atol=1e-15)


def test_closed_form_semigroups():
    assert semigroup(spectral_context(bundled("yule")), 2.0)[0, 0] == pytest.approx(math.exp(2), rel=1e-14)
    e, r = math.e, math.exp(0.5)
    want = 0.5 * np.array([[e + r, e - r], [e - r, e + r]])
    np.testing.assert_allclose(semigroup(spectral_context(bundled("t2")), 1.0), want, rtol=1e-13)


def test_t2_second_pair_and_rot3_projection():
    ctx = spectral_context(bundled("t2"))
    lam, g = ctx.pair(1)
    assert lam == pytest.approx(0.5)
    np.testing.assert_allclose(g / g[0], [1, -1], atol=1e-12)
    rot = spectral_context(bundled("rot3"))
    np.testing.assert_allclose(rot.phi, [1, 1, 1], atol=1e-12)
    np.testing.assert_allclose(rot.phi_tilde, [1 / 3] * 3, atol=1e-12)


def test_delta_limits():
    assert np.all(verify_h1(spectral_context(bundled("yule")), [1.0, 5.0]).delta == 0)
    assert verify_h1(spectral_context(bundled("t2")), [80.0]).delta[0] < 1e-17
