"""Mean semigroup, complex eigensystem and the principal triple.

On a finite type space the mean semigroup is ``T_t = exp(tA)`` acting on
column vectors, so that ``E_{delta_x}<f, X_t> = (exp(tA) f)[x]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import Model

SIMPLICITY_TOL = 1e-8
EXP_RANGE = 700.0
COND_LIMIT = 1e6


class SpectralError(ArithmeticError):
    pass


class DegenerateSpectrum(SpectralError):
    pass


class NonPositivePrincipal(SpectralError):
    pass


class Overflow(SpectralError):
    pass


def mean_generator(model: Model) -> np.ndarray:
    """Generator A of the mean semigroup.

    BMP: ``A = Q + diag(beta) (M - I)``.
    SP:  ``A = Q - diag(a) + eta + J`` where ``J[x, y]`` is the jump-rate
    weighted mass sent to ``y != x``; the local jump mass at ``x`` is
    compensated in the branching mechanism and does not enter the mean.
    """
    d = model.d
    if model.kind == "bmp":
        M = model.mean_matrix()
        return model.Q + np.diag(model.beta) @ (M - np.eye(d))
    J = np.zeros((d, d))
    for x, atoms in enumerate(model.jumps):
        if atoms.n_atoms:
            J[x] = atoms.rates @ atoms.masses
            J[x, x] = 0.0
    return model.Q - np.diag(model.a) + model.eta + J


@dataclass(frozen=True, eq=False)
class SpectralContext:
    """Eigen-decomposition of A with the principal triple singled out.

    ``eigenvalues[0]`` is always the principal eigenvalue. Right eigenvectors
    are the columns of ``right``; rows of ``left`` satisfy
    ``left[i] @ A = eigenvalues[i] * left[i]`` and ``left[i] @ right[:, i] = 1``
    (for the principal pair this is the ``<phi, phi_tilde> = 1`` normalization).
    """

    A: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    right_inv: np.ndarray
    lambda1: float
    phi: np.ndarray
    phi_tilde: np.ndarray
    cond: float
    gap: float

    def __post_init__(self):
        d = self.A.shape[0]
        object.__setattr__(self, "_norms", (
            float(np.abs(self.A).sum(axis=1).max()),
            float(np.abs(self.A - self.lambda1 * np.eye(d)).sum(axis=1).max()),
        ))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def supercritical(self) -> bool:
        return self.lambda1 > 0

    @property
    def norm(self) -> float:
        return self._norms[0]

    def pair(self, i: int) -> tuple[complex, np.ndarray]:
        return complex(self.eigenvalues[i]), self.right[:, i].copy()

    def find(self, value: complex, tol: float = 1e-8) -> int:
        """Index of the eigenvalue closest to ``value``."""
        dist = np.abs(self.eigenvalues - value)
        i = int(np.argmin(dist))
        if dist[i] > tol * max(1.0, abs(value)):
            raise KeyError(f"no eigenvalue within tolerance of {value}")
        return i


def _snap(z: np.ndarray, scale: float, tol: float = 1e-12) -> np.ndarray:
    z = np.array(z, dtype=complex)
    z.imag[np.abs(z.imag) <= tol * scale] = 0.0
    z.real[np.abs(z.real) <= tol * scale] = 0.0
    return z


def _fix_phase(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=complex)
    mod = np.abs(v)
    k = int(np.flatnonzero(mod >= mod.max() * (1 - 1e-9))[0])
    v = v * (np.conj(v[k]) / mod[k])
    v = v / np.abs(v).max()
    v.imag[np.abs(v.imag) < 1e-13] = 0.0
    return v


def eigensystem(A) -> SpectralContext:
    """Full complex eigensystem of ``A`` with the principal triple.

    Raises
    ------
    DegenerateSpectrum
        if the eigenvalue of maximal real part is not simple.
    NonPositivePrincipal
        if that eigenvalue is not real or has no one-signed eigenvector.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.all(np.isfinite(A)):
        raise ValueError("A has non-finite entries")
    d = A.shape[0]
    scale = max(1.0, float(np.abs(A).max()))

    w, vl, vr = scipy.linalg.eig(A, left=True, right=True)
    w = _snap(w, scale)
    i1 = int(np.argmax(w.real))
    lam1 = w[i1]
    others = np.delete(w, i1)
    if others.size and np.min(np.abs(others - lam1)) <= SIMPLICITY_TOL * scale:
        raise DegenerateSpectrum(f"principal eigenvalue {lam1} is not simple")
    if others.size and np.any(np.abs(others.real - lam1.real) <= SIMPLICITY_TOL * scale):
        raise DegenerateSpectrum("several eigenvalues share the maximal real part")
    if lam1.imag != 0:
        raise NonPositivePrincipal(f"eigenvalue of maximal real part {lam1} is not real")

    phi = np.real_if_close(vr[:, i1], tol=1e6)
    phit = np.real_if_close(np.conj(vl[:, i1]), tol=1e6)
    if np.iscomplexobj(phi) or np.iscomplexobj(phit):
        raise NonPositivePrincipal("principal eigenvectors are not real")
    phi = phi * np.sign(phi[np.argmax(np.abs(phi))])
    phit = phit * np.sign(phit[np.argmax(np.abs(phit))])
    tol = 1e-12
    if np.any(phi < -tol) or np.any(phit < -tol):
        raise NonPositivePrincipal("principal eigenvector changes sign")
    phi = np.clip(phi, 0.0, None) / np.abs(phi).max()
    phit = np.clip(phit, 0.0, None)
    phit = phit / (phit @ phi)

    order = [i1] + sorted(
        (i for i in range(d) if i != i1), key=lambda i: (-w[i].real, -w[i].imag)
    )
    vals = w[order]
    R = np.empty((d, d), dtype=complex)
    L = np.empty((d, d), dtype=complex)
    R[:, 0], L[0] = phi, phit
    for col, i in enumerate(order[1:], start=1):
        g = _fix_phase(vr[:, i])
        gt = np.conj(vl[:, i])
        gt = gt / (gt @ g)
        R[:, col], L[col] = g, gt

    # eigenvalue accuracy: Rayleigh quotient for the principal one
    lam1 = float(phit @ A @ phi / (phit @ phi)) if d > 1 else float(A[0, 0])
    vals[0] = lam1
    cond = float(np.linalg.cond(R)) if d > 1 else 1.0
    Rinv = np.linalg.inv(R) if cond < 1e14 else np.full((d, d), np.nan)
    gap = float(lam1 - vals[1].real) if d > 1 else np.inf
    for arr in (vals, R, L, Rinv, phi, phit):
        arr.setflags(write=False)
    return SpectralContext(
        A=A, eigenvalues=vals, right=R, left=L, right_inv=Rinv, lambda1=lam1,
        phi=phi, phi_tilde=phit, cond=cond, gap=gap,
    )


def spectral_context(model: Model) -> SpectralContext:
    return eigensystem(mean_generator(model))


def _check_range(ctx: SpectralContext, t: float, shift: float = 0.0) -> None:
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"time must be finite and >= 0, got {t}")
    if shift == 0.0:
        norm = ctx._norms[0]
    elif shift == ctx.lambda1:
        norm = ctx._norms[1]
    else:
        norm = float(np.abs(ctx.A - shift * np.eye(ctx.d)).sum(axis=1).max())
    if t * norm > EXP_RANGE:
        raise Overflow(f"t={t} exceeds the exponent range for this generator")


def _expm(ctx: SpectralContext, t: float, shift: float) -> np.ndarray:
    if ctx.cond < COND_LIMIT:
        V, Vinv = ctx.right, ctx.right_inv
        E = (V * np.exp((ctx.eigenvalues - shift) * t)) @ Vinv
        return E.real
    return scipy.linalg.expm(t * (ctx.A - shift * np.eye(ctx.d)))


def semigroup(ctx: SpectralContext, t: float) -> np.ndarray:
    """Matrix exponential exp(tA)."""
    _check_range(ctx, t)
    if t == 0:
        return np.eye(ctx.d)
    return _expm(ctx, t, 0.0)


def normalized_semigroup(ctx: SpectralContext, t: float) -> np.ndarray:
    """exp(t (A - lambda1 I)); bounded in t when lambda1 is simple and dominant."""
    _check_range(ctx, t, shift=ctx.lambda1)
    if t == 0:
        return np.eye(ctx.d)
    return _expm(ctx, t, ctx.lambda1)


def apply_semigroup(ctx: SpectralContext, t: float, f) -> np.ndarray:
    """T_t f for a (possibly complex) vector f."""
    f = np.asarray(f)
    out = semigroup(ctx, t) @ f
    return out


def _deviation(ctx: SpectralContext, t: float) -> np.ndarray:
    """B_t = exp(-lambda1 t) exp(tA) - phi phi_tilde^T."""
    if ctx.cond < COND_LIMIT:
        _check_range(ctx, t, shift=ctx.lambda1)
        V, Vinv = ctx.right[:, 1:], ctx.right_inv[1:]
        return ((V * np.exp((ctx.eigenvalues[1:] - ctx.lambda1) * t)) @ Vinv).real
    return normalized_semigroup(ctx, t) - np.outer(ctx.phi, ctx.phi_tilde)


@dataclass
class H1Table:
    t: np.ndarray
    delta: np.ndarray
    delta_nonneg: np.ndarray
    bound_constant: float
    fitted_rate: float
    gap: float

    @property
    def fitted_bound(self) -> np.ndarray:
        return self.bound_constant * np.exp(-self.gap * self.t)

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.delta)))

    def rows(self):
        for t, dlt, dn, fb in zip(self.t, self.delta, self.delta_nonneg, self.fitted_bound):
            yield float(t), float(dlt), float(dn), float(fb)


def verify_h1(ctx: SpectralContext, t_grid) -> H1Table:
    """Tabulate Delta_t, the distance to the rank-one limit, on a time grid.

    ``delta`` is ``max_x phi(x)^-1 sum_y |B_t[x, y]|`` (supremum over
    |f| <= 1); ``delta_nonneg`` restricts to 0 <= f <= 1, i.e.
    ``max_x phi(x)^-1 max(sum_y B_t[x,y]^+, sum_y B_t[x,y]^-)``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be nonempty and increasing")
    delta, delta_nn = [], []
    for t in t_grid:
        B = _deviation(ctx, t)
        delta.append(float((np.abs(B).sum(axis=1) / ctx.phi).max()))
        pos = np.clip(B, 0, None).sum(axis=1)
        neg = np.clip(-B, 0, None).sum(axis=1)
        delta_nn.append(float((np.maximum(pos, neg) / ctx.phi).max()))
    delta = np.array(delta)
    gap = ctx.gap if np.isfinite(ctx.gap) else 0.0
    C = float(np.max(delta * np.exp(gap * t_grid))) if gap else float(delta.max())
    ok = delta > 1e-14
    if ok.sum() >= 2:
        slope = np.polyfit(t_grid[ok], np.log(delta[ok]), 1)[0]
        rate = float(-slope)
    else:
        rate = float("inf")
    return H1Table(t_grid, delta, np.array(delta_nn), C, rate, gap)
