"""Discrete linear time-invariant systems.

Two realizations are supported: :class:`DenseSystem` (arbitrary, possibly
complex, matrices) and :class:`DiagonalSystem` (diagonal transition, the
layout used by LRU-style recurrent blocks). Everything here is a pure
function of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .exceptions import ConvergenceError, DimensionError, NumericalError, StabilityError

STABILITY_MARGIN = 1e-9


def _as_matrix(x, name, dtype=None):
    arr = np.array(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class DenseSystem:
    """State-space realization ``h(k+1) = A h(k) + B x(k)``, ``y(k) = C h(k) + D x(k)``.

    The matrices may be complex (balanced realizations of complex systems
    are), in which case the analysis below is carried out in complex
    arithmetic.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray = None
    post_update_readout: bool = False

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise DimensionError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise DimensionError(f"C has {C.shape[1]} columns, expected {n}")
        D = np.zeros((C.shape[0], B.shape[1])) if self.D is None else _as_matrix(self.D, "D")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        _freeze(A, B, C, D)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.C.shape[0]

    @property
    def is_complex(self):
        return any(np.iscomplexobj(m) for m in (self.A, self.B, self.C, self.D))

    @property
    def poles(self):
        return np.linalg.eigvals(self.A) if self.n else np.zeros(0, dtype=complex)

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(self.poles))) if self.n else 0.0

    @property
    def is_stable(self):
        return self.spectral_radius < 1.0 - STABILITY_MARGIN


@dataclass(frozen=True, eq=False)
class DiagonalSystem:
    """Realization with a diagonal transition matrix ``diag(a)``.

    ``real_part_readout`` makes the realized output ``Re(C h) + D x``;
    ``post_update_readout`` reads the state after absorbing ``x(k)``,
    i.e. ``y(k) = C h(k+1) + D x(k)`` (LRU convention).
    """

    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray = None
    real_part_readout: bool = False
    post_update_readout: bool = False

    def __post_init__(self):
        a = np.array(self.a, dtype=complex).reshape(-1)
        B = _as_matrix(self.B, "B", complex)
        C = _as_matrix(self.C, "C", complex)
        n = a.shape[0]
        if B.shape[0] != n:
            raise DimensionError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise DimensionError(f"C has {C.shape[1]} columns, expected {n}")
        D = np.zeros((C.shape[0], B.shape[1])) if self.D is None else _as_matrix(self.D, "D", float)
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        _freeze(a, B, C, D)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.C.shape[0]

    @property
    def is_complex(self):
        return True

    @property
    def poles(self):
        return self.a

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(self.a))) if self.n else 0.0

    @property
    def is_stable(self):
        return self.spectral_radius < 1.0 - STABILITY_MARGIN

    def to_dense(self):
        return DenseSystem(np.diag(self.a), self.B, self.C, self.D,
                           post_update_readout=self.post_update_readout)


System = Union[DenseSystem, DiagonalSystem]


@dataclass(frozen=True, eq=False)
class GramianPair:
    """Controllability ``P`` and observability ``Q`` Gramians of one system."""

    P: np.ndarray
    Q: np.ndarray
    residual_P: float
    residual_Q: float
    method: str
    # optional square-root factors, P = Zp Zp^H and Q = Zq Zq^H
    Zp: np.ndarray = None
    Zq: np.ndarray = None

    @property
    def n(self):
        return self.P.shape[0]


@dataclass(frozen=True)
class LivSampleSet:
    """System matrices of an input-varying system evaluated on a batch of inputs.

    ``samples`` holds ``(A, B, C)`` or ``(A, B, C, D)`` tuples.
    """

    samples: Sequence[tuple] = field(default_factory=tuple)

    @property
    def m(self):
        return len(self.samples)


def require_stable(sys: System):
    rho = sys.spectral_radius
    if not rho < 1.0 - STABILITY_MARGIN:
        raise StabilityError(f"spectral radius {rho:.12g} is not < 1 - {STABILITY_MARGIN:g}")


# --------------------------------------------------------------------------
# simulation


def simulate(sys: System, inputs, h0=None):
    """Run the state recursion and return outputs of shape ``(q, L)``.

    ``inputs`` has shape ``(p, L)``; a 1-D input is accepted when ``p == 1``.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1 and sys.p == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] != sys.p:
        raise DimensionError(f"inputs must have shape ({sys.p}, L), got {x.shape}")
    L = x.shape[1]
    if L < 1:
        raise DimensionError("need at least one time step")
    diagonal = isinstance(sys, DiagonalSystem)
    dtype = complex if (diagonal or sys.is_complex) else float
    h = np.zeros(sys.n, dtype=dtype)
    if h0 is not None:
        h0 = np.asarray(h0).reshape(-1)
        if h0.shape != (sys.n,):
            raise DimensionError(f"h0 must have length {sys.n}, got {h0.shape}")
        h = h + h0
    Bx = sys.B @ x
    states = np.empty((sys.n, L), dtype=dtype)
    for k in range(L):
        if sys.post_update_readout:
            h = (sys.a * h if diagonal else sys.A @ h) + Bx[:, k]
            states[:, k] = h
        else:
            states[:, k] = h
            h = (sys.a * h if diagonal else sys.A @ h) + Bx[:, k]
    y = sys.C @ states
    if diagonal and sys.real_part_readout:
        y = y.real
    return y + sys.D @ x


# --------------------------------------------------------------------------
# Gramians


def _relative_residual(A, X, rhs, adjoint):
    if adjoint:
        R = A.conj().T @ X @ A - X + rhs
    else:
        R = A @ X @ A.conj().T - X + rhs
    scale = np.linalg.norm(rhs)
    return float(np.linalg.norm(R) / (scale if scale > 0 else 1.0))


def smith_iteration(A, S0, tol=1e-14, max_doublings=64):
    """Solve ``A X A^H - X + S0 = 0`` by squaring.

    Accumulates ``S <- S + M S M^H`` while ``M <- M^2``, which after ``k``
    doublings sums the first ``2**k`` terms of the series.
    """
    S = np.array(S0, dtype=np.result_type(A, S0, float))
    M = np.array(A, dtype=S.dtype)
    update_norm = np.inf
    for _ in range(max_doublings):
        update = M @ S @ M.conj().T
        S = S + update
        update_norm = np.linalg.norm(update)
        if not np.isfinite(update_norm):
            raise ConvergenceError("Smith iteration diverged", residual=float(update_norm))
        if update_norm <= tol * np.linalg.norm(S):
            break
        M = M @ M
    else:
        rel = update_norm / max(np.linalg.norm(S), np.finfo(float).tiny)
        raise ConvergenceError(
            f"Smith iteration did not converge in {max_doublings} doublings "
            f"(last relative update {rel:.3e})", residual=float(rel))
    return (S + S.conj().T) / 2


def factored_smith(A, Z0, tol=1e-15, max_doublings=64):
    """Square-root form of :func:`smith_iteration`.

    Returns ``Z`` with ``Z Z^H = X``. Each doubling stacks ``[Z, M Z]`` and
    compresses it back to at most ``n`` columns with a QR factorization, so
    small Gramian directions keep full relative accuracy.
    """
    n = A.shape[0]
    Z = np.array(Z0, dtype=np.result_type(A, Z0, float))
    M = np.array(A, dtype=Z.dtype)
    rel = np.inf
    for _ in range(max_doublings):
        MZ = M @ Z
        upd = np.linalg.norm(MZ) ** 2
        R = np.linalg.qr(np.hstack([Z, MZ]).conj().T, mode="r")
        Z = R.conj().T[:, :n]
        total = np.linalg.norm(Z) ** 2
        if not np.isfinite(total):
            raise ConvergenceError("Smith iteration diverged", residual=float(total))
        rel = upd / total if total > 0 else 0.0
        if rel <= tol:
            break
        M = M @ M
    else:
        raise ConvergenceError(
            f"Smith iteration did not converge in {max_doublings} doublings "
            f"(last relative update {rel:.3e})", residual=float(rel))
    return Z


def gramian_dense(sys: System, tol=1e-15, max_doublings=64):
    """Controllability and observability Gramians by (factored) Smith squaring."""
    require_stable(sys)
    if isinstance(sys, DiagonalSystem):
        sys = sys.to_dense()
    A, B, C = sys.A, sys.B, sys.C
    Zp = factored_smith(A, B, tol, max_doublings)
    Zq = factored_smith(A.conj().T, C.conj().T, tol, max_doublings)
    P = Zp @ Zp.conj().T
    Q = Zq @ Zq.conj().T
    P = (P + P.conj().T) / 2
    Q = (Q + Q.conj().T) / 2
    return GramianPair(P, Q, _relative_residual(A, P, B @ B.conj().T, False),
                       _relative_residual(A, Q, C.conj().T @ C, True), "smith_iteration",
                       Zp, Zq)


def gramian_diagonal(sys: DiagonalSystem):
    """Entry-wise closed form of both Gramians for a diagonal transition.

    ``P_ij = (B B^H)_ij / (1 - a_i conj(a_j))`` and
    ``Q_ij = (C^H C)_ij / (1 - conj(a_i) a_j)``.
    """
    require_stable(sys)
    a = sys.a
    BB = sys.B @ sys.B.conj().T
    CC = sys.C.conj().T @ sys.C
    P = BB / (1.0 - a[:, None] * a.conj()[None, :])
    Q = CC / (1.0 - a.conj()[:, None] * a[None, :])
    P = (P + P.conj().T) / 2
    Q = (Q + Q.conj().T) / 2
    A = np.diag(a)
    return GramianPair(P, Q, _relative_residual(A, P, BB, False),
                       _relative_residual(A, Q, CC, True), "closed_form_diagonal")


def gramians(sys: System, **kwargs):
    """Dispatch to the closed form for diagonal systems, Smith otherwise."""
    if isinstance(sys, DiagonalSystem):
        return gramian_diagonal(sys)
    return gramian_dense(sys, **kwargs)


# --------------------------------------------------------------------------
# frequency response


def _real_readout(sys):
    return isinstance(sys, DiagonalSystem) and sys.real_part_readout


def frequency_grid(sys: System, grid_size):
    # complex systems lack conjugate symmetry, so the full circle is sampled
    if sys.is_complex and not _real_readout(sys):
        return np.linspace(0.0, 2 * np.pi, grid_size, endpoint=False)
    return np.linspace(0.0, np.pi, grid_size)


def frequency_response(sys: System, omegas):
    """Evaluate ``G(e^{iw})`` on the given frequencies; returns ``(len(w), q, p)``.

    Points where ``e^{iw}`` is within 1e-12 of a pole are returned as NaN.
    For a diagonal system with ``real_part_readout`` this is the response of
    the real map ``x -> Re(C h) + D x``, i.e. ``(G(z) + conj(G(conj z))) / 2``
    without ``D``.
    """
    omegas = np.asarray(omegas, dtype=float)
    z = np.exp(1j * omegas)
    poles = sys.poles
    if _real_readout(sys):
        poles = np.concatenate([poles, poles.conj()])
    bad = np.zeros(z.shape, dtype=bool)
    if sys.n:
        bad = np.min(np.abs(z[:, None] - poles[None, :]), axis=1) < 1e-12
    zz = np.where(bad, 2.0, z)
    if isinstance(sys, DiagonalSystem):
        resolvent = 1.0 / (zz[:, None] - sys.a[None, :])
        G = np.einsum("qn,wn,np->wqp", sys.C, resolvent, sys.B)
        if sys.real_part_readout:
            mirror = 1.0 / (zz[:, None] - sys.a.conj()[None, :])
            G = 0.5 * (G + np.einsum("qn,wn,np->wqp", sys.C.conj(), mirror, sys.B.conj()))
    else:
        n = sys.n
        M = zz[:, None, None] * np.eye(n)[None] - sys.A[None]
        X = np.linalg.solve(M, np.broadcast_to(sys.B, (len(zz),) + sys.B.shape))
        G = np.einsum("qn,wnp->wqp", sys.C, X)
    if sys.post_update_readout:
        G = G * zz[:, None, None]
    G = G + sys.D[None]
    G[bad] = np.nan
    return G


def _sigma_max(G):
    good = ~np.isnan(G).any(axis=(1, 2))
    if not good.any():
        raise NumericalError("every frequency sample hit a pole")
    return np.linalg.svd(G[good], compute_uv=False)[:, 0]


def hinf_estimate(sys: System, grid_size=1024):
    """Sampled H-infinity norm: a lower bound on ``sup_w sigma_max(G(e^{iw}))``."""
    if grid_size < 16:
        raise ValueError("grid_size must be >= 16")
    require_stable(sys)
    G = frequency_response(sys, frequency_grid(sys, grid_size))
    return float(np.max(_sigma_max(G)))


def hinf_distance(sys1: System, sys2: System, grid_size=1024):
    """Sampled H-infinity norm of ``G1 - G2`` (both systems share p and q)."""
    if (sys1.p, sys1.q) != (sys2.p, sys2.q):
        raise DimensionError("systems have different input/output dimensions")
    require_stable(sys1)
    require_stable(sys2)
    grid = frequency_grid(sys1 if sys1.is_complex else sys2, grid_size)
    G = frequency_response(sys1, grid) - frequency_response(sys2, grid)
    return float(np.max(_sigma_max(G)))


# --------------------------------------------------------------------------
# input-varying systems


def average_dynamics(samples: LivSampleSet, rescale_to=None):
    """Arithmetic mean of sampled ``(A, B, C[, D])`` matrices.

    The mean need not be stable. When ``rescale_to`` is given and the mean
    transition has spectral radius ``>= 1``, it is scaled so its radius
    equals ``rescale_to``.
    """
    if samples.m < 1:
        raise ValueError("average_dynamics needs at least one sample")
    first = samples.samples[0]
    shapes = [np.shape(m) for m in first]
    for s in samples.samples:
        if len(s) != len(first) or [np.shape(m) for m in s] != shapes:
            raise DimensionError("samples do not share dimensions")
    means = [np.mean([np.asarray(s[i]) for s in samples.samples], axis=0)
             for i in range(len(first))]
    A, B, C = means[:3]
    D = means[3] if len(means) > 3 else None
    out = DenseSystem(A, B, C, D)
    if rescale_to is not None and not out.is_stable:
        rho = out.spectral_radius
        out = DenseSystem(A * (rescale_to / rho), B, C, D)
    return out


# --------------------------------------------------------------------------
# helpers used by tests, benchmarks and fixtures


def random_stable_system(rng, n, p=1, q=1, radius=0.9):
    """Random real system whose transition has spectral radius ``radius``."""
    A = rng.standard_normal((n, n))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-300)
    return DenseSystem(A, rng.standard_normal((n, p)), rng.standard_normal((q, n)),
                       rng.standard_normal((q, p)))


def random_diagonal_system(rng, n, p=1, q=1, rmin=0.2, rmax=0.95, complex_poles=True):
    mod = rng.uniform(rmin, rmax, n)
    phase = rng.uniform(0, 2 * np.pi, n) if complex_poles else np.where(rng.random(n) < 0.5, 0.0, np.pi)
    B = rng.standard_normal((n, p))
    C = rng.standard_normal((q, n))
    if complex_poles:
        B = B + 1j * rng.standard_normal((n, p))
        C = C + 1j * rng.standard_normal((q, n))
    return DiagonalSystem(mod * np.exp(1j * phase), B, C, rng.standard_normal((q, p)))


def similarity_transform(sys: DenseSystem, T):
    """Return ``(T^-1 A T, T^-1 B, C T, D)``."""
    Ti = np.linalg.inv(T)
    return DenseSystem(Ti @ sys.A @ T, Ti @ sys.B, sys.C @ T, sys.D,
                       post_update_readout=sys.post_update_readout)


def real_embedding(sys: System):
    """Real ``2n``-state system equivalent to a complex one.

    Uses ``M -> [[Re M, -Im M], [Im M, Re M]]`` on every matrix, so inputs
    and outputs are doubled as well (real part first).
    """
    if isinstance(sys, DiagonalSystem):
        sys = sys.to_dense()

    def emb(M):
        M = np.asarray(M, dtype=complex)
        return np.block([[M.real, -M.imag], [M.imag, M.real]])

    return DenseSystem(emb(sys.A), emb(sys.B), emb(sys.C), emb(sys.D),
                       post_update_readout=sys.post_update_readout)
