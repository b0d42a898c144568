"""Hankel singular values and balanced truncation of a single system."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import (
    ConditioningError,
    DimensionError,
    InvariantError,
    MinimalityError,
    NumericalError,
    SSMReduceError,
    StabilityError,
)
from .lti import DenseSystem, DiagonalSystem, GramianPair, System, gramians, require_stable

log = logging.getLogger(__name__)

PSD_TOL = 1e-10
EIGVEC_COND_MAX = 1e8
CLAMP_MODULUS = 1.0 - 1e-6
TIE_RTOL = 1e-9
MINIMALITY_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class HankelSpectrum:
    """Hankel singular values sorted in decreasing order."""

    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float).reshape(-1)
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)

    @property
    def n(self):
        return self.sigma.shape[0]

    @property
    def energy_total(self):
        return float(np.sum(self.sigma))

    @property
    def degenerate(self):
        return not self.energy_total > 0

    def __len__(self):
        return self.n


@dataclass(frozen=True, eq=False)
class BalancedRealization:
    A_b: np.ndarray
    B_b: np.ndarray
    C_b: np.ndarray
    D: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray
    sigma: HankelSpectrum

    def as_system(self):
        return DenseSystem(self.A_b, self.B_b, self.C_b, self.D)


@dataclass(eq=False)
class ReductionResult:
    system: System
    r: int
    n_before: int
    discarded_energy: float
    error_bound: float
    executed: bool
    sigma: Optional[HankelSpectrum] = None
    diagnostic: str = ""
    rank: Optional[int] = None

    def as_event(self, **extra):
        """JSON-serializable record of this attempt."""
        rec = {
            "n_before": self.n_before,
            "r": self.r,
            "rank": self.r if self.rank is None else self.rank,
            "discarded_energy": self.discarded_energy,
            "bound": self.error_bound,
            "executed": self.executed,
        }
        if self.diagnostic:
            rec["diagnostic"] = self.diagnostic
        rec.update(extra)
        return rec


def _psd_sqrt(M, name):
    w, V = np.linalg.eigh((M + M.conj().T) / 2)
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny) if w.size else 1.0
    if w.size and w.min() < -PSD_TOL * scale:
        raise NumericalError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.conj().T


def hankel_singular_values(g: GramianPair):
    """Sorted ``sqrt(spec(P Q))`` via the Hermitian matrix ``P^1/2 Q P^1/2``."""
    Ph = _psd_sqrt(g.P, "P")
    M = Ph @ g.Q @ Ph
    w = np.linalg.eigvalsh((M + M.conj().T) / 2)
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny) if w.size else 1.0
    if w.size and w.min() < -PSD_TOL * scale:
        raise NumericalError(f"Q is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return HankelSpectrum(np.sqrt(np.clip(w, 0.0, None))[::-1])


def choose_rank(sigma: HankelSpectrum, tau: float):
    """Smallest ``r`` whose leading HSVs keep at least ``(1 - tau)`` of the energy.

    ``tau`` is the tolerated fraction of *discarded* energy. A cut that would
    split a multiplet ``sigma_r == sigma_{r+1}`` is moved down to keep it whole.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    s = sigma.sigma
    n = s.shape[0]
    if sigma.degenerate:
        warnings.warn("zero total Hankel energy; rank 0", RuntimeWarning, stacklevel=2)
        return 0
    if tau == 0.0:
        return n
    cum = np.cumsum(s)
    r = int(np.searchsorted(cum, (1.0 - tau) * cum[-1], side="left")) + 1
    r = min(max(r, 1), n)
    start = r
    while r < n and math.isclose(s[r - 1], s[r], rel_tol=TIE_RTOL):
        r += 1
    if r != start:
        warnings.warn(f"HSV tie at cut {start}; keeping {r} states", RuntimeWarning, stacklevel=2)
    return r


def error_bound(sigma: HankelSpectrum, r: int):
    """Twice the sum of the discarded HSVs."""
    if not 0 <= r <= sigma.n:
        raise ValueError(f"r must lie in [0, {sigma.n}], got {r}")
    return float(2.0 * np.sum(sigma.sigma[r:]))


def _cholesky_factor(M, name):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    n = M.shape[0]
    jitter = 1e-12 * abs(np.trace(M).real) / max(n, 1)
    try:
        return np.linalg.cholesky(M + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise MinimalityError(f"{name} is not positive definite; realization is not minimal") from exc


def _eig_factor(M):
    w, V = np.linalg.eigh((M + M.conj().T) / 2)
    return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


def gramian_factors(g: GramianPair, semidefinite=False):
    """Square-root factors ``(Zp, Zq)``; Cholesky (with one jitter retry) if none are stored.

    ``semidefinite=True`` falls back to an eigendecomposition factor instead
    of raising, which is enough when only the leading balanced states are
    formed.
    """
    def factor(M, name):
        try:
            return _cholesky_factor(M, name)
        except MinimalityError:
            if not semidefinite:
                raise
            return _eig_factor(M)

    Zp = g.Zp if g.Zp is not None else factor(g.P, "P")
    Zq = g.Zq if g.Zq is not None else factor(g.Q, "Q")
    return Zp, Zq


def _as_dense(sys: System):
    if isinstance(sys, DiagonalSystem):
        return sys.to_dense()
    return sys


def _project(sys: System, Zp, Zq, r=None):
    dense = _as_dense(sys)
    U, s, Vh = np.linalg.svd(Zq.conj().T @ Zp, full_matrices=False)
    k = s.shape[0] if r is None else r
    if k > s.shape[0] or not s[k - 1] > 0 or not np.all(np.isfinite(s[:k])):
        raise MinimalityError("zero Hankel singular value; realization is not minimal")
    isq = 1.0 / np.sqrt(s[:k])
    T = (Zp @ Vh[:k].conj().T) * isq[None, :]
    T_inv = isq[:, None] * (U[:, :k].conj().T @ Zq.conj().T)
    return BalancedRealization(T_inv @ dense.A @ T, T_inv @ dense.B, dense.C @ T, dense.D,
                               T, T_inv, HankelSpectrum(s))


def is_numerically_minimal(g: GramianPair, eps_min=MINIMALITY_EPS):
    """Both Gramians have smallest eigenvalue above ``eps_min * trace``."""
    for M in (g.P, g.Q):
        tr = np.trace(M).real
        if not tr > 0 or np.linalg.eigvalsh(M).min() <= eps_min * tr:
            return False
    return True


def balancing_transform(sys: System, g: GramianPair, eps_min=MINIMALITY_EPS):
    """Square-root balancing.

    With ``P = Lp Lp^H``, ``Q = Lq Lq^H`` and ``Lq^H Lp = U S V^H``:
    ``T = Lp V S^-1/2`` and ``T^-1 = S^-1/2 U^H Lq^H``. The returned
    realization has both Gramians equal to ``diag(S)``.
    """
    if not is_numerically_minimal(g, eps_min):
        raise MinimalityError(f"a Gramian has eigenvalues below {eps_min:g} * trace; "
                              "realization is not minimal")
    Zp, Zq = gramian_factors(g)
    if min(Zp.shape[1], Zq.shape[1]) < sys.n:
        raise MinimalityError("Gramian factor is rank deficient; realization is not minimal")
    return _project(sys, Zp, Zq)


def truncate(bal: BalancedRealization, r: int):
    """Leading ``r``-state block of a balanced realization."""
    n = bal.A_b.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"r must lie in [1, {n}], got {r}")
    s = bal.sigma.sigma
    if r < n and math.isclose(s[r - 1], s[r], rel_tol=TIE_RTOL):
        warnings.warn("truncation splits a Hankel singular value multiplet", RuntimeWarning, stacklevel=2)
    return bal.A_b[:r, :r], bal.B_b[:r, :], bal.C_b[:, :r]


def rediagonalize(A_r, B_r, C_r, D=None, real_part_readout=True, post_update_readout=False):
    """Eigen-decompose ``A_r`` and return the equivalent :class:`DiagonalSystem`.

    Eigenvalues of modulus >= 1 (round-off) are pulled radially to ``1 - 1e-6``.
    """
    A_r = np.asarray(A_r)
    lam, V = np.linalg.eig(A_r)
    cond = np.linalg.cond(V)
    if not cond <= EIGVEC_COND_MAX:
        raise ConditioningError(f"eigenvector matrix condition number {cond:.3e} exceeds {EIGVEC_COND_MAX:g}")
    B = np.linalg.solve(V, B_r)
    C = np.asarray(C_r) @ V
    mod = np.abs(lam)
    over = mod >= 1.0
    if over.any():
        log.warning("clamping %d eigenvalue(s) with modulus >= 1", int(over.sum()))
        lam = np.where(over, lam / np.where(over, mod, 1.0) * CLAMP_MODULUS, lam)
    if D is None:
        D = np.zeros((C.shape[0], B.shape[1]))
    return DiagonalSystem(lam, B, C, np.real(D), real_part_readout=real_part_readout,
                          post_update_readout=post_update_readout)


def real_output_realization(sys: DiagonalSystem):
    """Real ``2n``-state realization of ``y = Re(C h) + D x`` (states ``[Re h; Im h]``).

    Unlike :func:`lti.real_embedding`, inputs and outputs stay real and
    unchanged in number, so the Gramians see only what the readout exposes.
    """
    a = sys.a
    A = np.block([[np.diag(a.real), -np.diag(a.imag)], [np.diag(a.imag), np.diag(a.real)]])
    B = np.vstack([sys.B.real, sys.B.imag])
    C = np.hstack([sys.C.real, -sys.C.imag])
    return DenseSystem(A, B, C, sys.D, post_update_readout=sys.post_update_readout)


def fold_conjugate_pairs(sys: DiagonalSystem, rtol=1e-8):
    """Shrink a real-transfer diagonal system to one state per conjugate pole pair.

    For each pair ``(l, conj l)`` the state with ``Im l > 0`` is kept and its
    readout doubled, since ``Re(2 c s) = c s + conj(c s)``. Real poles are kept
    as they are. The result has ``real_part_readout=True``.
    """
    lam = sys.a
    scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
    real = np.abs(lam.imag) <= rtol * scale
    upper = lam.imag > rtol * scale
    if int(upper.sum()) != int((lam.imag < -rtol * scale).sum()):
        raise InvariantError("poles are not closed under conjugation")
    keep = real | upper
    C = sys.C[:, keep] * np.where(upper[keep], 2.0, 1.0)[None, :]
    a = np.where(real[keep], lam[keep].real, lam[keep])
    return DiagonalSystem(a, sys.B[keep], C, sys.D, real_part_readout=True,
                          post_update_readout=sys.post_update_readout)


def reduce_system(sys: System, tau: float, frac_gate: float = 0.95, diagonal=None, readout="auto"):
    """Full reduction pipeline for one system.

    Gramians, HSVs, rank selection, the fraction gate, balancing, truncation
    and (optionally) re-diagonalization. Failures inside the pipeline do not
    raise: they return ``executed=False`` with a diagnostic, leaving the
    input system untouched.

    ``readout`` picks the map being balanced for a diagonal system with
    ``real_part_readout``: ``"real"`` balances the real ``2n``-state
    realization of ``Re(C h)`` and folds conjugate pole pairs back into single
    complex states, ``"complex"`` balances ``C h`` as if it were the output.
    ``"auto"`` means ``"real"`` for such systems. The returned ``r`` is the
    order of the returned system; ``rank`` is the cut in the balanced spectrum.
    """
    require_stable(sys)
    n = sys.n
    if diagonal is None:
        diagonal = isinstance(sys, DiagonalSystem)
    if readout not in ("auto", "real", "complex"):
        raise ValueError(f"unknown readout {readout!r}")
    use_real = (readout != "complex" and isinstance(sys, DiagonalSystem) and sys.real_part_readout)
    work = real_output_realization(sys) if use_real else sys
    n_work = work.n

    def unchanged(rank, sigma=None, diag=""):
        disc = float(np.sum(sigma.sigma[rank:])) if sigma is not None else 0.0
        return ReductionResult(sys, n, n, disc, 2.0 * disc, False, sigma, diag, rank)

    try:
        g = gramians(work)
        sigma = hankel_singular_values(g)
    except (SSMReduceError, np.linalg.LinAlgError) as exc:
        return unchanged(n_work, diag=f"{type(exc).__name__}: {exc}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rank = choose_rank(sigma, tau)
    if rank == 0:
        return unchanged(n_work, sigma, "degenerate: zero Hankel energy")
    if not rank < frac_gate * n_work:
        return unchanged(rank, sigma, "gate: rank not below frac_gate * n")
    try:
        # only the leading balanced coordinates are formed
        bal = _project(work, *gramian_factors(g, semidefinite=True), r=rank)
        A_r, B_r, C_r = bal.A_b, bal.B_b, bal.C_b
        if use_real:
            A_r, B_r, C_r = A_r.real, B_r.real, C_r.real
        if diagonal:
            real = sys.real_part_readout if isinstance(sys, DiagonalSystem) else True
            reduced = rediagonalize(A_r, B_r, C_r, sys.D, real_part_readout=real,
                                    post_update_readout=sys.post_update_readout)
            if use_real:
                reduced = fold_conjugate_pairs(reduced)
        else:
            reduced = DenseSystem(A_r, B_r, C_r, sys.D, post_update_readout=sys.post_update_readout)
            if not reduced.is_stable:
                raise StabilityError("truncated system lost stability")
    except (SSMReduceError, np.linalg.LinAlgError) as exc:
        return unchanged(rank, sigma, f"{type(exc).__name__}: {exc}")
    if not reduced.n < frac_gate * n:
        return unchanged(rank, sigma, "gate: reduced order not below frac_gate * n")
    disc = float(np.sum(sigma.sigma[rank:]))
    return ReductionResult(reduced, reduced.n, n, disc, 2.0 * disc, True, sigma, "", rank)
