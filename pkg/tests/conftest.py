import numpy as np
import pytest
import scipy.linalg

from ssmreduce.lti import DenseSystem, DiagonalSystem

# (criterion, ok, detail) lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# independent oracles


def lyap_oracle(A, B, C):
    """Gramians from SciPy's discrete Lyapunov solver (a different algorithm from ours)."""
    P = scipy.linalg.solve_discrete_lyapunov(A, B @ B.conj().T)
    Q = scipy.linalg.solve_discrete_lyapunov(A.conj().T, C.conj().T @ C)
    return P, Q


def series_gramian(A, B, terms=500):
    """Partial sum of ``sum_i A^i B B^H (A^H)^i``."""
    P = np.zeros((A.shape[0], A.shape[0]), dtype=np.result_type(A, B))
    M = B.copy()
    for _ in range(terms):
        P = P + M @ M.conj().T
        M = A @ M
    return P


def transfer(sys, z):
    """``G(z)`` evaluated by one dense solve per point; honors both readout flags."""
    z = np.atleast_1d(z)
    if isinstance(sys, DiagonalSystem):
        A, B, C = np.diag(sys.a), sys.B, sys.C
    else:
        A, B, C = sys.A, sys.B, sys.C
    n = A.shape[0]
    out = []
    for zk in z:
        X = np.linalg.solve(zk * np.eye(n) - A, B)
        G = C @ X
        if isinstance(sys, DiagonalSystem) and sys.real_part_readout:
            Xm = np.linalg.solve(zk * np.eye(n) - A.conj(), B.conj())
            G = 0.5 * (G + C.conj() @ Xm)
        if sys.post_update_readout:
            G = G * zk
        out.append(G + sys.D)
    return np.array(out)


def sampled_hinf_diff(s1, s2, grid=1024, full_circle=False):
    w = np.linspace(0, 2 * np.pi if full_circle else np.pi, grid, endpoint=not full_circle)
    G = transfer(s1, np.exp(1j * w)) - transfer(s2, np.exp(1j * w))
    return float(np.max(np.linalg.svd(G, compute_uv=False)[:, 0]))


# --------------------------------------------------------------------------
# generators


def minimal_stable_system(rng, n, p=1, q=1, radius=None, cond_max=1e10):
    """Random real stable system, redrawn until both Gramians are well conditioned.

    Rejection keeps the minimality assumption of balancing meaningful; the
    spectral radius is drawn from [0.3, 0.95] unless given.
    """
    while True:
        rho = rng.uniform(0.3, 0.95) if radius is None else radius
        A = rng.standard_normal((n, n))
        A *= rho / np.max(np.abs(np.linalg.eigvals(A)))
        sys = DenseSystem(A, rng.standard_normal((n, p)), rng.standard_normal((q, n)),
                          rng.standard_normal((q, p)))
        P, Q = lyap_oracle(sys.A, sys.B, sys.C)
        if np.linalg.cond(P) < cond_max and np.linalg.cond(Q) < cond_max:
            return sys


def well_conditioned(rng, n, lo=0.5, hi=2.0):
    Q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
    Q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q1 @ np.diag(rng.uniform(lo, hi, n)) @ Q2
