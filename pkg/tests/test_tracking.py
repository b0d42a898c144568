import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmreduce.exceptions import IncomparableError, NumericalError
from ssmreduce.lti import GramianPair, gramian_diagonal, random_diagonal_system
from ssmreduce.reduction import HankelSpectrum, hankel_singular_values
from ssmreduce.tracking import (
    HankelOperatorSnapshot,
    TrajectoryLog,
    assign_trajectories,
    csv_header,
    energy_fraction,
    hankel_operator,
    read_tracking_csv,
    solve_assignment,
    weyl_bound,
    write_tracking_csv,
)


def snap(H, step=0):
    H = np.asarray(H, dtype=complex)
    return HankelOperatorSnapshot(H, step, HankelSpectrum(np.linalg.eigvalsh(H)[::-1]))


def pair(P, Q):
    return GramianPair(np.asarray(P, float), np.asarray(Q, float), 0.0, 0.0, "test")


def random_hermitian(rng, n, scale=1.0):
    M = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (M + M.conj().T) / 2


class TestHankelOperator:
    def test_identity(self):
        assert np.allclose(hankel_operator(pair(np.eye(3), np.eye(3))).H, np.eye(3))

    def test_diagonal_sandwich(self):
        assert np.allclose(hankel_operator(pair(np.diag([4.0, 1.0]), np.eye(2))).H, np.diag([2.0, 1.0]))

    def test_agrees_with_hsv_path(self, rng):
        for _ in range(10):
            g = gramian_diagonal(random_diagonal_system(rng, 8, p=2, q=2))
            s = hankel_operator(g)
            ref = hankel_singular_values(g).sigma
            assert np.max(np.abs(s.sigma.sigma - ref)) <= 1e-9 * ref[0]
            assert np.allclose(s.H, s.H.conj().T)
            assert np.allclose(np.linalg.eigvalsh(s.H)[::-1], s.sigma.sigma, atol=1e-9)

    def test_not_psd(self):
        with pytest.raises(NumericalError):
            hankel_operator(pair(np.eye(2), np.diag([1.0, -1.0])))


class TestWeyl:
    def test_identical(self):
        s = snap(np.diag([3.0, 1.0]))
        assert weyl_bound(s, s) == 0.0

    def test_diagonal_example(self):
        a, b = snap(np.diag([3.0, 1.0])), snap(np.diag([3.1, 1.05]))
        w = weyl_bound(a, b)
        assert w == pytest.approx(0.1)
        assert np.all(np.abs(b.sigma.sigma - a.sigma.sigma) <= w + 1e-15)

    def test_incomparable(self):
        with pytest.raises(IncomparableError):
            weyl_bound(snap(np.eye(2)), snap(np.eye(3)))

    def test_fuzz(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 10))
            H = random_hermitian(rng, n)
            dH = random_hermitian(rng, n, 10.0 ** rng.uniform(-6, 0))
            a, b = snap(H), snap(H + dH)
            shift = np.abs(np.linalg.eigvalsh(H + dH) - np.linalg.eigvalsh(H))
            assert np.all(shift <= weyl_bound(a, b) + 1e-12)


class TestAssignment:
    def test_identical(self):
        s = HankelSpectrum([3.0, 2.0, 1.0])
        assert list(assign_trajectories(s, s)) == [0, 1, 2]

    def test_two_by_two(self):
        perm = assign_trajectories(HankelSpectrum([3.0, 1.0]), HankelSpectrum([2.98, 1.02]))
        assert list(perm) == [0, 1]

    def test_cost_matrix(self):
        perm, total = solve_assignment([[0.0, 1.0], [1.0, 0.0]])
        assert list(perm) == [0, 1] and total == 0.0

    def test_length_mismatch(self):
        with pytest.raises(IncomparableError):
            assign_trajectories(HankelSpectrum([1.0]), HankelSpectrum([1.0, 0.5]))

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 7))
            C = rng.random((n, n))
            perm, total = solve_assignment(C)
            best = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
            assert total == pytest.approx(best)
            assert sorted(perm) == list(range(n))

    def test_penalty_never_forbids(self):
        perm = assign_trajectories(HankelSpectrum([3.0, 1.0]), HankelSpectrum([10.0, 0.0]), bound=1e-3)
        assert sorted(perm) == [0, 1]


class TestEnergyFraction:
    def test_values(self):
        s = HankelSpectrum([4.0, 2.0, 1.0, 1.0])
        assert energy_fraction(s, 0) == 1.0
        assert energy_fraction(s, 4) == 0.0
        assert energy_fraction(s, 2) == 0.25

    def test_degenerate(self):
        assert energy_fraction(HankelSpectrum([0.0, 0.0]), 1) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=15))
    def test_monotone_in_unit_interval(self, vals):
        s = HankelSpectrum(sorted(vals, reverse=True))
        fr = [energy_fraction(s, r) for r in range(s.n + 1)]
        assert all(0.0 <= f <= 1.0 for f in fr)
        assert all(x >= y - 1e-15 for x, y in zip(fr, fr[1:]))


def drifting_snapshots(rng, n=6, steps=30, factor=0.999):
    base = random_diagonal_system(rng, n, rmin=0.3, rmax=0.9)
    out = []
    for k in range(steps):
        s = type(base)(base.a * factor ** k, base.B, base.C)
        out.append(hankel_operator(gramian_diagonal(s), k))
    return out


class TestTrajectoryLog:
    def test_weyl_holds_on_per_step_snapshots(self, rng):
        log = TrajectoryLog()
        for s in drifting_snapshots(rng):
            log.append(s)
        assert sum(r.violations for r in log.records) == 0
        assert all(r.weyl_bound > 0 for r in log.records[1:])

    def test_monotone_drift_keeps_identities(self, rng):
        log = TrajectoryLog()
        for s in drifting_snapshots(rng):
            log.append(s)
        assert all(np.array_equal(r.ids, log.records[0].ids) for r in log.records)
        assert log.bottom_identity_stability(2, 0.1) == 1.0
        # shrinking poles lower every HSV
        sig = np.array([r.sigma for r in log.records])
        assert np.all(np.diff(sig, axis=0) <= 1e-12)

    def test_composition_matches_endpoint_matching(self, rng):
        base = np.array([5.0, 3.0, 1.5, 0.5])
        snaps = [snap(np.diag(base * (1 + 0.01 * rng.standard_normal(4))), k) for k in range(10)]
        log = TrajectoryLog()
        for s in snaps:
            log.append(s)
        assert all(r.isolated for r in log.records[1:])
        composed = np.arange(4)
        for perm in log.assignments:
            composed = perm[composed]
        direct = assign_trajectories(snaps[0].sigma, snaps[-1].sigma)
        assert np.array_equal(composed, direct)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=8),
           st.lists(st.floats(0, 10), min_size=8, max_size=8))
    def test_sorted_matching_is_optimal(self, a, b):
        # with absolute-difference costs between sorted spectra the
        # order-preserving matching is optimal, so identities move only at ties
        prev = HankelSpectrum(sorted(a, reverse=True))
        nxt = HankelSpectrum(sorted(b[:len(a)], reverse=True))
        perm = assign_trajectories(prev, nxt)
        cost = np.abs(prev.sigma[:, None] - nxt.sigma[None, :])
        assert cost[np.arange(len(a)), perm].sum() == pytest.approx(np.trace(cost), abs=1e-12)

    def test_restart_on_dimension_change(self, rng):
        log = TrajectoryLog()
        log.append(snap(np.diag([3.0, 2.0, 1.0]), 0))
        rec = log.append(snap(np.diag([3.0, 2.0]), 1))
        assert rec.restarted and rec.weyl_bound is None
        assert set(rec.ids).isdisjoint(log.records[0].ids)

    def test_csv_round_trip(self, tmp_path, rng):
        logs = [TrajectoryLog(block=b, tracked_r=(1, 2)) for b in range(2)]
        snaps = drifting_snapshots(rng, n=4, steps=5)
        for s in snaps:
            for lg in logs:
                lg.append(s)
        path = tmp_path / "t.csv"
        write_tracking_csv(logs, path)
        cols = read_tracking_csv(path)
        assert list(cols) == csv_header((1, 2))
        assert list(cols) == ["step", "block", "channel", "state_index", "sigma", "weyl_bound",
                              "energy_fraction_r1", "energy_fraction_r2"]
        assert len(cols["step"]) == 2 * 5 * 4
        assert np.isnan(cols["weyl_bound"][0])
        first = np.array(cols["sigma"][:4])
        assert np.allclose(first, snaps[0].sigma.sigma)
        assert cols["energy_fraction_r1"][0] == pytest.approx(energy_fraction(snaps[0].sigma, 1))
