"""Following Hankel singular values through training.

Each snapshot builds the Hermitian matrix ``H = sqrt(P^1/2 Q P^1/2)`` whose
eigenvalues are the HSVs. Consecutive snapshots are compared with Weyl's
inequality (each sorted eigenvalue moves by at most the spectral radius of
``H' - H``) and HSV identities are carried forward by a minimum-cost
assignment between the two spectra.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import IncomparableError, NumericalError
from .lti import GramianPair
from .reduction import HankelSpectrum, _psd_sqrt

VIOLATION_PENALTY = 1e6
WEYL_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class HankelOperatorSnapshot:
    H: np.ndarray
    step: int
    sigma: HankelSpectrum

    @property
    def n(self):
        return self.H.shape[0]


def hankel_operator(g: GramianPair, step=0):
    """Snapshot of ``H = sqrt(P^1/2 Q P^1/2)`` for one set of Gramians."""
    Ph = _psd_sqrt(g.P, "P")
    M = Ph @ g.Q @ Ph
    try:
        H = _psd_sqrt(M, "P^1/2 Q P^1/2")
    except NumericalError as exc:
        raise NumericalError(f"Q is not positive semidefinite: {exc}") from exc
    H = (H + H.conj().T) / 2
    w = np.clip(np.linalg.eigvalsh(H), 0.0, None)[::-1]
    return HankelOperatorSnapshot(H, int(step), HankelSpectrum(w))


def weyl_bound(prev: HankelOperatorSnapshot, next: HankelOperatorSnapshot):
    """Largest absolute eigenvalue of ``next.H - prev.H``."""
    if prev.n != next.n:
        raise IncomparableError(f"snapshots have different orders ({prev.n} vs {next.n})")
    if prev.n == 0:
        return 0.0
    w = np.linalg.eigvalsh(next.H - prev.H)
    return float(max(abs(w[0]), abs(w[-1])))


def solve_assignment(cost):
    """Minimum-cost perfect matching; returns ``(cols, total)`` with ``row i -> cols[i]``."""
    cost = np.asarray(cost, dtype=float)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def assign_trajectories(prev_sigma: HankelSpectrum, next_sigma: HankelSpectrum, bound=None):
    """Match HSVs across a step: ``perm[i]`` is the index in ``next_sigma`` of ``prev_sigma[i]``.

    Cost is ``|sigma_i - sigma'_j|``. With ``bound`` given, pairs further
    apart than the bound are penalized (never forbidden).
    """
    a = prev_sigma.sigma
    b = next_sigma.sigma
    if a.shape != b.shape:
        raise IncomparableError(f"spectra have different lengths ({a.shape[0]} vs {b.shape[0]})")
    cost = np.abs(a[:, None] - b[None, :])
    if bound is not None:
        cost = np.where(cost > bound, cost + VIOLATION_PENALTY * cost, cost)
    perm, _ = solve_assignment(cost)
    return perm


def energy_fraction(sigma: HankelSpectrum, r: int):
    """Share of total Hankel energy held by the HSVs beyond the first ``r``."""
    if not 0 <= r <= sigma.n:
        raise ValueError(f"r must lie in [0, {sigma.n}], got {r}")
    total = sigma.energy_total
    if not total > 0:
        return 0.0
    return float(np.sum(sigma.sigma[r:]) / total)


def min_gap(sigma: HankelSpectrum):
    s = sigma.sigma
    return float(np.min(-np.diff(s))) if s.shape[0] > 1 else np.inf


@dataclass
class TrajectoryRecord:
    step: int
    sigma: np.ndarray
    ids: np.ndarray                    # tracked id of each sorted position
    weyl_bound: Optional[float]        # against the previous snapshot
    violations: int = 0
    isolated: Optional[bool] = None    # bound < half the smallest gap
    restarted: bool = False


@dataclass
class TrajectoryLog:
    """Append-only HSV history of one system (one block, or one channel)."""

    block: int = 0
    channel: int = 0
    tracked_r: Sequence[int] = (1, 2)
    records: List[TrajectoryRecord] = field(default_factory=list)
    assignments: List[np.ndarray] = field(default_factory=list)
    _last: Optional[HankelOperatorSnapshot] = None
    _next_id: int = 0

    def restart(self):
        """Forget the previous snapshot; the next one gets fresh identities."""
        self._last = None

    def _fresh_ids(self, n):
        ids = np.arange(self._next_id, self._next_id + n)
        self._next_id += n
        return ids

    def append(self, snap: HankelOperatorSnapshot):
        prev = self._last
        if prev is None or prev.n != snap.n:
            rec = TrajectoryRecord(snap.step, snap.sigma.sigma.copy(), self._fresh_ids(snap.n),
                                   None, restarted=True)
        else:
            bound = weyl_bound(prev, snap)
            perm = assign_trajectories(prev.sigma, snap.sigma, bound)
            ids = np.empty(snap.n, dtype=int)
            ids[perm] = self.records[-1].ids
            moved = np.abs(snap.sigma.sigma[perm] - prev.sigma.sigma)
            rec = TrajectoryRecord(snap.step, snap.sigma.sigma.copy(), ids, bound,
                                   int(np.sum(moved > bound + WEYL_SLACK)),
                                   bound < 0.5 * min_gap(prev.sigma))
            self.assignments.append(perm)
        self.records.append(rec)
        self._last = snap
        return rec

    def energy_fractions(self, rec: TrajectoryRecord):
        spec = HankelSpectrum(rec.sigma)
        return {r: (energy_fraction(spec, r) if r <= spec.n else float("nan")) for r in self.tracked_r}

    def rows(self):
        for rec in self.records:
            fr = self.energy_fractions(rec)
            for pos in range(rec.sigma.shape[0]):
                yield [rec.step, self.block, self.channel, int(rec.ids[pos]), float(rec.sigma[pos]),
                       "" if rec.weyl_bound is None else rec.weyl_bound] + [fr[r] for r in self.tracked_r]

    def bottom_identity_stability(self, k=2, skip_fraction=0.1):
        """Fraction of consecutive (non-restart) pairs whose bottom-``k`` tracked ids agree,
        ignoring the first ``skip_fraction`` of the records."""
        start = int(np.floor(skip_fraction * len(self.records)))
        same = total = 0
        for a, b in zip(self.records[start:], self.records[start + 1:]):
            if b.restarted:
                continue
            total += 1
            same += set(a.ids[-k:].tolist()) == set(b.ids[-k:].tolist())
        return same / total if total else float("nan")


def csv_header(tracked_r: Sequence[int]):
    return ["step", "block", "channel", "state_index", "sigma", "weyl_bound"] + [
        f"energy_fraction_r{r}" for r in tracked_r]


def write_tracking_csv(logs: Sequence[TrajectoryLog], path, tracked_r: Optional[Sequence[int]] = None):
    """One row per tracked state per snapshot, logs written in the given order."""
    if tracked_r is None:
        tracked_r = logs[0].tracked_r if logs else (1, 2)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(csv_header(tracked_r))
        for lg in logs:
            for row in lg.rows():
                w.writerow(row)


def read_tracking_csv(path) -> Dict[str, list]:
    """Column-oriented view of a tracking CSV (numbers parsed, blanks as NaN)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, v in zip(header, row):
                cols[h].append(float(v) if v != "" else float("nan"))
    return cols
