"""Model-selection heuristics over the columns of a regression problem.

Each heuristic returns a :class:`SelectionTrace` whose ``ordering`` is oriented so
that its first ``k`` entries form the ``k``-parameter model. Candidate errors are
the normalized weighted IDM residuals of :mod:`paramprune.reduction`; ties are
resolved toward the lowest column index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .reduction import RegressionProblem, idm_error, idm_error_direct, lstsq

TIE_TOL = 1e-12
EXHAUSTIVE_LIMIT = 20


@dataclass
class SelectionTrace:
    heuristic: str
    ordering: tuple
    labels: tuple
    tol: float
    eps_est: np.ndarray  # index k -> error of the k-parameter model, k = 0..n
    eps_val: np.ndarray = None
    reached_k: int = -1
    subsets: dict = field(default_factory=dict)  # non-nested heuristics only
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.ordering) != list(range(len(self.ordering))):
            raise ValueError("ordering must be a permutation of the columns")

    @property
    def n(self) -> int:
        return len(self.ordering)

    def subset(self, k: int) -> tuple:
        if k in self.subsets:
            return tuple(self.subsets[k])
        return tuple(sorted(self.ordering[:k]))

    def ordered_labels(self):
        return [self.labels[i] for i in self.ordering]

    def to_dict(self) -> dict:
        return {
            "heuristic": self.heuristic,
            "tol": self.tol,
            "ordering": [self.labels[i] for i in self.ordering],
            "ordering_index": list(map(int, self.ordering)),
            "reached_k": int(self.reached_k),
            "eps_tau_est": [float(e) for e in self.eps_est],
            "eps_tau_val": None if self.eps_val is None else [float(e) for e in self.eps_val],
            "subsets": {str(k): list(map(int, v)) for k, v in self.subsets.items()},
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d) -> "SelectionTrace":
        labels = tuple(d["ordering"])
        order = tuple(d["ordering_index"])
        lab = [None] * len(order)
        for name, i in zip(labels, order):
            lab[i] = name
        val = d.get("eps_tau_val")
        return cls(d["heuristic"], order, tuple(lab), float(d["tol"]), np.array(d["eps_tau_est"]),
                   None if val is None else np.array(val), int(d.get("reached_k", -1)),
                   {int(k): tuple(v) for k, v in d.get("subsets", {}).items()}, d.get("extra", {}))


class _Evaluator:
    """eps_tau of column subsets, on the compressed factor or the full matrix."""

    def __init__(self, problem: RegressionProblem, from_scratch=False):
        self.problem = problem
        self.from_scratch = from_scratch
        self.calls = 0

    def __call__(self, cols) -> float:
        self.calls += 1
        cols = sorted(cols)
        if self.from_scratch:
            return idm_error_direct(self.problem, cols)
        return idm_error(self.problem, cols)


def _argmin(scores, candidates):
    scores = np.asarray(scores)
    best = scores.min()
    tied = [c for c, s in zip(candidates, scores) if s <= best + TIE_TOL]
    return min(tied)


def _curves(problem, validation, subset_of, n):
    est = np.empty(n + 1)
    val = None if validation is None else np.empty(n + 1)
    for k in range(n + 1):
        cols = list(subset_of(k))
        if k == 0:
            est[k] = 1.0
            if val is not None:
                val[k] = 1.0
            continue
        phi = lstsq(problem.R_W[:, cols], problem.r_chi).x
        est[k] = idm_error(problem, cols, phi)
        if val is not None:
            val[k] = idm_error(validation, cols, phi)
    return est, val


def _finish(name, problem, validation, ordering, tol, reached_k, subsets=None, extra=None):
    subsets = subsets or {}
    ordering = tuple(int(i) for i in ordering)

    def subset_of(k):
        return subsets[k] if k in subsets else ordering[:k]

    est, val = _curves(problem, validation, subset_of, len(ordering))
    return SelectionTrace(name, ordering, problem.labels, tol, est, val, reached_k,
                          {k: tuple(sorted(v)) for k, v in subsets.items()}, extra or {})


def qr_heuristic(problem: RegressionProblem, tol=1e-2, validation=None, from_scratch=False) -> SelectionTrace:
    """Columns in pivoted-QR order; the reported model is the shortest prefix within ``tol``."""
    A = problem.Ww if from_scratch else problem.R_W
    piv = sla.qr(A, mode="r", pivoting=True)[1]
    trace = _finish("qr", problem, validation, piv, tol, -1)
    ok = np.flatnonzero(trace.eps_est < tol)
    trace.reached_k = int(ok[0]) if ok.size else -1
    return trace


def qr_beta(problem: RegressionProblem, r: int) -> np.ndarray:
    """beta = R_rr^{-1} R_re for the first ``r`` pivoted columns (pivot order)."""
    _, R, _ = sla.qr(problem.R_W, mode="economic", pivoting=True)
    return sla.solve_triangular(R[:r, :r], R[:r, r:])


def forward_selection(problem: RegressionProblem, tol=1e-2, validation=None, from_scratch=False) -> SelectionTrace:
    """Greedy addition of the column that lowers eps_tau most; complete order recorded."""
    ev = _Evaluator(problem, from_scratch)
    n = problem.n_params
    chosen, reached = [], -1
    while len(chosen) < n:
        cand = [i for i in range(n) if i not in chosen]
        scores = [ev(chosen + [c]) for c in cand]
        pick = _argmin(scores, cand)
        chosen.append(pick)
        if reached < 0 and min(scores) < tol:
            reached = len(chosen)
    return _finish("fs", problem, validation, chosen, tol, reached, extra={"evaluations": ev.calls})


def backward_elimination(problem: RegressionProblem, tol=1e-2, validation=None, from_scratch=False) -> SelectionTrace:
    """Greedy removal of the column whose loss raises eps_tau least; complete order recorded.

    ``extra`` holds the set size right after the first removal that exceeds ``tol``
    (``overshoot_k``) and the last size still within it (``admissible_k``).
    """
    ev = _Evaluator(problem, from_scratch)
    n = problem.n_params
    remaining = list(range(n))
    removed = []
    overshoot = -1
    while remaining:
        scores = [ev([c for c in remaining if c != r]) for r in remaining]
        pick = _argmin(scores, remaining)
        remaining.remove(pick)
        removed.append(pick)
        if overshoot < 0 and min(scores) > tol:
            overshoot = len(remaining)
    ordering = removed[::-1]
    extra = {"evaluations": ev.calls, "removal_order": list(map(int, removed)),
             "overshoot_k": overshoot, "admissible_k": overshoot + 1 if overshoot >= 0 else 0}
    return _finish("be", problem, validation, ordering, tol, extra["admissible_k"], extra=extra)


def forward_selection_two_pass(problem: RegressionProblem, tol=1e-2, validation=None,
                               from_scratch=False, max_iter=None) -> SelectionTrace:
    """Forward selection with a second search per iteration.

    Each iteration adds the best column, drops the column added by the previous
    iteration's second search, then adds the best column again. Models are not
    nested, so every size is stored in ``subsets``.
    """
    ev = _Evaluator(problem, from_scratch)
    n = problem.n_params
    max_iter = 4 * n if max_iter is None else max_iter

    def best_addition(current):
        cand = [i for i in range(n) if i not in current]
        return _argmin([ev(current + [c]) for c in cand], cand)

    current, last = [], None
    subsets = {0: ()}
    reached = -1
    for _ in range(max_iter):
        if len(current) >= n:
            break
        current.append(best_addition(current))
        subsets.setdefault(len(current), tuple(current))
        if last is not None:
            current.remove(last)
        if len(current) < n:
            s = best_addition(current)
            current.append(s)
            last = s
        subsets[len(current)] = tuple(current)
        if reached < 0 and ev(current) < tol:
            reached = len(current)
    # entrance order of the final model, used only as a nominal permutation
    order = []
    for k in range(1, n + 1):
        for c in subsets.get(k, ()):
            if c not in order:
                order.append(c)
    order += [c for c in range(n) if c not in order]
    return _finish("fs2", problem, validation, order, tol, reached,
                   subsets={k: v for k, v in subsets.items() if k > 0}, extra={"evaluations": ev.calls})


def exhaustive_best_subset(problem: RegressionProblem, k: int):
    """True minimizer of eps_tau over all ``k``-subsets (small problems only)."""
    n = problem.n_params
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search limited to {EXHAUSTIVE_LIMIT} columns, got {n}")
    if not 0 <= k <= n:
        raise ValueError("k out of range")
    if k == 0:
        return (), 1.0
    best, best_eps = None, np.inf
    for cols in itertools.combinations(range(n), k):
        e = idm_error(problem, cols)
        if e < best_eps - TIE_TOL:
            best, best_eps = cols, e
    return tuple(best), float(best_eps)


HEURISTICS = {
    "qr": qr_heuristic,
    "fs": forward_selection,
    "be": backward_elimination,
    "fs2": forward_selection_two_pass,
}


def run_heuristic(name: str, problem, tol=1e-2, validation=None, from_scratch=False) -> SelectionTrace:
    try:
        fn = HEURISTICS[name]
    except KeyError:
        raise ValueError(f"unknown heuristic {name!r}; choose from {sorted(HEURISTICS)}") from None
    return fn(problem, tol=tol, validation=validation, from_scratch=from_scratch)
