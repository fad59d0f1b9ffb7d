import numpy as np
import pytest
from hypothesis import given, strategies as st

from paramprune.heuristics import (SelectionTrace, backward_elimination, exhaustive_best_subset,
                                   forward_selection, forward_selection_two_pass, qr_beta, qr_heuristic,
                                   run_heuristic)
from paramprune.reduction import RegressionProblem, fit_subset, idm_error

seeds = st.integers(0, 2**31 - 1)
LABELS = tuple("abcdefghij")


def problem(W, chi=None, phi=None):
    W = np.asarray(W, dtype=float)
    if chi is None:
        chi = W @ (np.ones(W.shape[1]) if phi is None else phi)
    return RegressionProblem(W, np.asarray(chi, dtype=float), np.ones(W.shape[0]),
                             tuple(f"c{i}" for i in range(W.shape[1])), 2)


def orthogonal(seed, n=6, rows=30):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.normal(size=(rows, n)))[0]
    contrib = rng.permutation(np.geomspace(10.0, 0.1, n))
    return problem(Q, Q @ contrib), contrib


def random10(seed, noise=0.05):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(60, 10)) * rng.uniform(0.1, 3.0, 10)
    W[:, 3] = W[:, 1] + 0.01 * rng.normal(size=60)
    chi = W @ rng.normal(size=10) + noise * rng.normal(size=60)
    return RegressionProblem(W, chi, np.ones(60), LABELS, 2)


def test_qr_collinear_pair():
    w = np.arange(1.0, 7.0)
    tr = qr_heuristic(problem(np.column_stack([w, 2 * w])))
    assert tr.eps_est[1] == pytest.approx(tr.eps_est[2], abs=1e-12)
    assert tr.eps_est[1] < 1e-12


def test_qr_order_by_column_norm():
    rng = np.random.default_rng(0)
    Q = np.linalg.qr(rng.normal(size=(20, 5)))[0]
    norms = np.array([0.5, 3.0, 1.0, 7.0, 2.0])
    tr = qr_heuristic(problem(Q * norms))
    assert list(tr.ordering) == list(np.argsort(-norms))


def test_qr_beta_matches_least_squares():
    prob = random10(1)
    r = 6
    piv = qr_heuristic(prob).ordering
    np.testing.assert_allclose(qr_beta(prob, r), _beta_in_order(prob, piv, r), atol=1e-9)


def _beta_in_order(prob, piv, r):
    sel, exc = list(piv[:r]), list(piv[r:])
    A = prob.Ww[:, sel]
    return np.linalg.lstsq(A, prob.Ww[:, exc], rcond=None)[0]


def test_be_removes_zero_column_first():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(20, 5))
    W[:, 2] = 0.0
    tr = backward_elimination(problem(W))
    assert tr.extra["removal_order"][0] == 2


@given(seeds)
def test_orthogonal_greedy_is_optimal(seed):
    prob, contrib = orthogonal(seed)
    order = list(np.argsort(-np.abs(contrib)))
    fs = forward_selection(prob)
    be = backward_elimination(prob)
    fs2 = forward_selection_two_pass(prob)
    assert list(fs.ordering) == order
    assert be.extra["removal_order"] == order[::-1]
    for k in range(1, 7):
        best = exhaustive_best_subset(prob, k)[1]
        assert fs.eps_est[k] == pytest.approx(best, abs=1e-12)
        assert be.eps_est[k] == pytest.approx(best, abs=1e-12)
        assert sorted(fs2.subset(k)) == sorted(order[:k])


def test_fs2_beats_fs_on_collinear_pair():
    """FS picks the column aligned with chi; the two-pass variant finds the better pair."""
    rng = np.random.default_rng(0)
    u = rng.normal(size=40)
    v = rng.normal(size=40)
    v -= u * (u @ v) / (u @ u)
    e = rng.normal(size=40)
    e -= u * (u @ e) / (u @ u) + v * (v @ e) / (v @ v)
    # c0 = u + v, c1 = u - v cancel to 2v; c2 is close to chi alone
    W = np.column_stack([u + v, u - v, 1.2 * u + 0.2 * e, e])
    prob = problem(W, chi=u)
    fs = forward_selection(prob)
    fs2 = forward_selection_two_pass(prob)
    best_sub, best = exhaustive_best_subset(prob, 2)
    e_fs2 = idm_error(prob, fs2.subset(2))
    assert e_fs2 <= fs.eps_est[2] + 1e-12
    assert best <= e_fs2 + 1e-12


def test_fs2_terminates():
    prob = random10(3)
    tr = forward_selection_two_pass(prob, tol=1e-6, max_iter=15)
    assert tr.n == 10
    assert all(len(tr.subset(k)) == k for k in range(1, 11) if k in tr.subsets)


def test_exhaustive_conventions():
    prob = random10(4)
    sub, e = exhaustive_best_subset(prob, 10)
    assert sub == tuple(range(10)) and e == pytest.approx(idm_error(prob, range(10)))
    assert exhaustive_best_subset(prob, 0) == ((), 1.0)
    big = RegressionProblem(np.eye(21), np.ones(21), np.ones(21), tuple(map(str, range(21))), 1)
    with pytest.raises(ValueError):
        exhaustive_best_subset(big, 3)


@given(seeds)
def test_exhaustive_oracle_dominance(seed):
    """The brute-force optimum is never beaten and greedy stays within a factor 2."""
    prob = random10(seed)
    fs = forward_selection(prob)
    be = backward_elimination(prob)
    for k in range(1, 11):
        best = exhaustive_best_subset(prob, k)[1]
        assert best <= fs.eps_est[k] + 1e-12 and best <= be.eps_est[k] + 1e-12
        assert fs.eps_est[k] <= 2.0 * best + 1e-12 and be.eps_est[k] <= 2.0 * best + 1e-12


@given(seeds)
def test_traces_are_permutations_and_fs_monotone(seed):
    prob = random10(seed)
    for name in ("qr", "fs", "be", "fs2"):
        tr = run_heuristic(name, prob)
        assert sorted(tr.ordering) == list(range(10))
    fs = forward_selection(prob)
    assert np.all(np.diff(fs.eps_est) <= 1e-12)
    be = backward_elimination(prob)
    assert np.all(np.diff(be.eps_est) <= 1e-12)


@given(seeds)
def test_prefix_models_satisfy_identity(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(40, 8))
    phi = rng.normal(size=8)
    prob = RegressionProblem(W, W @ phi, np.ones(40), tuple("abcdefgh"), 2)
    for name in ("qr", "fs", "be", "fs2"):
        tr = run_heuristic(name, prob)
        for k in range(1, 9):
            fit = fit_subset(prob, tr.subset(k), phi)
            assert fit.identity_error <= 1e-6 * np.linalg.norm(fit.phi_R_prime)


@given(seeds)
def test_from_scratch_equivalence(seed):
    prob = random10(seed)
    for name in ("qr", "fs", "be"):
        a = run_heuristic(name, prob)
        b = run_heuristic(name, prob, from_scratch=True)
        assert a.ordering == b.ordering
        np.testing.assert_allclose(a.eps_est, b.eps_est, atol=1e-10)


def test_ties_go_to_lowest_index():
    w = np.random.default_rng(5).normal(size=20)
    prob = problem(np.column_stack([w, w, w]))
    assert forward_selection(prob).ordering[0] == 0
    assert backward_elimination(prob).extra["removal_order"][0] == 0


def test_be_overshoot_record():
    prob = random10(6)
    tr = backward_elimination(prob, tol=0.2)
    ov, adm = tr.extra["overshoot_k"], tr.extra["admissible_k"]
    assert adm == ov + 1
    assert tr.eps_est[ov] > 0.2 >= tr.eps_est[adm]


def test_trace_serialization():
    prob = random10(7)
    for name in ("fs", "fs2"):
        tr = run_heuristic(name, prob, validation=prob)
        back = SelectionTrace.from_dict(tr.to_dict())
        assert back.ordering == tr.ordering and back.labels == tr.labels
        assert all(back.subset(k) == tr.subset(k) for k in range(11))
        np.testing.assert_array_equal(back.eps_est, tr.eps_est)
    with pytest.raises(ValueError):
        SelectionTrace("x", (0, 0), ("a", "b"), 0.1, np.zeros(3))
    with pytest.raises(ValueError):
        run_heuristic("lasso", prob)


def test_puma_orderings(puma_run):
    fs = puma_run.traces["fs"]
    assert fs.ordered_labels()[0] == "m^3"
    full = np.flatnonzero(fs.eps_est < 1e-8)
    assert full[0] <= 36


def test_hexaglide_fs_full_precision(hexa_run):
    fs = hexa_run.traces["fs"]
    assert np.flatnonzero(fs.eps_est < 1e-8)[0] <= 62
