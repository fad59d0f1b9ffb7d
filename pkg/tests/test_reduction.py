import numpy as np
import pytest
from hypothesis import given, strategies as st

from paramprune.dynamics import mass_and_bias
from paramprune.errors import InternalConsistencyError, MassSingular
from paramprune.excitation import ExcitationConfig, optimize_trajectory, sample_dataset
from paramprune.mbmodel import phi_vector
from paramprune.reduction import (RegressionProblem, assemble, beta_coeffs, ddm_error, ddm_error_detail,
                                  exact_base_parameters, fit_subset, generalized_base, idm_error,
                                  idm_error_direct, load_problem, lstsq, nominal_acceleration, numeric_rank,
                                  reduced_forward_dynamics, reduced_model, save_problem)

seeds = st.integers(0, 2**31 - 1)


def synthetic(rows=20, cols=6, seed=0, n_dof=2, dependent=None):
    """Random problem; ``dependent`` maps a column to a combination of earlier columns."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(rows, cols))
    for c, combo in (dependent or {}).items():
        W[:, c] = sum(w * W[:, j] for j, w in combo.items())
    phi = rng.normal(size=cols)
    chi = W @ phi
    sig = rng.uniform(0.5, 2.0, size=n_dof)
    return RegressionProblem(W, chi, np.tile(sig, rows // n_dof), tuple(f"p{i}" for i in range(cols)), n_dof), phi


def test_assemble_puma_shape_and_consistency(puma_run):
    est = puma_run.context.estimation
    assert est.W.shape == (6000, 49)
    phi = phi_vector(puma_run.model).values
    assert np.abs(est.W @ phi - est.chi).max() <= 1e-10 * np.abs(est.chi).max()


def test_assemble_hexaglide_shape(hexa_run):
    assert hexa_run.context.estimation.W.shape == (60000, 70)


def test_assemble_dimension_mismatch(puma):
    from paramprune.excitation import Dataset

    ds = Dataset(np.zeros(2), *(np.zeros((2, 3)) for _ in range(4)))
    with pytest.raises(ValueError):
        assemble(puma, ds)


def test_ranks(puma_run, hexa_run):
    assert numeric_rank(puma_run.context.estimation) == 36
    assert numeric_rank(hexa_run.context.estimation) == 64


@given(seeds)
def test_duplicate_columns_keep_rank(seed):
    prob, _ = synthetic(30, 6, seed, dependent={5: {0: 1.0, 1: 2.0}})
    W2 = np.column_stack([prob.W, prob.W[:, :2]])
    assert numeric_rank(prob.W) == 5 == numeric_rank(W2)


def test_exact_base_puma(puma_run):
    prob = puma_run.context.estimation
    phi = phi_vector(puma_run.model).values
    base = exact_base_parameters(prob, phi)
    assert len(base.selected) == 36
    assert base.eps_tau_est < 1e-8
    sel, exc = list(base.selected), list(base.excluded)
    WE = prob.Ww[:, exc]
    assert np.abs(prob.Ww[:, sel] @ base.beta - WE).max() <= 1e-7 * np.abs(WE).max()
    # generalized base values on the exact base set
    np.testing.assert_allclose(generalized_base(prob, sel, phi), base.phi_R_prime, rtol=1e-9, atol=1e-9)


def test_beta_depends_on_geometry_only(puma_run):
    """Exact dependencies recomputed from another exciting data set agree."""
    model = puma_run.model
    cfg = ExcitationConfig.for_model(model, n_trajectories=3, n_starts=2, maxfev=100)
    other = assemble(model, sample_dataset(model, [optimize_trajectory(model, cfg, 555 + i) for i in range(3)], cfg))
    prob = puma_run.context.estimation
    base = exact_base_parameters(prob)
    beta2 = beta_coeffs(other, base.selected)
    np.testing.assert_allclose(beta2, base.beta, atol=1e-6)


def test_beta_examples():
    prob, _ = synthetic()
    assert beta_coeffs(prob, range(6)).shape == (6, 0)
    # orthogonal selected / excluded blocks
    Q = np.linalg.qr(np.random.default_rng(1).normal(size=(20, 4)))[0]
    orth = RegressionProblem(Q, Q @ np.ones(4), np.ones(20), ("a", "b", "c", "d"), 2)
    np.testing.assert_allclose(beta_coeffs(orth, [0, 1]), 0.0, atol=1e-14)


@given(seeds)
def test_beta_normal_equations(seed):
    prob, _ = synthetic(20, 6, seed)
    sel, exc = [0, 2, 3], [1, 4, 5]
    A = prob.Ww[:, sel]
    for j, c in enumerate(exc):
        ref = np.linalg.solve(A.T @ A, A.T @ prob.Ww[:, c])
        np.testing.assert_allclose(beta_coeffs(prob, sel)[:, j], ref, atol=1e-10)


def test_generalized_base_full_selection():
    prob, phi = synthetic(seed=4)
    np.testing.assert_allclose(generalized_base(prob, range(6), phi), phi, atol=1e-12)


@given(seeds, st.lists(st.integers(0, 5), min_size=1, max_size=5, unique=True))
def test_generalized_base_identity(seed, sel):
    """W_R^+ chi = phi_R + beta phi_E, with brute-force least squares on the left."""
    prob, phi = synthetic(20, 6, seed)
    sel = sorted(sel)
    exc = [i for i in range(6) if i not in sel]
    lhs = np.linalg.lstsq(prob.Ww[:, sel], prob.chiw, rcond=None)[0]
    rhs = phi[sel] + beta_coeffs(prob, sel) @ phi[exc]
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    np.testing.assert_allclose(generalized_base(prob, sel, phi), lhs, atol=1e-10)


def test_generalized_base_rank_deficient_selection():
    prob, phi = synthetic(30, 6, 2, dependent={3: {0: 1.0, 1: -1.0}})
    fit = fit_subset(prob, [0, 1, 3], phi)
    assert fit.rank_deficient
    assert fit.identity_error <= 1e-8 * np.linalg.norm(fit.phi_R_prime)


def test_generalized_base_consistency_error():
    prob, phi = synthetic(seed=3)
    with pytest.raises(InternalConsistencyError):
        generalized_base(prob, [0, 1], phi + 1.0)  # chi was not produced by these parameters


def test_idm_error_conventions():
    prob, _ = synthetic(seed=5)
    assert idm_error(prob, []) == 1.0
    assert idm_error(prob, range(6)) < 1e-12
    zero = RegressionProblem(prob.W, np.zeros_like(prob.chi), prob.sigma_half, prob.labels, 2)
    with pytest.raises(ValueError):
        idm_error(zero, [0])


@given(seeds, st.lists(st.integers(0, 7), min_size=1, max_size=7, unique=True))
def test_compressed_matches_direct(seed, sel):
    rng = np.random.default_rng(seed)
    prob = RegressionProblem(rng.normal(size=(40, 8)), rng.normal(size=40), np.ones(40),
                             tuple("abcdefgh"), 2)
    assert idm_error(prob, sel) == pytest.approx(idm_error_direct(prob, sel), rel=1e-9, abs=1e-14)


@given(seeds, st.lists(st.integers(0, 7), max_size=6, unique=True), st.integers(0, 7))
def test_adding_column_never_increases_error(seed, sel, extra):
    rng = np.random.default_rng(seed)
    prob = RegressionProblem(rng.normal(size=(40, 8)), rng.normal(size=40), np.ones(40), tuple("abcdefgh"), 2)
    e1 = idm_error(prob, sel)
    e2 = idm_error(prob, sorted(set(sel) | {extra}))
    assert e2 <= e1 + 1e-12


@given(seeds, st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    prob, _ = synthetic(20, 6, seed)
    scaled = RegressionProblem(c * prob.W, c * prob.chi, c * prob.sigma_half, prob.labels, 2)
    for sel in ([0], [1, 3], [0, 2, 4, 5]):
        assert idm_error(scaled, sel) == pytest.approx(idm_error(prob, sel), rel=1e-12, abs=1e-15)


def test_other_norms():
    prob, _ = synthetic(seed=6)
    for ord_ in (1, np.inf):
        e = idm_error(prob, [0, 1], norm=ord_)
        assert 0 < e <= 1.5


def test_lstsq_min_norm_fallback():
    A = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    res = lstsq(A, np.array([2.0, 2.0, 0.0]))
    assert res.rank_deficient and res.rank == 1
    np.testing.assert_allclose(res.x, [1.0, 1.0])


def test_problem_file_roundtrip(tmp_path):
    prob, _ = synthetic(seed=7)
    save_problem(prob, tmp_path / "p.bin")
    back = load_problem(tmp_path / "p.bin")
    np.testing.assert_array_equal(back.W, prob.W)
    np.testing.assert_array_equal(back.sigma_half, prob.sigma_half)
    assert back.labels == prob.labels and back.n_dof == 2


def test_ddm_error_exact_model(puma_run):
    ctx = puma_run.context
    phi = ctx.phi
    P = len(phi)
    assert ddm_error_detail(ctx.tensors_val, range(P), phi, ctx.nom_ddz).eps < 1e-10
    val = puma_run.data.validation
    assert ddm_error(puma_run.model, range(P), phi, val, ctx.nom_ddz) < 1e-10


def test_ddm_error_singular_flag(puma_run):
    ctx = puma_run.context
    d = ddm_error_detail(ctx.tensors_val, [0], ctx.phi[:1], ctx.nom_ddz)
    assert d.eps == np.inf and d.mass_singular and d.singular_index >= 0
    with pytest.raises(MassSingular):
        reduced_forward_dynamics(ctx.tensors_val, [0], ctx.phi[:1])


def test_ddm_tensors_match_mass_matrix(puma_run):
    ctx = puma_run.context
    val = puma_run.data.validation
    M, delta = mass_and_bias(puma_run.model, val.z[:5], val.dz[:5])
    np.testing.assert_allclose(ctx.tensors_val.Mt[:5] @ ctx.phi, M, atol=1e-12)
    np.testing.assert_allclose(ctx.tensors_val.Dt[:5] @ ctx.phi, delta, atol=1e-10)


def test_nominal_acceleration_rms(puma_run):
    est = puma_run.data.estimation
    np.testing.assert_allclose(nominal_acceleration(est), np.sqrt(np.mean(est.ddz**2, axis=0)))


def test_puma_fs18_reference_values(puma_run):
    """FS 18-parameter model within a factor of 3 of the reference 1.3% / 4.7%."""
    c = puma_run.curves["fs"]
    assert 0.013 / 3 <= c.eps_tau_est[17] <= 0.013 * 3
    assert 0.047 / 3 <= c.eps_ddz_val[17] <= 0.047 * 3


def test_estimation_validation_consistency(puma_run, hexa_run):
    for run in (puma_run, hexa_run):
        c = run.curves["fs"]
        ridge = int(np.flatnonzero(c.eps_tau_est < 1e-8)[0]) + 1
        ks = np.arange(1, ridge)
        ratio = c.eps_tau_val[ks - 1] / c.eps_tau_est[ks - 1]
        assert np.all((ratio <= 2.0) & (ratio >= 0.5))


def test_reduced_model_record(puma_run):
    ctx = puma_run.context
    sel = puma_run.traces["fs"].subset(18)
    rm = reduced_model(ctx.estimation, sel, ctx.phi, "fs", ctx.validation)
    assert len(rm.selected_labels) == 18 and len(rm.excluded) == 31
    assert rm.eps_tau_val == pytest.approx(puma_run.curves["fs"].eps_tau_val[17])
