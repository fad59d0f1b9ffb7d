import numpy as np
import pytest
from hypothesis import given, strategies as st

from paramprune.dynamics import regressor
from paramprune.errors import InfeasibleExcitation
from paramprune.excitation import (Dataset, ExcitationConfig, FourierTrajectory, bound_violation,
                                   condition_number, eval_trajectory, load_trajectories, optimize_trajectory,
                                   random_feasible_start, sample_dataset, sample_times, save_trajectories,
                                   weighted_observation)
from paramprune.mbmodel import phi_vector

coef = st.floats(-1.0, 1.0, allow_nan=False)


def test_parameter_counts(puma, hexa):
    for model, expected in ((puma, 54), (hexa, 30)):
        cfg = ExcitationConfig.for_model(model)
        tr = FourierTrajectory(cfg.omega, np.array(cfg.q0), np.zeros((6, cfg.n_harmonics)),
                               np.zeros((6, cfg.n_harmonics)))
        assert tr.n_params == expected == len(tr.to_vector())


def test_zero_coefficients_constant():
    tr = FourierTrajectory(1.0, np.array([0.3, -0.2]), np.zeros((2, 3)), np.zeros((2, 3)))
    z, dz, ddz = eval_trajectory(tr, np.linspace(0, 7, 11))
    np.testing.assert_array_equal(z, np.tile([0.3, -0.2], (11, 1)))
    assert not dz.any() and not ddz.any()


def test_single_harmonic_acceleration():
    a = np.zeros((1, 2))
    a[0, 0] = 1.0
    w = 1.3
    tr = FourierTrajectory(w, np.array([0.5]), a, np.zeros((1, 2)))
    t = np.linspace(0, 5, 50)
    z, _, ddz = eval_trajectory(tr, t)
    np.testing.assert_allclose(ddz[:, 0], -w**2 * (z[:, 0] - 0.5), atol=1e-12)


@given(st.lists(coef, min_size=12, max_size=12), st.floats(0.0, 6.0))
def test_derivatives_finite_differences(c, t):
    c = np.array(c).reshape(2, 2, 3)
    tr = FourierTrajectory(0.9, np.array([0.1, 0.2]), c[0], c[1])
    h = 1e-6
    z = lambda s: eval_trajectory(tr, np.array([s]))  # noqa: E731
    zp, zm, z0 = z(t + h), z(t - h), z(t)
    assert np.abs((zp[0] - zm[0]) / (2 * h) - z0[1]).max() <= 1e-6
    assert np.abs((zp[1] - zm[1]) / (2 * h) - z0[2]).max() <= 1e-6


@given(st.lists(coef, min_size=12, max_size=12))
def test_periodic(c):
    c = np.array(c).reshape(2, 2, 3)
    tr = FourierTrajectory(2.0, np.zeros(2), c[0], c[1])
    z0 = eval_trajectory(tr, np.array([0.3]))
    z1 = eval_trajectory(tr, np.array([0.3 + np.pi]))
    for u, v in zip(z0, z1):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_trajectory_serialization(tmp_path):
    rng = np.random.default_rng(0)
    tr = FourierTrajectory(1.0, rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 12.5)
    save_trajectories([tr, tr], tmp_path / "t.json")
    back = load_trajectories(tmp_path / "t.json")
    assert len(back) == 2
    np.testing.assert_array_equal(back[0].to_vector(), tr.to_vector())
    assert back[0].kappa == 12.5
    x = tr.to_vector()
    np.testing.assert_array_equal(FourierTrajectory.from_vector(x, 3, 2, 1.0).to_vector(), x)


def test_condition_number_examples():
    assert condition_number(np.eye(4)) == pytest.approx(1.0)
    assert condition_number(np.diag([10.0, 1.0])) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        condition_number(np.zeros((3, 2)))


def test_condition_number_gram_oracle(puma):
    rng = np.random.default_rng(3)
    z = rng.uniform(-1.5, 1.5, (100, 6))
    W = weighted_observation(puma, z, rng.uniform(-1, 1, (100, 6)), rng.uniform(-1, 1, (100, 6)))[:100]
    lam = np.sort(np.linalg.eigvalsh(W.T @ W))[::-1]
    # nonzero Gram eigenvalues sit far above the round-off floor of the null space
    r = int(np.sum(lam > 1e-12 * lam[0]))
    kappa_gram = np.sqrt(lam[0] / lam[r - 1])
    assert condition_number(W) == pytest.approx(kappa_gram, rel=1e-6)


def test_config_validation(puma):
    with pytest.raises(ValueError):
        ExcitationConfig.for_model(puma, samples_per_traj=4)
    with pytest.raises(ValueError):
        ExcitationConfig.for_model(puma, z_min=(1.0,) * 6, z_max=(0.0,) * 6)
    cfg = ExcitationConfig.for_model(puma)
    assert ExcitationConfig.from_dict(cfg.to_dict()) == cfg


def test_bound_violation_zero_inside(puma):
    cfg = ExcitationConfig.for_model(puma)
    assert bound_violation(cfg, np.zeros((3, 6)), np.zeros((3, 6))) == 0.0
    assert bound_violation(cfg, np.full((1, 6), 2.0), np.zeros((1, 6))) > 0.0


def test_infeasible_start(hexa):
    # position range entirely outside the reachable workspace
    cfg = ExcitationConfig.for_model(hexa, z_min=(1.0, 5.0, 1.0, 5.0, 1.0, 5.0), z_max=(1.1, 5.1, 1.1, 5.1, 1.1, 5.1),
                                     q0=(1.05, 5.05, 1.05, 5.05, 1.05, 5.05), start_attempts=3)
    with pytest.raises(InfeasibleExcitation):
        random_feasible_start(hexa, cfg, np.random.default_rng(0))


def small_config(model):
    return ExcitationConfig.for_model(model, n_starts=2, maxfev=60, objective_samples=30)


def test_optimization_deterministic_and_bounded(puma):
    cfg = small_config(puma)
    t1 = optimize_trajectory(puma, cfg, 7)
    t2 = optimize_trajectory(puma, cfg, 7)
    np.testing.assert_array_equal(t1.to_vector(), t2.to_vector())
    assert t1.kappa == t2.kappa
    z, dz, _ = eval_trajectory(t1, sample_times(cfg))
    assert np.abs(z).max() <= np.pi / 2 and np.abs(dz).max() <= 1.45


def test_optimized_beats_random_baseline(puma_run):
    """Each optimized trajectory has lower kappa than the median random feasible one."""
    model = puma_run.model
    cfg = ExcitationConfig.for_model(model)
    rng = np.random.default_rng(2024)
    t = sample_times(cfg)
    kap = []
    for _ in range(50):
        tr = random_feasible_start(model, cfg, rng, t)
        kap.append(condition_number(weighted_observation(model, *eval_trajectory(tr, t))))
    median = np.median(kap)
    assert max(tr.kappa for tr in puma_run.data.est_trajectories) < median


def test_puma_dataset_shape_and_bounds(puma_run):
    est = puma_run.data.estimation
    assert len(est) == 1000 and puma_run.context.estimation.W.shape == (6000, 49)
    assert np.abs(est.z).max() <= np.pi / 2 and np.abs(est.dz).max() <= 1.45


def test_hexaglide_dataset_size(hexa_run):
    est = hexa_run.data.estimation
    assert len(est) == 10000
    assert est.z.min() >= 1.0 and est.z.max() <= 2.0 and np.abs(est.dz).max() <= 1.0


def test_rows_reproduce_forces(puma_run):
    est = puma_run.data.estimation
    K = regressor(puma_run.model, est.z, est.dz, est.ddz)
    tau = K @ phi_vector(puma_run.model).values
    assert np.abs(tau - est.tau).max() <= 1e-10 * np.abs(est.tau).max()


def test_dataset_csv_roundtrip(puma, tmp_path):
    cfg = ExcitationConfig.for_model(puma, samples_per_traj=20)
    rng = np.random.default_rng(1)
    trajs = [random_feasible_start(puma, cfg, rng) for _ in range(2)]
    ds = sample_dataset(puma, trajs, cfg)
    assert len(ds) == 40 and len(ds[3].z) == 6
    ds.write_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header.startswith("t,z1,z2") and header.endswith("tau6")
    back = Dataset.read_csv(tmp_path / "d.csv")
    for name in ("t", "z", "dz", "ddz", "tau"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert [s.tau[0] for s in back][:3] == [s.tau[0] for s in ds][:3]
