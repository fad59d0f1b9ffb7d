import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from paramprune.mbmodel import (HexaglideGeometry, InertialParams, MdhJoint, build_system, load_model,
                                mdh_transform, model_from_dict, model_to_dict, phi_vector, save_model)

angles = st.floats(-10.0, 10.0, allow_nan=False)


def test_mdh_identity():
    R, p = mdh_transform(MdhJoint(0.0, 0.0, 0.0), 0.0)
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(p, np.zeros(3))


def test_mdh_puma_joint3(puma):
    j = puma.topology.joints[2]
    R, p = mdh_transform(j, 0.0)
    np.testing.assert_allclose(p, [0.4318, 0.0, -0.1491], atol=1e-15)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)


@given(angles)
def test_mdh_inverse_pair(theta):
    j = MdhJoint(0.0, 0.0, 0.0)
    R1, p1 = mdh_transform(j, theta)
    R2, p2 = mdh_transform(j, -theta)
    np.testing.assert_allclose(R1 @ R2, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(R1 @ p2 + p1, 0.0, atol=1e-12)


@given(st.floats(-1, 1), st.floats(-math.pi, math.pi), st.floats(-1, 1), angles)
def test_mdh_orthonormal(a, alpha, d, theta):
    R, _ = mdh_transform(MdhJoint(a, alpha, d), theta)
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-12


def test_puma_table_values(puma):
    assert puma.bodies[2].m == 8.767
    assert puma.topology.joints[3].a == -0.0203
    assert puma.nominal_force[0] == 350.0
    assert puma.nominal_force == (350.0, 300.0, 125.0, 8.0, 3.0, 1.0)
    assert puma.n_dof == puma.n_q == 6
    assert puma.n_slots == 60


def test_hexaglide_table_values(hexa):
    assert hexa.bodies[0].m == 5.804
    assert hexa.topology.geometry.L == 1.0
    assert hexa.topology.geometry.alpha_sym == pytest.approx(2 * math.pi / 3)
    np.testing.assert_allclose(hexa.nominal_force, 1068.1415022205297, rtol=1e-12)
    assert (hexa.n_dof, hexa.n_q, hexa.n_constraints) == (6, 24, 18)
    assert len(hexa.bodies) == 7


def test_hexaglide_inertia_order(hexa):
    # head inertias: Ixx 0.0283, Ixy 0.001, Iyy 0.028, Izz 0.038
    head = hexa.bodies[6]
    assert head.I == (0.0283, 0.001, 0.0, 0.028, 0.0, 0.038)
    assert hexa.bodies[0].I == (1.044, 0.0, 0.014, 1.044, 0.014, 0.002)


def test_geometry_validation():
    with pytest.raises(ValueError):
        HexaglideGeometry(L=-1.0, e=0.1, R_frame=0.5, r_head=0.1)
    with pytest.raises(ValueError):
        InertialParams.from_array([1.0, 2.0])


def test_phi_vector_counts(puma, hexa):
    pv = phi_vector(puma)
    assert len(pv) == 49
    removed = sorted(set(puma.slot_labels) - set(pv.labels))
    assert removed == sorted([f"{s}^1" for s in ("m", "dx", "dy", "dz", "Ixx", "Ixy", "Ixz", "Iyy", "Iyz")]
                             + ["m^2", "dz^2"])
    # fixed-base body 1 keeps only its rotation inertia about the joint axis
    body1 = [lab for lab in pv.labels if lab.endswith("^1")]
    assert body1 == ["Izz^1"]
    assert len(phi_vector(hexa)) == 70


def test_phi_vector_order(puma):
    labels = puma.slot_labels
    assert labels[:10] == ("m^1", "dx^1", "dy^1", "dz^1", "Ixx^1", "Ixy^1", "Ixz^1", "Iyy^1", "Iyz^1", "Izz^1")
    np.testing.assert_array_equal(puma.phi_full[10:20], puma.bodies[1].as_array())


@pytest.mark.parametrize("system", ["puma560", "hexaglide"])
def test_model_json_roundtrip(system, tmp_path):
    m = build_system(system)
    save_model(m, tmp_path / "m.json")
    m2 = load_model(tmp_path / "m.json")
    assert m2 == m
    assert model_from_dict(model_to_dict(m)) == m


def test_unknown_system():
    with pytest.raises(ValueError):
        build_system("scara")
