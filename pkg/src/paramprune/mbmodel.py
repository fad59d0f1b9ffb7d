"""Multibody model data and the two reference machines (PUMA 560, 6-PUS Hexaglide).

Each body carries ten dynamic parameters in the fixed order

    m, dx, dy, dz, Ixx, Ixy, Ixz, Iyy, Iyz, Izz

where ``d`` is the first moment of mass and ``I`` the inertia tensor about the
body reference-frame origin. The equations of motion are linear in this set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .spatial import rotx

PARAM_SYMBOLS = ("m", "dx", "dy", "dz", "Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz")
STANDARD_GRAVITY = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class InertialParams:
    m: float
    d: tuple = (0.0, 0.0, 0.0)
    I: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)  # xx, xy, xz, yy, yz, zz

    def __post_init__(self):
        if len(self.d) != 3 or len(self.I) != 6:
            raise ValueError("InertialParams needs 3 first-moment and 6 inertia entries")

    def as_array(self) -> np.ndarray:
        return np.array([self.m, *self.d, *self.I], dtype=float)

    @classmethod
    def from_array(cls, values) -> "InertialParams":
        v = [float(x) for x in values]
        if len(v) != 10:
            raise ValueError(f"expected 10 values, got {len(v)}")
        return cls(v[0], tuple(v[1:4]), tuple(v[4:10]))


@dataclass(frozen=True)
class MdhJoint:
    """Modified Denavit-Hartenberg joint (Khalil convention)."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    coordinate_index: int = 0


@dataclass(frozen=True)
class HexaglideGeometry:
    L: float
    e: float
    R_frame: float
    r_head: float
    alpha_sym: float = 2.0 * math.pi / 3.0

    def __post_init__(self):
        for name in ("L", "e", "R_frame", "r_head"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"Hexaglide length {name} must be strictly positive")
        if abs(self.alpha_sym - 2.0 * math.pi / 3.0) > 1e-12:
            raise ValueError("Hexaglide symmetry angle must be 2*pi/3")

    @property
    def home_drop(self) -> float:
        """Vertical distance between carriage U joints and head S joints at home."""
        return math.sqrt(self.L**2 - (self.R_frame - self.r_head) ** 2)


@dataclass(frozen=True)
class OpenChain:
    joints: tuple


@dataclass(frozen=True)
class HexaglidePUS:
    geometry: HexaglideGeometry


Topology = Union[OpenChain, HexaglidePUS]


@dataclass(frozen=True)
class MultibodyModel:
    name: str
    topology: Topology
    bodies: tuple
    body_names: tuple
    gravity: tuple = STANDARD_GRAVITY
    nominal_force: tuple = ()

    @property
    def is_closed_loop(self) -> bool:
        return isinstance(self.topology, HexaglidePUS)

    @property
    def n_dof(self) -> int:
        return 6 if self.is_closed_loop else len(self.topology.joints)

    @property
    def n_q(self) -> int:
        return 24 if self.is_closed_loop else len(self.topology.joints)

    @property
    def n_constraints(self) -> int:
        return self.n_q - self.n_dof

    @property
    def n_slots(self) -> int:
        return 10 * len(self.bodies)

    @property
    def phi_full(self) -> np.ndarray:
        return np.concatenate([b.as_array() for b in self.bodies])

    @property
    def slot_labels(self) -> tuple:
        return tuple(f"{s}^{name}" for name in self.body_names for s in PARAM_SYMBOLS)

    def with_gravity(self, gravity) -> "MultibodyModel":
        return MultibodyModel(self.name, self.topology, self.bodies, self.body_names,
                              tuple(float(g) for g in gravity), self.nominal_force)

    def with_bodies(self, bodies) -> "MultibodyModel":
        return MultibodyModel(self.name, self.topology, tuple(bodies), self.body_names,
                              self.gravity, self.nominal_force)


@dataclass(frozen=True)
class ParamVector:
    """Label-filtered parameter vector; ``indices`` point into the full slot vector."""

    values: np.ndarray = field(compare=False)
    labels: tuple
    indices: tuple

    def __len__(self):
        return len(self.labels)

    def expand(self, n_slots: int, values=None) -> np.ndarray:
        out = np.zeros(n_slots)
        out[list(self.indices)] = self.values if values is None else values
        return out


def mdh_transform(joint: MdhJoint, theta):
    """Frame-to-frame transform Rx(alpha) Tx(a) Rz(theta + offset) Tz(d).

    Returns ``(R, p)``: the child rotation and origin expressed in the parent frame.
    """
    th = theta + joint.theta_offset
    ca, sa = math.cos(joint.alpha), math.sin(joint.alpha)
    ct, st = math.cos(th), math.sin(th)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    Rz = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    R = Rx @ Rz
    p = np.array([joint.a, 0.0, 0.0]) + Rx @ np.array([0.0, 0.0, joint.d])
    return R, p


def mdh_fixed_part(joint: MdhJoint):
    """Constant (rotation, translation) preceding the joint rotation about local z."""
    Rx = rotx(joint.alpha)
    return Rx, np.array([joint.a, 0.0, 0.0]) + Rx @ np.array([0.0, 0.0, joint.d])


PUMA_MDH = (
    # a, alpha, d
    (0.0, 0.0, 0.0),
    (0.0, -math.pi / 2, 0.0),
    (0.4318, 0.0, -0.1491),
    (-0.0203, math.pi / 2, -0.4318),
    (0.0, -math.pi / 2, 0.0),
    (0.0, math.pi / 2, 0.0),
)

PUMA_DYN = (
    # m, dx, dy, dz, Ixx, Ixy, Ixz, Iyy, Iyz, Izz
    (10.52, 0.0, -0.568, 0.0, 1.643, 0.0, 0.0, 0.509, 0.0, 1.643),
    (15.78, 2.206, 0.2, 2.353, 0.841, 0.2, -0.329, 8.738, 0.4, 8.576),
    (8.767, -0.003, -1.727, 0.0, 3.717, -0.001, 0.002, 0.301, 0.002, 3.717),
    (1.052, 0.03, 0.06, -0.060, 0.184, 0.0, 0.0, 0.184, 0.0, 0.127),
    (1.052, 0.004, -0.007, 0.005, 0.074, 0.0, 0.0, 0.074, 0.0, 0.127),
    (0.351, 0.01, 0.02, 0.013, 0.008, 0.0, 0.002, 0.008, 0.0, 0.014),
)

PUMA_NOMINAL_TORQUE = (350.0, 300.0, 125.0, 8.0, 3.0, 1.0)

# The source Hexaglide table lists inertias as Ixx, Ixy, Iyy, Ixz, Izz, Iyz;
# reordered here to the package order.
HEXAGLIDE_HEAD = (6.697, 0.07, 0.07, -0.238, 0.0283, 0.001, 0.000, 0.028, 0.000, 0.038)
HEXAGLIDE_BAR = (5.804, 0.03, 0.03, -1.469, 1.044, 0.000, 0.014, 1.044, 0.014, 0.002)
HEXAGLIDE_NOMINAL_FORCE = 1.7 * 2.0 * math.pi / 1e-2


def build_puma560() -> MultibodyModel:
    joints = tuple(MdhJoint(a, alpha, d, 0.0, i) for i, (a, alpha, d) in enumerate(PUMA_MDH))
    bodies = tuple(InertialParams.from_array(row) for row in PUMA_DYN)
    return MultibodyModel(
        name="puma560",
        topology=OpenChain(joints),
        bodies=bodies,
        body_names=tuple(str(i + 1) for i in range(6)),
        gravity=STANDARD_GRAVITY,
        nominal_force=PUMA_NOMINAL_TORQUE,
    )


def build_hexaglide() -> MultibodyModel:
    geom = HexaglideGeometry(L=1.0, e=0.1365, R_frame=0.4840, r_head=0.0730)
    bar = InertialParams.from_array(HEXAGLIDE_BAR)
    head = InertialParams.from_array(HEXAGLIDE_HEAD)
    return MultibodyModel(
        name="hexaglide",
        topology=HexaglidePUS(geom),
        bodies=(bar,) * 6 + (head,),
        body_names=("1", "2", "3", "4", "5", "6", "P"),
        gravity=STANDARD_GRAVITY,
        nominal_force=(HEXAGLIDE_NOMINAL_FORCE,) * 6,
    )


def build_system(system: str) -> MultibodyModel:
    builders = {"puma560": build_puma560, "hexaglide": build_hexaglide}
    try:
        return builders[system]()
    except KeyError:
        raise ValueError(f"unknown system {system!r}; choose from {sorted(builders)}") from None


def phi_vector(model: MultibodyModel) -> ParamVector:
    """Flat parameter vector with the no-dynamic-role slots removed."""
    from .dynamics import active_parameter_indices

    idx = active_parameter_indices(model)
    labels = model.slot_labels
    return ParamVector(model.phi_full[list(idx)], tuple(labels[i] for i in idx), idx)


# --- serialization -------------------------------------------------------------------

def model_to_dict(model: MultibodyModel) -> dict:
    if model.is_closed_loop:
        g = model.topology.geometry
        topo = {"type": "hexaglide_pus", "geometry": {
            "L": g.L, "e": g.e, "R_frame": g.R_frame, "r_head": g.r_head, "alpha_sym": g.alpha_sym}}
    else:
        topo = {"type": "open_chain", "joints": [
            {"a": j.a, "alpha": j.alpha, "d": j.d, "theta_offset": j.theta_offset,
             "coordinate_index": j.coordinate_index} for j in model.topology.joints]}
    return {
        "name": model.name,
        "topology": topo,
        "bodies": [{"name": n, "m": b.m, "d": list(b.d), "I": list(b.I)}
                   for n, b in zip(model.body_names, model.bodies)],
        "gravity": list(model.gravity),
        "nominal_force": list(model.nominal_force),
    }


def model_from_dict(data: dict) -> MultibodyModel:
    topo = data["topology"]
    if topo["type"] == "hexaglide_pus":
        topology = HexaglidePUS(HexaglideGeometry(**topo["geometry"]))
    elif topo["type"] == "open_chain":
        topology = OpenChain(tuple(MdhJoint(**j) for j in topo["joints"]))
    else:
        raise ValueError(f"unknown topology type {topo['type']!r}")
    bodies = tuple(InertialParams(float(b["m"]), tuple(map(float, b["d"])), tuple(map(float, b["I"])))
                   for b in data["bodies"])
    names = tuple(str(b.get("name", i + 1)) for i, b in enumerate(data["bodies"]))
    return MultibodyModel(
        name=data.get("name", "model"),
        topology=topology,
        bodies=bodies,
        body_names=names,
        gravity=tuple(map(float, data.get("gravity", STANDARD_GRAVITY))),
        nominal_force=tuple(map(float, data["nominal_force"])),
    )


def save_model(model: MultibodyModel, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path) -> MultibodyModel:
    return model_from_dict(json.loads(Path(path).read_text()))
