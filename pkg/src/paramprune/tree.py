"""Kinematic trees of one-dof joints and recursive Newton-Euler dynamics.

Every joint applies a constant transform (rotation ``rot``, translation ``pos``)
relative to its parent frame, then a motion about one principal axis of the
resulting frame: a rotation for revolute joints, a translation for prismatic ones.
Bodies are attached to joint frames; joints without a body are massless.

All routines accept coordinates with arbitrary leading batch axes, and also run
on object arrays holding symbolic scalars (see :mod:`paramprune.symdag`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import UnsupportedTopology
from .mbmodel import HexaglidePUS, MultibodyModel, OpenChain, mdh_fixed_part
from .spatial import axis_rotation, cross, inertia_matrix, mat_t_vec, matvec, rotz, skew


@dataclass
class TreeJoint:
    parent: int
    rot: np.ndarray
    pos: np.ndarray
    kind: str  # "R" or "P"
    axis: int
    coord: int
    body: int = -1  # index of the attached parameter body, -1 if massless
    offset: float = 0.0


@dataclass
class KinematicTree:
    joints: list
    n_q: int
    n_bodies: int

    def __post_init__(self):
        self.children = [[] for _ in self.joints]
        for i, j in enumerate(self.joints):
            if j.parent >= i:
                raise ValueError("joints must be listed parents-first")
            if j.parent >= 0:
                self.children[j.parent].append(i)
        self.body_joint = {j.body: i for i, j in enumerate(self.joints) if j.body >= 0}
        # joints whose subtree carries mass
        loaded = [False] * len(self.joints)
        for i in reversed(range(len(self.joints))):
            loaded[i] = self.joints[i].body >= 0 or any(loaded[c] for c in self.children[i])
        self.loaded = loaded

    def ancestors(self, i):
        """Joint ``i`` followed by its ancestors up to the root."""
        out = []
        while i >= 0:
            out.append(i)
            i = self.joints[i].parent
        return out


def hexaglide_layout(geom):
    """Per-leg angle, U-joint ground point and S-joint head point."""
    legs = []
    for k in range(3):
        beta = geom.alpha_sym * k
        radial = np.array([math.cos(beta), math.sin(beta), 0.0])
        tangent = np.array([-math.sin(beta), math.cos(beta), 0.0])
        for sign in (-1.0, 1.0):
            u = geom.R_frame * radial + sign * 0.5 * geom.e * tangent
            s = geom.r_head * radial + sign * 0.5 * geom.e * tangent
            legs.append((beta, u, s))
    return legs


@lru_cache(maxsize=None)
def kinematic_tree(model: MultibodyModel) -> KinematicTree:
    topo = model.topology
    if isinstance(topo, OpenChain):
        joints = []
        for i, mj in enumerate(topo.joints):
            R0, p0 = mdh_fixed_part(mj)
            joints.append(TreeJoint(i - 1, R0, p0, "R", 2, mj.coordinate_index, i, mj.theta_offset))
        return KinematicTree(joints, len(joints), len(model.bodies))
    if isinstance(topo, HexaglidePUS):
        eye = np.eye(3)
        zero = np.zeros(3)
        joints = []
        # q = [U angles (12), head x y z psi theta phi (6), carriage heights (6)]
        for i, (beta, u, _) in enumerate(hexaglide_layout(topo.geometry)):
            joints.append(TreeJoint(-1, rotz(beta), u.copy(), "P", 2, 18 + i))
            c = len(joints) - 1
            joints.append(TreeJoint(c, eye, zero, "R", 0, 2 * i))
            joints.append(TreeJoint(c + 1, eye, zero, "R", 1, 2 * i + 1, body=i))
        head_axes = [("P", 0), ("P", 1), ("P", 2), ("R", 2), ("R", 1), ("R", 0)]
        for k, (kind, axis) in enumerate(head_axes):
            parent = -1 if k == 0 else len(joints) - 1
            joints.append(TreeJoint(parent, eye, zero, kind, axis, 12 + k, body=6 if k == 5 else -1))
        return KinematicTree(joints, 24, 7)
    raise UnsupportedTopology(f"unsupported topology {type(topo).__name__}")


@dataclass
class FrameState:
    R: np.ndarray  # child rotation in parent coordinates
    p: np.ndarray  # child origin in parent coordinates
    w: np.ndarray = None  # angular velocity, child frame
    dw: np.ndarray = None  # angular acceleration, child frame
    a: np.ndarray = None  # origin acceleration (minus gravity), child frame
    Rw: np.ndarray = None  # world orientation
    pw: np.ndarray = None  # world origin


def _unit(axis):
    e = np.zeros(3)
    e[axis] = 1.0
    return e


def joint_transform(joint: TreeJoint, qj):
    qj = np.asarray(qj)
    if joint.kind == "R":
        ang = qj + joint.offset if joint.offset else qj
        Rm = axis_rotation(joint.axis, np.cos(ang), np.sin(ang))
        return joint.rot @ Rm, np.broadcast_to(joint.pos, qj.shape + (3,))
    R = np.broadcast_to(joint.rot, qj.shape + (3, 3))
    p = joint.pos + joint.rot[:, joint.axis] * qj[..., None]
    return R, p


def forward_kinematics(tree: KinematicTree, q, dq=None, ddq=None, gravity=None, world=False):
    """Outward sweep.

    With ``dq``/``ddq`` given, each frame gets body-frame angular velocity and
    acceleration and the origin acceleration with ``-gravity`` injected at the
    base, so that gravity loads appear as inertial forces.
    """
    q = np.asarray(q)
    batch = q.shape[:-1]
    states = []
    for j in tree.joints:
        R, p = joint_transform(j, q[..., j.coord])
        st = FrameState(R, p)
        if dq is not None:
            qd = dq[..., j.coord]
            qdd = ddq[..., j.coord]
            e = _unit(j.axis)
            if j.parent < 0:
                w_p = dw_p = None
                g = np.zeros(3) if gravity is None else np.asarray(gravity, dtype=float)
                a_in = np.broadcast_to(mat_t_vec(R, -g), batch + (3,))
            else:
                ps = states[j.parent]
                w_p, dw_p = ps.w, ps.dw
                a_par = ps.a
                if w_p is not None:
                    a_par = a_par + cross(dw_p, p) + cross(w_p, cross(w_p, p))
                a_in = mat_t_vec(R, a_par)
            w_in = None if w_p is None else mat_t_vec(R, w_p)
            dw_in = None if dw_p is None else mat_t_vec(R, dw_p)
            if j.kind == "R":
                w = e * qd[..., None] if w_in is None else w_in + e * qd[..., None]
                dw = e * qdd[..., None]
                if w_in is not None:
                    dw = dw + cross(w_in, e * qd[..., None])
                if dw_in is not None:
                    dw = dw_in + dw
                a = a_in
            else:
                w, dw = w_in, dw_in
                a = a_in + e * qdd[..., None]
                if w_in is not None:
                    a = a + 2.0 * cross(w_in, e * qd[..., None])
            st.w, st.dw, st.a = w, dw, a
        if world:
            if j.parent < 0:
                st.Rw, st.pw = R, p
            else:
                ps = states[j.parent]
                st.Rw = ps.Rw @ R
                st.pw = ps.pw + matvec(ps.Rw, p)
        states.append(st)
    return states


def body_wrench(st: FrameState, phi_b):
    """Newton-Euler wrench (force, moment about the frame origin) in the body frame."""
    m = phi_b[..., 0]
    d = phi_b[..., 1:4]
    I = inertia_matrix(phi_b[..., 4:10])
    w, dw, a = st.w, st.dw, st.a
    f = m[..., None] * a
    n = cross(d, a)
    if dw is not None:
        f = f + cross(dw, d)
        n = n + matvec(I, dw)
    if w is not None:
        f = f + cross(w, cross(w, d))
        n = n + cross(w, matvec(I, w))
    return f, n


def rnea(tree: KinematicTree, q, dq, ddq, phi, gravity):
    """Generalized forces ``d_q = M(q) ddq + delta(q, dq)`` for slot vector ``phi``.

    ``phi`` has 10 entries per body in slot order.
    """
    states = forward_kinematics(tree, q, dq, ddq, gravity)
    phi = np.asarray(phi)
    nj = len(tree.joints)
    F = [None] * nj
    N = [None] * nj
    tau = [None] * tree.n_q
    for i in reversed(range(nj)):
        j = tree.joints[i]
        st = states[i]
        f = n = None
        if j.body >= 0:
            f, n = body_wrench(st, phi[10 * j.body:10 * j.body + 10])
        for c in tree.children[i]:
            if F[c] is None:
                continue
            cs = states[c]
            Fc = matvec(cs.R, F[c])
            Nc = matvec(cs.R, N[c]) + cross(cs.p, Fc)
            f = Fc if f is None else f + Fc
            n = Nc if n is None else n + Nc
        F[i], N[i] = f, n
        if f is None:
            tau[j.coord] = np.zeros_like(np.asarray(q)[..., j.coord], dtype=float) if np.asarray(q).dtype != object else np.zeros_like(np.asarray(q)[..., j.coord])
        else:
            tau[j.coord] = n[..., j.axis] if j.kind == "R" else f[..., j.axis]
    return np.stack(tau, axis=-1)


def body_regressor(st: FrameState):
    """(..., 6, 10) matrix mapping the body parameters to its wrench."""
    a = st.a
    batch = a.shape[:-1]
    B = np.zeros(batch + (3, 3))
    L = np.zeros(batch + (3, 6))
    if st.dw is not None:
        B = B + skew(st.dw)
        L = L + _inertia_lift(st.dw)
    if st.w is not None:
        Sw = skew(st.w)
        B = B + Sw @ Sw
        L = L + Sw @ _inertia_lift(st.w)
    A = np.zeros(batch + (6, 10))
    A[..., 0:3, 0] = a
    A[..., 0:3, 1:4] = B
    A[..., 3:6, 1:4] = -skew(a)
    A[..., 3:6, 4:10] = L
    return A


def _inertia_lift(v):
    """L(v) with I v = L(v) (Ixx, Ixy, Ixz, Iyy, Iyz, Izz)."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    rows = [[x, y, z, o, o, o], [o, x, o, y, z, o], [o, o, x, o, y, z]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rnea_regressor(tree: KinematicTree, q, dq, ddq, gravity):
    """(..., n_q, 10 * n_bodies) regressor of :func:`rnea` (numeric only)."""
    q = np.asarray(q, dtype=float)
    states = forward_kinematics(tree, q, dq, ddq, gravity)
    batch = q.shape[:-1]
    K = np.zeros(batch + (tree.n_q, 10 * tree.n_bodies))
    for b, jb in tree.body_joint.items():
        Y = body_regressor(states[jb])
        cols = slice(10 * b, 10 * b + 10)
        i = jb
        while True:
            j = tree.joints[i]
            row = j.axis + 3 if j.kind == "R" else j.axis
            K[..., j.coord, cols] = Y[..., row, :]
            if j.parent < 0:
                break
            st = states[i]
            Ft = st.R @ Y[..., 0:3, :]
            Nt = st.R @ Y[..., 3:6, :] + skew(st.p) @ Ft
            Y = np.concatenate([Ft, Nt], axis=-2)
            i = j.parent
    return K


def point_jacobian(tree: KinematicTree, states, joint_index, r_local):
    """World position and (..., 3, n_q) Jacobian of a point fixed in a joint frame.

    ``states`` must come from :func:`forward_kinematics` with ``world=True``.
    """
    st = states[joint_index]
    pt = st.pw + matvec(st.Rw, r_local)
    batch = pt.shape[:-1]
    J = np.zeros(batch + (3, tree.n_q))
    for i in tree.ancestors(joint_index):
        j = tree.joints[i]
        axis_w = states[i].Rw[..., :, j.axis]
        if j.kind == "R":
            J[..., :, j.coord] = cross(axis_w, pt - states[i].pw)
        else:
            J[..., :, j.coord] = axis_w
    return pt, J


def point_bias_acceleration(states, joint_index, r_local):
    """World acceleration of a body point due to velocities alone.

    ``states`` must come from a sweep with ``ddq = 0``, zero gravity and ``world=True``.
    """
    st = states[joint_index]
    acc = st.a
    if st.dw is not None:
        acc = acc + cross(st.dw, np.broadcast_to(r_local, acc.shape))
    if st.w is not None:
        acc = acc + cross(st.w, cross(st.w, np.broadcast_to(r_local, acc.shape)))
    return matvec(st.Rw, acc)
