"""Inverse/direct dynamics, the parameter-linear regressor and the closed-loop
projection onto independent coordinates.

Every function is batched: ``z``, ``dz`` and ``ddz`` may carry any number of
leading sample axes. For open chains the independent coordinates are the joint
angles. For the Hexaglide the full coordinates are ``q = [d, z]`` with 18
dependent coordinates ``d`` (12 universal-joint angles then the head pose
x, y, z, psi, theta, phi) and the 6 carriage heights ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationSingular, MassSingular, OutsideWorkspace
from .mbmodel import MultibodyModel, ParamVector
from .spatial import axis_rotation
from .tree import (
    forward_kinematics,
    hexaglide_layout,
    kinematic_tree,
    point_bias_acceleration,
    point_jacobian,
    rnea,
    rnea_regressor,
)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
WORKSPACE_COND_LIMIT = 1e8
SINGULAR_COND_LIMIT = 1e12
MASS_COND_LIMIT = 1e12


@dataclass
class ExtendedStateSample:
    z: np.ndarray
    dz: np.ndarray
    ddz: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        n = len(self.z)
        for name in ("dz", "ddz", "tau"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from z")
        if not all(np.all(np.isfinite(getattr(self, k))) for k in ("z", "dz", "ddz", "tau")):
            raise ValueError("sample contains non-finite entries")


@dataclass
class ConstrainedState:
    """Solved closed-loop state. Arrays may carry leading batch axes."""

    q: np.ndarray
    dq: np.ndarray
    phi_q: np.ndarray
    Rmat: np.ndarray
    gamma_term: np.ndarray
    cond: np.ndarray

    @property
    def phi_d(self):
        return self.phi_q[..., :18]

    @property
    def phi_z(self):
        return self.phi_q[..., 18:]

    @property
    def accel_offset(self):
        """Full-coordinate acceleration at zero independent acceleration."""
        c = np.linalg.solve(self.phi_d, self.gamma_term[..., None])[..., 0]
        return np.concatenate([c, np.zeros(c.shape[:-1] + (6,))], axis=-1)


@dataclass
class ProjectedDynamics:
    d_z: np.ndarray
    M_zz: np.ndarray
    delta_z: np.ndarray
    K_zphi: np.ndarray
    tau_z: np.ndarray


# --- parameters ------------------------------------------------------------------------

def _slot_phi(model: MultibodyModel, phi) -> np.ndarray:
    """Full 10-per-body slot vector from a ParamVector, a filtered or a full array."""
    if phi is None:
        return model.phi_full
    if isinstance(phi, ParamVector):
        return phi.expand(model.n_slots)
    phi = np.asarray(phi)
    if phi.shape[-1] == model.n_slots:
        return phi
    idx = active_parameter_indices(model)
    if phi.shape[-1] != len(idx):
        raise ValueError(f"parameter vector of length {phi.shape[-1]} fits neither "
                         f"{len(idx)} active nor {model.n_slots} slots")
    out = np.zeros(phi.shape[:-1] + (model.n_slots,), dtype=phi.dtype)
    out[..., list(idx)] = phi
    return out


def probe_states(model: MultibodyModel, n: int, seed: int = 0):
    """Random (z, dz, ddz) inside a conservative part of the workspace."""
    rng = np.random.default_rng(seed)
    k = model.n_dof
    if model.is_closed_loop:
        # height differences within a carriage pair tilt the head strongly
        z = 1.5 + rng.uniform(-0.4, 0.4, (n, 1)) + rng.uniform(-0.03, 0.03, (n, k))
        dz = rng.uniform(-1.0, 1.0, (n, k))
    else:
        z = rng.uniform(-np.pi, np.pi, (n, k))
        dz = rng.uniform(-2.0, 2.0, (n, k))
    ddz = rng.uniform(-2.0, 2.0, (n, k))
    return z, dz, ddz


@lru_cache(maxsize=None)
def active_parameter_indices(model: MultibodyModel, n_probe: int = 100) -> tuple:
    """Slots whose regressor column is not identically zero over random probe states."""
    z, dz, ddz = probe_states(model, n_probe, seed=12345)
    W = regressor(model, z, dz, ddz, active_only=False)
    colmax = np.abs(W).max(axis=(0, 1))
    return tuple(int(i) for i in np.flatnonzero(colmax >= 1e-12 * colmax.max()))


# --- closed loop ---------------------------------------------------------------------------

def _hexa_points(model):
    geom = model.topology.geometry
    layout = hexaglide_layout(geom)
    bar_end = np.array([0.0, 0.0, -geom.L])
    return [(3 * i + 2, bar_end, 23, s) for i, (_, _, s) in enumerate(layout)]


def home_guess(model: MultibodyModel, z) -> np.ndarray:
    """Dependent coordinates of the symmetric pose at the mean carriage height."""
    geom = model.topology.geometry
    z = np.asarray(z, dtype=float)
    d = np.zeros(z.shape[:-1] + (18,))
    d[..., 1:12:2] = np.arcsin((geom.R_frame - geom.r_head) / geom.L)
    d[..., 14] = z.mean(axis=-1) - geom.home_drop
    return d


@lru_cache(maxsize=None)
def _hexa_constants(model):
    layout = hexaglide_layout(model.topology.geometry)
    beta = np.array([b for b, _, _ in layout])
    u = np.array([p for _, p, _ in layout])
    s = np.array([p for _, _, p in layout])
    return np.cos(beta), np.sin(beta), u, s, model.topology.geometry.L


def constraint_closed_form(model: MultibodyModel, q, jacobian=True):
    """Vectorized closed-form version of :func:`constraint` for the Hexaglide."""
    cb, sb, u, s, L = _hexa_constants(model)
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    t1, t2 = q[..., 0:12:2], q[..., 1:12:2]
    pos, (psi, th, ph) = q[..., 12:15], (q[..., 15], q[..., 16], q[..., 17])
    zc = q[..., 18:24]
    c1, s1, c2, s2 = np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)
    # Rx(t1) Ry(t2) (0, 0, -L) in the carriage frame
    v = np.stack([-L * s2, L * s1 * c2, -L * c1 * c2], axis=-1)
    dv1 = np.stack([np.zeros_like(s2), L * c1 * c2, L * s1 * c2], axis=-1)
    dv2 = np.stack([-L * c2, -L * s1 * s2, L * c1 * s2], axis=-1)

    def rotz_leg(w):
        return np.stack([cb * w[..., 0] - sb * w[..., 1], sb * w[..., 0] + cb * w[..., 1], w[..., 2]], axis=-1)

    bar = u + rotz_leg(v)
    bar[..., 2] += zc
    cps, sps, cth, sth, cph, sph = np.cos(psi), np.sin(psi), np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
    Rz = _rot_stack(2, cps, sps)
    Ry = _rot_stack(1, cth, sth)
    Rx = _rot_stack(0, cph, sph)
    Rh = Rz @ Ry @ Rx
    head = pos[..., None, :] + np.einsum("...ij,kj->...ki", Rh, s)
    phi = (bar - head).reshape(batch + (18,))
    if not jacobian:
        return phi
    J = np.zeros(batch + (6, 3, 24))
    g1, g2 = rotz_leg(dv1), rotz_leg(dv2)
    for i in range(6):
        J[..., i, :, 2 * i] = g1[..., i, :]
        J[..., i, :, 2 * i + 1] = g2[..., i, :]
        J[..., i, 2, 18 + i] = 1.0
    J[..., :, :, 12:15] = -np.eye(3)
    dRz, dRy, dRx = _drot_stack(2, cps, sps), _drot_stack(1, cth, sth), _drot_stack(0, cph, sph)
    for col, dR in ((15, dRz @ Ry @ Rx), (16, Rz @ dRy @ Rx), (17, Rz @ Ry @ dRx)):
        J[..., :, :, col] = -np.einsum("...ij,kj->...ki", dR, s)
    return phi, J.reshape(batch + (18, 24))


def _rot_stack(axis, c, s):
    return axis_rotation(axis, c, s)


def _drot_stack(axis, c, s):
    """Derivative of a principal rotation with respect to its angle."""
    out = axis_rotation(axis, -s, c)
    out[..., axis, axis] = 0.0
    return out


def constraint(model: MultibodyModel, q, jacobian=True):
    """Loop-closure residual (..., 18): bar S end minus head S point, and its Jacobian."""
    return constraint_closed_form(model, q, jacobian)


def constraint_tree(model: MultibodyModel, q, jacobian=True):
    """Generic tree-walk evaluation of :func:`constraint` (reference implementation)."""
    tree = kinematic_tree(model)
    states = forward_kinematics(tree, q, world=True)
    res, jac = [], []
    for jb, rb, jh, rh in _hexa_points(model):
        pb, Jb = point_jacobian(tree, states, jb, rb)
        ph, Jh = point_jacobian(tree, states, jh, rh)
        res.append(pb - ph)
        jac.append(Jb - Jh)
    phi = np.concatenate(res, axis=-1)
    if not jacobian:
        return phi
    return phi, np.concatenate(jac, axis=-2)


def constraint_bias(model: MultibodyModel, q, dq) -> np.ndarray:
    """gamma with phi_q qdd = gamma, i.e. minus the velocity-product acceleration of phi."""
    tree = kinematic_tree(model)
    zero = np.zeros_like(q)
    states = forward_kinematics(tree, q, dq, zero, gravity=None, world=True)
    out = []
    for jb, rb, jh, rh in _hexa_points(model):
        out.append(point_bias_acceleration(states, jh, rh) - point_bias_acceleration(states, jb, rb))
    return np.concatenate(out, axis=-1)


def _newton(model, z, d0, tol, max_iter):
    d = np.array(d0, dtype=float)
    ok = np.zeros(z.shape[:-1], dtype=bool)
    active = np.arange(len(z))
    for _ in range(max_iter + 1):
        q = np.concatenate([d[active], z[active]], axis=-1)
        phi, J = constraint(model, q)
        err = np.abs(phi).max(axis=-1)
        done = err <= tol
        ok[active[done]] = True
        keep = ~done & np.isfinite(err) & (err < 1e3)
        active, phi, J = active[keep], phi[keep], J[keep]
        if len(active) == 0:
            break
        try:
            step = np.linalg.solve(J[..., :18], phi[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(J[..., :18], phi)])
        d[active] -= step
    return d, ok


def solve_positions(model, z, warm=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, continuation=True):
    """Dependent coordinates for carriage heights ``z``; returns (d, converged mask).

    Failed samples are retried from the symmetric pose and, if ``continuation``
    is set, by stepping the carriage heights out from their mean.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d0 = home_guess(model, z) if warm is None else np.broadcast_to(warm, z.shape[:-1] + (18,)).copy()
    d, ok = _newton(model, z, d0, tol, max_iter)
    if warm is not None and not ok.all():
        d[~ok], ok[~ok] = _newton(model, z[~ok], home_guess(model, z[~ok]), tol, max_iter)
    if continuation and not ok.all():
        idx = np.flatnonzero(~ok)
        zb = z[idx]
        zm = zb.mean(axis=-1, keepdims=True)
        dc = home_guess(model, zb)
        good = np.ones(len(idx), dtype=bool)
        for s in np.linspace(0.1, 1.0, 10):
            dc, conv = _newton(model, zm + s * (zb - zm), dc, tol, max_iter)
            good &= conv
        d[idx[good]] = dc[good]
        ok[idx[good]] = True
    return d, ok


def solve_dependent(model: MultibodyModel, z, dz, warm=None, cond_limit=SINGULAR_COND_LIMIT,
                    continuation=True, max_iter=NEWTON_MAX_ITER) -> ConstrainedState:
    """Closed-loop state from independent positions and velocities."""
    if not model.is_closed_loop:
        raise TypeError("solve_dependent needs a closed-loop model")
    z = np.asarray(z, dtype=float)
    dz = np.asarray(dz, dtype=float)
    batch = z.shape[:-1]
    zf, dzf = z.reshape(-1, 6), dz.reshape(-1, 6)
    d, ok = solve_positions(model, zf, warm=None if warm is None else np.asarray(warm).reshape(-1, 18),
                            max_iter=max_iter, continuation=continuation)
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise OutsideWorkspace(f"position constraints not solvable for {len(bad)} sample(s)", bad.tolist())
    q = np.concatenate([d, zf], axis=-1)
    _, J = constraint(model, q)
    phi_d, phi_z = J[..., :18], J[..., 18:]
    cond = np.linalg.cond(phi_d)
    bad = ~(cond < cond_limit)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise ConfigurationSingular("constraint Jacobian phi_d is singular", float(np.max(cond[idx])), idx.tolist())
    G = -np.linalg.solve(phi_d, phi_z)
    Rmat = np.concatenate([G, np.broadcast_to(np.eye(6), G.shape[:-2] + (6, 6))], axis=-2)
    dq = (Rmat @ dzf[..., None])[..., 0]
    gamma = constraint_bias(model, q, dq)
    return ConstrainedState(q.reshape(batch + (24,)), dq.reshape(batch + (24,)), J.reshape(batch + (18, 24)),
                            Rmat.reshape(batch + (24, 6)), gamma.reshape(batch + (18,)), cond.reshape(batch))


def workspace_feasible(model: MultibodyModel, z, continuation=True, max_iter=NEWTON_MAX_ITER) -> np.ndarray:
    """Mask of samples whose positions solve and keep cond(phi_d) below 1e8."""
    z = np.asarray(z, dtype=float)
    zf = z.reshape(-1, 6)
    d, ok = solve_positions(model, zf, max_iter=max_iter, continuation=continuation)
    feas = ok.copy()
    if ok.any():
        q = np.concatenate([d[ok], zf[ok]], axis=-1)
        _, J = constraint(model, q)
        feas[ok] = np.linalg.cond(J[..., :18]) < WORKSPACE_COND_LIMIT
    return feas.reshape(z.shape[:-1])


def ortho_complement(state: ConstrainedState) -> np.ndarray:
    cond = np.linalg.cond(state.phi_d)
    if np.any(~(cond < SINGULAR_COND_LIMIT)):
        raise ConfigurationSingular("constraint Jacobian phi_d is singular", float(np.max(cond)),
                                    np.flatnonzero(~(np.atleast_1d(cond) < SINGULAR_COND_LIMIT)).tolist())
    G = -np.linalg.solve(state.phi_d, state.phi_z)
    return np.concatenate([G, np.broadcast_to(np.eye(6), G.shape[:-2] + (6, 6))], axis=-2)


# --- lifting independent states to the tree ------------------------------------------

@dataclass
class _Lift:
    q: np.ndarray
    dq: np.ndarray
    R: np.ndarray  # None for open chains
    c: np.ndarray  # full-coordinate acceleration at zero ddz


def _lift(model, z, dz, state=None) -> _Lift:
    z = np.asarray(z, dtype=float)
    dz = np.asarray(dz, dtype=float)
    if not model.is_closed_loop:
        return _Lift(z, dz, None, np.zeros_like(z))
    if state is None:
        state = solve_dependent(model, z, dz)
    return _Lift(state.q, state.dq, state.Rmat, state.accel_offset)


def _qdd(lift, ddz):
    ddz = np.asarray(ddz, dtype=float)
    if lift.R is None:
        return np.broadcast_to(ddz, lift.q.shape)
    return lift.c + (lift.R @ ddz[..., None])[..., 0]


def _project(lift, x):
    """Left-multiply a full-coordinate matrix stack by R^T."""
    if lift.R is None:
        return x
    return np.swapaxes(lift.R, -1, -2) @ x


# --- public dynamics --------------------------------------------------------------------

def idm(model: MultibodyModel, z, dz, ddz, phi=None, state=None) -> np.ndarray:
    """Generalized forces at the independent coordinates."""
    tree = kinematic_tree(model)
    lift = _lift(model, z, dz, state)
    tau_q = rnea(tree, lift.q, lift.dq, _qdd(lift, ddz), _slot_phi(model, phi), model.gravity)
    if lift.R is None:
        return tau_q
    return _project(lift, tau_q[..., None])[..., 0]


def regressor(model: MultibodyModel, z, dz, ddz, active_only=True, state=None) -> np.ndarray:
    """Observation matrix K with ``K @ phi = idm(phi)``; shape (..., n_dof, n_phi)."""
    tree = kinematic_tree(model)
    lift = _lift(model, z, dz, state)
    K = _project(lift, rnea_regressor(tree, lift.q, lift.dq, _qdd(lift, ddz), model.gravity))
    if active_only:
        K = K[..., list(active_parameter_indices(model))]
    return K


def ddm_regressors(model: MultibodyModel, z, dz, active_only=True, state=None):
    """Parameter-linear mass and bias tensors.

    Returns ``(Mt, Dt)`` of shapes (..., n, n, P) and (..., n, P) with
    ``M = Mt @ phi`` and ``delta = Dt @ phi``.
    """
    tree = kinematic_tree(model)
    lift = _lift(model, z, dz, state)
    n = model.n_dof
    Dt = _project(lift, rnea_regressor(tree, lift.q, lift.dq, lift.c, model.gravity))
    zero = np.zeros_like(lift.q)
    cols = []
    for i in range(n):
        e = np.zeros(lift.q.shape[:-1] + (n,))
        e[..., i] = 1.0
        qdd = e if lift.R is None else (lift.R @ e[..., None])[..., 0]
        cols.append(_project(lift, rnea_regressor(tree, lift.q, zero, qdd, None)))
    Mt = np.stack(cols, axis=-2)
    if active_only:
        idx = list(active_parameter_indices(model))
        Mt, Dt = Mt[..., idx], Dt[..., idx]
    return Mt, Dt


def mass_and_bias(model: MultibodyModel, z, dz, phi=None, state=None):
    """``(M, delta)`` with ``M ddz + delta = idm(z, dz, ddz)``."""
    tree = kinematic_tree(model)
    return _mass_bias_lift(tree, _lift(model, z, dz, state), _slot_phi(model, phi), model)


def solve_mass(M, rhs, cond_limit=MASS_COND_LIMIT):
    """Batched ``M x = rhs`` raising MassSingular when cond(M) exceeds ``cond_limit``."""
    M = np.asarray(M)
    cond = np.linalg.cond(M)
    bad = ~(np.atleast_1d(cond) < cond_limit)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise MassSingular("mass matrix is singular or ill-conditioned", float(np.atleast_1d(cond)[i]), i)
    return np.linalg.solve(M, np.asarray(rhs)[..., None])[..., 0], cond


def forward_dynamics(model: MultibodyModel, z, dz, tau, phi=None, state=None, return_cond=False):
    M, delta = mass_and_bias(model, z, dz, phi, state)
    ddz, cond = solve_mass(M, np.asarray(tau) - delta)
    return (ddz, cond) if return_cond else ddz


def project_to_independent(model: MultibodyModel, state: ConstrainedState, ddz, phi=None) -> ProjectedDynamics:
    """Independent-coordinate dynamics of a solved closed-loop state."""
    tree = kinematic_tree(model)
    slots = _slot_phi(model, phi)
    lift = _Lift(state.q, state.dq, state.Rmat, state.accel_offset)
    qdd = _qdd(lift, ddz)
    d_q = rnea(tree, lift.q, lift.dq, qdd, slots, model.gravity)
    d_z = _project(lift, d_q[..., None])[..., 0]
    M_zz, delta_z = _mass_bias_lift(tree, lift, slots, model)
    K = _project(lift, rnea_regressor(tree, lift.q, lift.dq, qdd, model.gravity))
    K = K[..., list(active_parameter_indices(model))]
    return ProjectedDynamics(d_z, M_zz, delta_z, K, d_z.copy())


def _mass_bias_lift(tree, lift, slots, model):
    delta = rnea(tree, lift.q, lift.dq, lift.c, slots, model.gravity)
    zero = np.zeros_like(lift.q)
    if lift.R is None:
        eye = np.eye(lift.q.shape[-1])
        dirs = [np.broadcast_to(eye[i], lift.q.shape) for i in range(len(eye))]
    else:
        dirs = [lift.R[..., :, i] for i in range(lift.R.shape[-1])]
    M = np.stack([rnea(tree, lift.q, zero, e, slots, None) for e in dirs], axis=-1)
    return _project(lift, M), _project(lift, delta[..., None])[..., 0]


def full_mass_and_bias(model: MultibodyModel, q, dq, phi=None):
    """Full-coordinate ``(M_qq, delta_q)`` of the spanning tree (no constraints)."""
    tree = kinematic_tree(model)
    slots = _slot_phi(model, phi)
    q = np.asarray(q, dtype=float)
    delta = rnea(tree, q, dq, np.zeros_like(q), slots, model.gravity)
    zero = np.zeros_like(q)
    cols = []
    for i in range(q.shape[-1]):
        e = np.zeros_like(q)
        e[..., i] = 1.0
        cols.append(rnea(tree, q, zero, e, slots, None))
    return np.stack(cols, axis=-1), delta
