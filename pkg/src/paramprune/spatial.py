"""Small 3-vector helpers that work on float arrays with leading batch axes and
on object arrays of symbolic scalars alike."""

import numpy as np

_SNAP = 1e-15


def snap(x):
    """Round entries within 1e-15 of -1, 0 or 1 to the exact value."""
    x = np.array(x, dtype=float)
    for v in (-1.0, 0.0, 1.0):
        x[np.abs(x - v) < _SNAP] = v
    return x


def rotx(angle):
    c, s = np.cos(angle), np.sin(angle)
    return snap([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def roty(angle):
    c, s = np.cos(angle), np.sin(angle)
    return snap([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotz(angle):
    c, s = np.cos(angle), np.sin(angle)
    return snap([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_rotation(axis, c, s):
    """Rotation about principal ``axis`` (0, 1, 2) from cosine/sine arrays.

    Returns an array of shape ``c.shape + (3, 3)``.
    """
    c = np.asarray(c)
    s = np.asarray(s)
    if c.dtype != object:
        i, j = [k for k in range(3) if k != axis]
        out = np.zeros(c.shape + (3, 3))
        out[..., axis, axis] = 1.0
        out[..., i, i] = c
        out[..., j, j] = c
        # rotation about y has the sine signs flipped relative to x and z
        sgn = -1.0 if axis == 1 else 1.0
        out[..., i, j] = -sgn * s
        out[..., j, i] = sgn * s
        return out
    zero = np.zeros_like(c)
    one = np.ones_like(c)
    if axis == 0:
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == 1:
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def cross(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != object and b.dtype != object:
        shape = np.broadcast_shapes(a.shape, b.shape)
        out = np.empty(shape)
        out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
        out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
        out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
        return out
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def skew(v):
    v = np.asarray(v)
    if v.dtype != object:
        out = np.zeros(v.shape + (3,))
        out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
        out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
        out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
        return out
    zero = np.zeros_like(v[..., 0])
    rows = [
        [zero, -v[..., 2], v[..., 1]],
        [v[..., 2], zero, -v[..., 0]],
        [-v[..., 1], v[..., 0], zero],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def matvec(R, v):
    return (np.asarray(R) @ np.asarray(v)[..., None])[..., 0]


def mat_t_vec(R, v):
    return (np.swapaxes(np.asarray(R), -1, -2) @ np.asarray(v)[..., None])[..., 0]


def inertia_matrix(inertia6):
    """Symmetric 3x3 tensor from (Ixx, Ixy, Ixz, Iyy, Iyz, Izz)."""
    xx, xy, xz, yy, yz, zz = (inertia6[..., k] for k in range(6))
    rows = [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
