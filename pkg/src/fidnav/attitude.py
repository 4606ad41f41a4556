"""Quaternion and rotation-matrix primitives shared by every other module.

Conventions
-----------
* Quaternions are scalar-first float arrays ``[w, x, y, z]``.
* The body-to-NED attitude quaternion ``q`` satisfies
  ``v_ned = quat_to_dcm(q) @ v_body``, and composition is homomorphic:
  ``quat_to_dcm(quat_mult(a, b)) == quat_to_dcm(a) @ quat_to_dcm(b)``.
* Small-angle attitude corrections are built by :func:`correction_quat` and
  applied by left multiplication onto the quaternion being corrected.

All functions are compiled with numba and are safe to call from other jitted
code as well as from plain Python.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "quat_mult",
    "quat_conj",
    "quat_normalize",
    "quat_to_dcm",
    "skew",
    "correction_quat",
]


@njit(cache=True)
def quat_mult(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product ``q1 (x) q2`` of two scalar-first quaternions.

    Scalar part is ``-v1.v2 + w1*w2``; vector part is
    ``v1 x v2 + w1*v2 + w2*v1``.  Total function: no normalization is
    applied, so ``|q1 (x) q2| == |q1|*|q2|``.
    """
    w1, x1, y1, z1 = q1[0], q1[1], q1[2], q1[3]
    w2, x2, y2, z2 = q2[0], q2[1], q2[2], q2[3]
    out = np.empty(4)
    out[0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    out[1] = y1 * z2 - z1 * y2 + w1 * x2 + w2 * x1
    out[2] = z1 * x2 - x1 * z2 + w1 * y2 + w2 * y1
    out[3] = x1 * y2 - y1 * x2 + w1 * z2 + w2 * z1
    return out


@njit(cache=True)
def quat_conj(q: np.ndarray) -> np.ndarray:
    """Conjugate (inverse for unit quaternions)."""
    out = np.empty(4)
    out[0] = q[0]
    out[1] = -q[1]
    out[2] = -q[2]
    out[3] = -q[3]
    return out


@njit(cache=True)
def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm.  Raises on a degenerate near-zero quaternion."""
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


@njit(cache=True)
def quat_to_dcm(q: np.ndarray) -> np.ndarray:
    """Direction cosine matrix of a unit quaternion.

    For an attitude quaternion ``q`` (body relative to NED) the result maps
    body vectors into NED.  ``q`` and ``-q`` give the same matrix.  Input
    must be unit within 1e-6; it is re-normalized internally so the output
    is orthonormal to machine precision.
    """
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if np.abs(n - 1.0) > 1e-6:
        raise ValueError("quat_to_dcm requires a unit quaternion (|norm - 1| <= 1e-6)")
    w = q[0] / n
    x = q[1] / n
    y = q[2] / n
    z = q[3] / n
    out = np.empty((3, 3))
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


@njit(cache=True)
def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``(v x)`` such that ``skew(v) @ u == cross(v, u)``."""
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


@njit(cache=True)
def correction_quat(dtheta: np.ndarray) -> np.ndarray:
    """Unit quaternion ``[1, -dtheta/2]`` for small-angle attitude corrections.

    Left-multiplying an attitude estimate by the result rotates it through
    the small-angle error vector ``dtheta`` (radians), matching the filter's
    attitude-error convention.
    """
    out = np.empty(4)
    out[0] = 1.0
    out[1] = -0.5 * dtheta[0]
    out[2] = -0.5 * dtheta[1]
    out[3] = -0.5 * dtheta[2]
    n = np.sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2] + out[3] * out[3])
    return out / n
