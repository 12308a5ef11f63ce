"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one to one and are used when the compiled
extension is unavailable (or ``CPM_PURE_PYTHON=1`` is set).
"""

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-2


def _hat(w):
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def se3_exp(xi):
    """Batched SE(3) exponential. ``xi`` is (n, 6) ordered (omega, v)."""
    xi = np.ascontiguousarray(xi, dtype=np.float64).reshape(-1, 6)
    omega, v = xi[:, :3], xi[:, 3:]
    theta2 = np.einsum("ij,ij->i", omega, omega)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    safe2 = safe * safe
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / safe2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe2 * safe))
    k = _hat(omega)
    k2 = k @ k
    eye = np.eye(3)
    rot = eye + a[:, None, None] * k + b[:, None, None] * k2
    vmat = eye + b[:, None, None] * k + c[:, None, None] * k2
    trans = np.einsum("nij,nj->ni", vmat, v)
    return rot, trans


def _log_rotation(rot):
    w = np.stack(
        [rot[:, 2, 1] - rot[:, 1, 2], rot[:, 0, 2] - rot[:, 2, 0], rot[:, 1, 0] - rot[:, 0, 1]],
        axis=-1,
    )
    cos = np.clip((np.trace(rot, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin, cos)
    omega = np.empty_like(w)
    for i in range(rot.shape[0]):
        th = theta[i]
        if th < SMALL_ANGLE:
            omega[i] = (0.5 + th * th / 12.0) * w[i]
        elif th < np.pi - NEAR_PI:
            omega[i] = th / (2.0 * np.sin(th)) * w[i]
        else:
            one_minus_cos = 1.0 - cos[i]
            sym = 0.5 * (rot[i] + rot[i].T) - cos[i] * np.eye(3)
            j = int(np.argmax(np.diag(sym)))
            axis = sym[:, j] / np.sqrt(sym[j, j] * one_minus_cos)
            axis /= np.linalg.norm(axis)
            if axis @ w[i] < 0.0:
                axis = -axis
            omega[i] = th * axis
    return omega, theta


def _vinv(omega):
    theta2 = np.einsum("ij,ij->i", omega, omega)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    d = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / (safe * safe),
    )
    k = _hat(omega)
    return np.eye(3) - 0.5 * k + d[:, None, None] * (k @ k)


def se3_log(rot, trans, ref=None):
    """Batched SE(3) logarithm returning (n, 6) twists and rotation angles.

    With ``ref`` given, the rotation part is the representative of the
    rotation closest to ``ref`` instead of the canonical one (angle <= pi).
    """
    rot = np.ascontiguousarray(rot, dtype=np.float64).reshape(-1, 3, 3)
    trans = np.ascontiguousarray(trans, dtype=np.float64).reshape(-1, 3)
    omega, theta = _log_rotation(rot)
    if ref is not None:
        ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
        for i in range(rot.shape[0]):
            th = theta[i]
            if th < SMALL_ANGLE:
                continue
            axis = omega[i] / th
            k = np.round((axis @ ref[i] - th) / (2.0 * np.pi))
            if k == 0:
                continue
            alt = th + 2.0 * np.pi * k
            if 1.0 - np.cos(alt) < 1e-6:
                continue
            omega[i] = alt * axis
    v = np.einsum("nij,nj->ni", _vinv(omega), trans)
    return np.concatenate([omega, v], axis=-1), theta


def min_pair_distance(a, b, stop_below=0.0):
    """Smallest Euclidean distance between rows of ``a`` and ``b``.

    Returns early with the first distance found below ``stop_below``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
    best = np.inf
    stop2 = stop_below * stop_below
    for start in range(0, a.shape[0], 128):
        diff = a[start:start + 128, None, :] - b[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff).min()
        if d2 < best:
            best = d2
            if best < stop2:
                break
    return float(np.sqrt(best))
