"""SE(3) / se(3) arithmetic and the object/part frame conventions.

Rotations are stored as 3x3 matrices. Twists are ordered (omega, v): the
rotation vector first, then the translational tangent component. All
frames attached to objects and parts share the world orientation and sit at
point-cloud centroids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import AngleNearPi, EmptyCloud

PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=np.float64
    )


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "Pose":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list[float]:
        """12 numbers, row-major rotation followed by translation."""
        return [float(x) for x in self.rotation.ravel()] + [float(x) for x in self.translation]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError(f"pose encoding needs 12 numbers, got {values.shape}")
        return cls(values[:9].reshape(3, 3), values[9:])

    def to_bytes(self) -> bytes:
        return np.asarray(self.to_list(), dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Pose":
        return cls.from_list(np.frombuffer(raw, dtype="<f8", count=12))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def reorthonormalize(self) -> "Pose":
        if self.is_valid():
            return self
        return Pose(project_to_so3(self.rotation), self.translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.omega))

    def __mul__(self, s: float) -> "Twist":
        return Twist(self.omega * s, self.v * s)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Twist(omega={self.omega.tolist()}, v={self.v.tolist()})"


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    """Start and end T_AF waypoints; the motion between them is geodesic."""

    poses: tuple

    N = 2

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) != self.N:
            raise ValueError(f"trajectory needs exactly {self.N} poses, got {len(poses)}")
        object.__setattr__(self, "poses", poses)

    @property
    def start(self) -> Pose:
        return self.poses[0]

    @property
    def end(self) -> Pose:
        return self.poses[1]

    def at(self, s: float) -> Pose:
        return interpolate(self.start, self.end, s)

    def to_list(self) -> list[list[float]]:
        return [p.to_list() for p in self.poses]

    @classmethod
    def from_list(cls, values) -> "TrajectorySpec":
        return cls(tuple(Pose.from_list(v) for v in values))

    def twists(self) -> np.ndarray:
        """(2, 6) canonical log coordinates of the waypoints."""
        return np.stack([log_map(p).vector() for p in self.poses])

    @classmethod
    def from_twists(cls, xi: np.ndarray) -> "TrajectorySpec":
        rot, trans = kernels.se3_exp(np.asarray(xi).reshape(-1, 6))
        return cls(tuple(Pose(r, t) for r, t in zip(rot, trans)))


def exp_map(xi: Twist) -> Pose:
    rot, trans = kernels.se3_exp(xi.vector()[None])
    return Pose(rot[0], trans[0])


def rotation_angle(rotation: np.ndarray) -> float:
    r = np.asarray(rotation)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), (np.trace(r) - 1.0) / 2.0))


def log_map(p: Pose) -> Twist:
    xi, theta = kernels.se3_log(p.rotation[None], p.translation[None])
    if theta[0] > np.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta[0]:.12f} within {PI_MARGIN} of pi")
    return Twist.from_vector(xi[0])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def interpolate(start: Pose, end: Pose, s: float) -> Pose:
    if s == 0.0:
        return start
    delta = log_map(compose(inverse(start), end))
    return compose(start, exp_map(delta * float(s)))


def centroid_frame(points) -> Pose:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot take the centroid of an empty cloud")
    return Pose(np.eye(3), pts.mean(axis=0))


def to_part_frame(t_af: Pose, t_a_pa: Pose, t_f_pf: Pose) -> Pose:
    """Relative pose between two part frames: T_APa^-1 . T_AF . T_FPf."""
    return compose(compose(inverse(t_a_pa), t_af), t_f_pf)


def from_part_frame(t_part: Pose, t_a_pa: Pose, t_f_pf: Pose) -> Pose:
    """Inverse of :func:`to_part_frame`."""
    return compose(compose(t_a_pa, t_part), inverse(t_f_pf))


def to_world(t_wa: Pose, t_af: Pose, t_wf: Pose) -> Pose:
    """World-frame motion of the function object: T_WA . T_AF . T_WF^-1."""
    return compose(compose(t_wa, t_af), inverse(t_wf))


# Batched tangent-space frame changes used inside the samplers.


def exp_batch(xi: np.ndarray):
    return kernels.se3_exp(xi)


def log_batch(rot: np.ndarray, trans: np.ndarray, ref: np.ndarray | None = None) -> np.ndarray:
    xi, _ = kernels.se3_log(rot, trans, ref)
    return xi


def twists_to_part(xi: np.ndarray, t_a_pa: Pose, t_f_pf: Pose) -> np.ndarray:
    """Map (n, 6) object-frame twists to part-frame twists.

    exp -> to_part_frame -> log, keeping the rotation vector on the branch
    nearest the (frame-rotated) input so noisy states with angle > pi are
    not wrapped.
    """
    xi = np.asarray(xi, dtype=np.float64).reshape(-1, 6)
    n = xi.shape[0]
    return twists_to_part_rows(
        xi,
        np.broadcast_to(t_a_pa.rotation, (n, 3, 3)),
        np.broadcast_to(t_a_pa.translation, (n, 3)),
        np.broadcast_to(t_f_pf.rotation, (n, 3, 3)),
        np.broadcast_to(t_f_pf.translation, (n, 3)),
    )


def twists_to_part_rows(xi, ra, ta, rf, tf) -> np.ndarray:
    """Row-wise :func:`twists_to_part` with per-row frames ``(n, 3, 3)``, ``(n, 3)``."""
    rot, trans = kernels.se3_exp(np.asarray(xi, dtype=np.float64).reshape(-1, 6))
    # (Ra^T R Rf, Ra^T (R tf + t - ta))
    prot = np.einsum("nji,njk,nkl->nil", ra, rot, rf)
    ptrans = np.einsum("nji,nj->ni", ra, np.einsum("nij,nj->ni", rot, tf) + trans - ta)
    ref = np.einsum("nji,nj->ni", ra, xi[:, :3])
    return log_batch(prot, ptrans, ref)


def twists_from_part(xi_part: np.ndarray, t_a_pa: Pose, t_f_pf: Pose) -> np.ndarray:
    """Inverse of :func:`twists_to_part`."""
    xi_part = np.asarray(xi_part, dtype=np.float64).reshape(-1, 6)
    rot, trans = kernels.se3_exp(xi_part)
    ra, ta = t_a_pa.rotation, t_a_pa.translation
    rf, tf = t_f_pf.rotation, t_f_pf.translation
    orot = ra @ rot @ rf.T
    otrans = np.einsum("ij,nj->ni", ra, trans) + ta - np.einsum("nij,j->ni", orot, tf)
    ref = xi_part[:, :3] @ ra.T
    return log_batch(orot, otrans, ref)


def transport_noise_from_part(eps_part: np.ndarray, t_a_pa: Pose) -> np.ndarray:
    """Carry tangent noise predicted in a part frame back to the object frame.

    Rotation block of the frame change applied to omega and v separately;
    this is the identity when part frames share the object orientation.
    """
    eps_part = np.asarray(eps_part).reshape(-1, 6)
    return transport_noise_rows(eps_part, np.broadcast_to(t_a_pa.rotation, (eps_part.shape[0], 3, 3)))


def transport_noise_rows(eps_part: np.ndarray, ra: np.ndarray) -> np.ndarray:
    """Row-wise :func:`transport_noise_from_part` with ``ra`` of shape (n, 3, 3)."""
    w = np.einsum("nij,nj->ni", ra, eps_part[:, :3])
    v = np.einsum("nij,nj->ni", ra, eps_part[:, 3:])
    return np.concatenate([w, v], axis=1)
