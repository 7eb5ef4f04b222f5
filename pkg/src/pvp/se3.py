"""Rigid-body poses on SE(3) with unit-quaternion rotations.

Conventions used throughout the package:

* Quaternions are stored scalar-first ``(w, x, y, z)``, unit norm, and
  canonicalised to the ``w >= 0`` hemisphere so equal rotations compare equal.
* Rotation vectors split into a unit axis ``e`` and an angle ``theta`` folded
  into ``[0, pi]``.  The zero rotation has ``e = 0`` by convention.
* ``Pose`` acts on points as ``p_world = R(q) @ p + t``.
* Relative motions between consecutive waypoints are ``RelPose`` values,
  serialised as 6 floats ``(tx, ty, tz, theta*ex, theta*ey, theta*ez)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_EPS_ANGLE = 1e-12   # rotations below this are treated as identity
_DOT_LERP = 0.9999995  # slerp falls back to lerp when quaternions nearly coincide

POSE_STRUCT = struct.Struct("<7d")     # qw qx qy qz tx ty tz
RELPOSE_STRUCT = struct.Struct("<6d")  # tx ty tz  theta*e


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < 1e-300 or not np.isfinite(n):
        raise ValueError(f"degenerate quaternion with norm {n}")
    if abs(n - 1.0) > 1e-12:  # skip the divide when already unit: keeps reloads bitwise
        q = q / n
    else:
        q = q.copy()
    # canonical hemisphere: w >= 0, ties broken on the first nonzero component
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # q v q* expanded; cheaper and exact enough in float64
    w = q[0]
    u = q[1:]
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def _quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    half = 0.5 * angle
    return _quat_normalize(np.concatenate(([np.cos(half)], np.sin(half) * axis)))


def _quat_from_rotation_vector(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    if angle < _EPS_ANGLE:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return _quat_from_axis_angle(w / angle, angle)


@dataclass(frozen=True)
class RotVec:
    """Axis-angle rotation with ``theta`` in [0, pi] and a unit (or zero) axis."""

    axis: np.ndarray
    angle: float

    def as_vector(self) -> np.ndarray:
        return self.angle * self.axis

    def as_quat(self) -> np.ndarray:
        if self.angle < _EPS_ANGLE:
            return np.array([1.0, 0.0, 0.0, 0.0])
        return _quat_from_axis_angle(self.axis, self.angle)


@dataclass(frozen=True)
class NoiseParams:
    """Standard deviations for waypoint perturbation.

    sigma_t is metres on each translation component, sigma_e is the
    dimensionless per-component axis jitter and sigma_theta is radians on the
    rotation angle.
    """

    sigma_t: float = 0.005
    sigma_e: float = 0.005
    sigma_theta: float = np.deg2rad(0.5)

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_e < 0 or self.sigma_theta < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass
class Pose:
    """Rigid transform: unit quaternion ``q`` (w, x, y, z) plus translation ``t``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = _quat_normalize(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).copy()
        if self.t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {self.t.shape}")
        if not np.all(np.isfinite(self.t)):
            raise ValueError("translation must be finite")

    # -- constructors -------------------------------------------------------

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_axis_angle(axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        n = float(np.linalg.norm(axis))
        if n < 1e-300:
            raise ValueError("rotation axis must be nonzero")
        return Pose(_quat_from_axis_angle(axis / n, float(angle)), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(t, dtype=np.float64))

    # -- group operations ----------------------------------------------------

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self @ other`` (apply ``other`` first in the local frame)."""
        return Pose(_quat_mul(self.q, other.q), self.t + _quat_rotate(self.q, other.t))

    def inverse(self) -> "Pose":
        q_inv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -_quat_rotate(q_inv, self.t))

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return _quat_rotate(self.q, np.asarray(p, dtype=np.float64)) + self.t

    def rotate_vector(self, v: np.ndarray) -> np.ndarray:
        return _quat_rotate(self.q, np.asarray(v, dtype=np.float64))

    def rotvec(self) -> RotVec:
        q = self.q  # already canonical, w >= 0 so angle lands in [0, pi]
        sin_half = float(np.linalg.norm(q[1:]))
        angle = 2.0 * float(np.arctan2(sin_half, q[0]))
        if angle < _EPS_ANGLE:
            return RotVec(np.zeros(3), 0.0)
        return RotVec(q[1:] / sin_half, angle)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        return POSE_STRUCT.pack(*self.q, *self.t)

    @staticmethod
    def from_bytes(buf: bytes) -> "Pose":
        vals = POSE_STRUCT.unpack(buf)
        return Pose(np.array(vals[:4]), np.array(vals[4:]))


@dataclass
class RelPose:
    """Relative motion: translation plus a rotation vector, both in the source frame.

    The rotation vector ``w = theta * e`` is stored verbatim, which keeps
    serialization a pure float copy (bitwise stable).  Motions derived from
    pose pairs always carry ``theta`` in [0, pi]; ``as_pose`` accepts any
    magnitude.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).copy()
        self.w = np.asarray(self.w, dtype=np.float64).copy()
        if self.t.shape != (3,) or self.w.shape != (3,):
            raise ValueError("RelPose components must have shape (3,)")

    @staticmethod
    def identity() -> "RelPose":
        return RelPose()

    @property
    def rot(self) -> RotVec:
        angle = float(np.linalg.norm(self.w))
        if angle < _EPS_ANGLE:
            return RotVec(np.zeros(3), 0.0)
        if angle > np.pi:  # fold oversized vectors onto the canonical range
            return Pose(_quat_from_rotation_vector(self.w), np.zeros(3)).rotvec()
        return RotVec(self.w / angle, angle)

    def as_pose(self) -> Pose:
        return Pose(_quat_from_rotation_vector(self.w), self.t)

    @staticmethod
    def from_pose(p: Pose) -> "RelPose":
        return RelPose(p.t.copy(), p.rotvec().as_vector())

    def as_vector(self) -> np.ndarray:
        """Six floats: translation then theta-scaled axis."""
        return np.concatenate([self.t, self.w])

    @staticmethod
    def from_vector(v: np.ndarray) -> "RelPose":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (6,):
            raise ValueError(f"expected 6 components, got shape {v.shape}")
        return RelPose(v[:3], v[3:])

    def magnitude(self) -> tuple[float, float]:
        """(translation norm, rotation angle) of the motion."""
        return float(np.linalg.norm(self.t)), self.rot.angle

    def to_bytes(self) -> bytes:
        return RELPOSE_STRUCT.pack(*self.as_vector())

    @staticmethod
    def from_bytes(buf: bytes) -> "RelPose":
        return RelPose.from_vector(np.array(RELPOSE_STRUCT.unpack(buf)))


# -- free functions ----------------------------------------------------------


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def relative_action(frm: Pose, to: Pose) -> RelPose:
    """Motion that carries ``frm`` onto ``to``, expressed in the ``frm`` frame."""
    return RelPose.from_pose(frm.inverse().compose(to))


def apply_action(p: Pose, action: RelPose) -> Pose:
    return p.compose(action.as_pose())


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Geodesic interpolation between two poses at parameter ``s`` in [0, 1].

    Translation is linear, rotation follows the shortest-arc slerp.  Raises
    ``ValueError`` for parameters outside the unit interval: waypoint
    schedules never extrapolate.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation parameter {s} outside [0, 1]")
    t = (1.0 - s) * a.t + s * b.t
    qa, qb = a.q, b.q
    dot = float(np.dot(qa, qb))
    if dot < 0.0:  # take the short way around the double cover
        qb = -qb
        dot = -dot
    if dot > _DOT_LERP:
        q = (1.0 - s) * qa + s * qb
    else:
        omega = np.arccos(min(dot, 1.0))
        sin_omega = np.sin(omega)
        q = (np.sin((1.0 - s) * omega) * qa + np.sin(s * omega) * qb) / sin_omega
    return Pose(q, t)


def rotation_angle_between(a: Pose, b: Pose) -> float:
    """Geodesic rotation distance in radians, in [0, pi]."""
    q_rel = _quat_mul(a.q * np.array([1.0, -1.0, -1.0, -1.0]), b.q)
    # 2*atan2 form stays accurate for tiny angles where acos loses digits
    return 2.0 * float(np.arctan2(np.linalg.norm(q_rel[1:]), abs(q_rel[0])))


def translation_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.t - b.t))


def perturb_pose(p: Pose, noise: NoiseParams, rng: np.random.Generator) -> Pose:
    """Apply independent Gaussian noise to a waypoint pose.

    Exactly seven normal draws are consumed in a fixed order (3 translation,
    3 axis, 1 angle) so that a shared generator stream stays aligned across
    noise settings.  The rotation is rebuilt from ``(theta + d_theta) * (e + d_e)``
    with the jittered axis used as-is: its length absorbs part of the angle
    noise rather than being renormalised away.
    """
    d_t = rng.normal(0.0, noise.sigma_t, size=3)
    d_e = rng.normal(0.0, noise.sigma_e, size=3)
    d_theta = rng.normal(0.0, noise.sigma_theta)
    rv = p.rotvec()
    w = (rv.angle + d_theta) * (rv.axis + d_e)
    return Pose(_quat_from_rotation_vector(w), p.t + d_t)
