"""SO(3)/SE(3) group operations and exposure-trajectory interpolation.

Twists are ordered ``(rho, omega)``: translational part first, rotation
(radians) second.  Poses map world points into the camera frame,
``p_cam = R @ p + t``.  All array helpers accept leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Sequence

import numpy as np

from .errors import NearSingularRotation, ParameterOutOfRange

SMALL_ANGLE = 1e-8
# Below this angle the cubic coefficient of V(omega) loses digits to cancellation.
SERIES_ANGLE = 1e-3
SINGULAR_MARGIN = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of ``v`` (shape ``(..., 3)`` -> ``(..., 3, 3)``)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of ``(w, x, y, z)`` quaternions."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    out = np.empty(np.shape(w) + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    r00, r01, r02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    r10, r11, r12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    r20, r21, r22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    tr = r00 + r11 + r22
    diag = np.stack([tr, r00, r11, r22], axis=-1)
    pick = np.argmax(diag, axis=-1)
    # one candidate per pivot; each is well conditioned when its pivot is largest
    s0 = 2.0 * np.sqrt(np.maximum(1.0 + tr, 1e-300))
    s1 = 2.0 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 1e-300))
    s2 = 2.0 * np.sqrt(np.maximum(1.0 + r11 - r00 - r22, 1e-300))
    s3 = 2.0 * np.sqrt(np.maximum(1.0 + r22 - r00 - r11, 1e-300))
    cands = np.stack(
        [
            np.stack([0.25 * s0, (r21 - r12) / s0, (r02 - r20) / s0, (r10 - r01) / s0], axis=-1),
            np.stack([(r21 - r12) / s1, 0.25 * s1, (r01 + r10) / s1, (r02 + r20) / s1], axis=-1),
            np.stack([(r02 - r20) / s2, (r01 + r10) / s2, 0.25 * s2, (r12 + r21) / s2], axis=-1),
            np.stack([(r10 - r01) / s3, (r02 + r20) / s3, (r12 + r21) / s3, 0.25 * s3], axis=-1),
        ],
        axis=-2,
    )
    q = np.take_along_axis(cands, pick[..., None, None], axis=-2)[..., 0, :]
    q = quat_normalize(q)
    return np.where(q[..., :1] < 0, -q, q)


# ---------------------------------------------------------------------------
# Batched exp/log on raw arrays


def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, series 1/2 - theta^2/48 near zero
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * omega], axis=-1)


def so3_exp_matrix(omega: np.ndarray) -> np.ndarray:
    return quat_to_matrix(so3_exp_quat(omega))


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion; angle in ``[0, pi]``.

    The two-argument arctangent stays well conditioned at angle pi, so no
    separate axis-extraction branch is needed there.
    """
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    k = np.where(small, 2.0 / np.where(small, w, 1.0), 2.0 * np.arctan2(n, w) / safe_n)
    return k[..., None] * v


def so3_log_matrix(R: np.ndarray) -> np.ndarray:
    return so3_log_quat(matrix_to_quat(R))


def _v_coefficients(theta: np.ndarray):
    """Coefficients ``(B, C)`` of ``V = I + B K + C K^2`` with ``K = hat(omega)``."""
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    B = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * np.sin(0.5 * safe) ** 2 / safe**2)
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / safe**3)
    return B, C


def left_jacobian_so3(omega: np.ndarray) -> np.ndarray:
    """The matrix ``V(omega)`` mapping twist translation to pose translation."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    B, C = _v_coefficients(theta)
    K = hat(omega)
    return np.eye(3) + B[..., None, None] * K + C[..., None, None] * (K @ K)


def left_jacobian_so3_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    D = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = hat(omega)
    return np.eye(3) - 0.5 * K + D[..., None, None] * (K @ K)


def se3_exp_arrays(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched exponential: ``(..., 6)`` twists to ``(R, t)`` arrays."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, omega = xi[..., :3], xi[..., 3:]
    R = so3_exp_matrix(omega)
    t = np.einsum("...ij,...j->...i", left_jacobian_so3(omega), rho)
    return R, t


def se3_log_arrays(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Batched logarithm of ``(R, t)`` arrays to ``(..., 6)`` twists."""
    omega = so3_log_matrix(R)
    theta = np.linalg.norm(omega, axis=-1)
    if np.any(theta > np.pi - SINGULAR_MARGIN):
        raise NearSingularRotation(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    rho = np.einsum("...ij,...j->...i", left_jacobian_so3_inv(omega), np.asarray(t, dtype=np.float64))
    return np.concatenate([rho, omega], axis=-1)


def compose_arrays(Ra, ta, Rb, tb):
    """``(Ra, ta) * (Rb, tb)`` with broadcasting."""
    return Ra @ Rb, np.einsum("...ij,...j->...i", Ra, tb) + ta


def inverse_arrays(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def adjoint_matrix(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """6x6 adjoint for ``(rho, omega)`` twists: ``T exp(x) T^-1 = exp(Ad x)``."""
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = hat(t) @ R
    out[..., 3:, 3:] = R
    return out


# ---------------------------------------------------------------------------
# Value types


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``; renormalised on construction."""

    quat: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.quat, dtype=np.float64).reshape(4))
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "Rotation":
        return cls(matrix_to_quat(R))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def inverse(self) -> "Rotation":
        return Rotation(self.quat * np.array([1.0, -1.0, -1.0, -1.0]))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(p, dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_arrays(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(R), t)

    @classmethod
    def from_qt(cls, qt: Sequence[float]) -> "Pose":
        """From a flat ``(qw, qx, qy, qz, tx, ty, tz)`` record."""
        qt = np.asarray(qt, dtype=np.float64)
        return cls(Rotation(qt[:4]), qt[4:7])

    def to_qt(self) -> np.ndarray:
        return np.concatenate([self.rotation.quat, self.translation])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rotation.matrix(), np.array(self.translation)

    def inverse(self) -> "Pose":
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation.apply(other.translation) + self.translation)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return apply_pose(self, p)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol))


def so3_exp(omega: np.ndarray) -> Rotation:
    return Rotation(so3_exp_quat(np.asarray(omega, dtype=np.float64).reshape(3)))


def so3_log(R: Rotation | np.ndarray) -> np.ndarray:
    if isinstance(R, Rotation):
        return so3_log_quat(R.quat)
    return so3_log_matrix(np.asarray(R, dtype=np.float64).reshape(3, 3))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rot = so3_exp(xi[3:])
    return Pose(rot, left_jacobian_so3(xi[3:]) @ xi[:3])


def se3_log(T: Pose) -> np.ndarray:
    omega = so3_log(T.rotation)
    theta = float(np.linalg.norm(omega))
    if theta > np.pi - SINGULAR_MARGIN:
        raise NearSingularRotation(f"rotation angle {theta:.9f} too close to pi")
    return np.concatenate([left_jacobian_so3_inv(omega) @ T.translation, omega])


def apply_pose(T: Pose, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ T.rotation.matrix().T + T.translation


# ---------------------------------------------------------------------------
# Trajectory interpolation

LINEAR = "linear"
SPLINE = "spline"
BEZIER = "bezier"
_KINDS = (LINEAR, SPLINE, BEZIER)


@dataclass(frozen=True)
class TrajectoryScheme:
    """Interpolation scheme for an exposure trajectory.

    ``linear`` interpolates two endpoints along the SE(3) geodesic.  ``spline``
    (interpolating cubic, knots equally spaced) and ``bezier`` use
    ``n_controls`` control poses in cumulative-basis form.
    """

    kind: str = LINEAR
    n_controls: int = 4

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown trajectory scheme {self.kind!r}; expected one of {_KINDS}")
        if self.kind != LINEAR and self.n_controls < 2:
            raise ValueError("spline and bezier schemes need at least 2 control poses")

    @property
    def control_count(self) -> int:
        return 2 if self.kind == LINEAR else self.n_controls

    @classmethod
    def parse(cls, text: str) -> "TrajectoryScheme":
        """Parse ``linear``, ``spline``, ``bezier`` or ``bezier:5`` style names."""
        name, _, count = text.strip().lower().partition(":")
        return cls(name, int(count) if count else 4)

    def __str__(self) -> str:
        return self.kind if self.kind == LINEAR else f"{self.kind}:{self.n_controls}"


def _lagrange_basis(s: np.ndarray, k: int) -> np.ndarray:
    nodes = np.linspace(0.0, 1.0, k)
    out = np.ones(s.shape + (k,))
    for j in range(k):
        for m in range(k):
            if m != j:
                out[..., j] *= (s - nodes[m]) / (nodes[j] - nodes[m])
    return out


def _bernstein_basis(s: np.ndarray, k: int) -> np.ndarray:
    deg = k - 1
    return np.stack([comb(deg, j) * s**j * (1.0 - s) ** (deg - j) for j in range(k)], axis=-1)


def cumulative_basis(kind: str, s: np.ndarray, k: int) -> np.ndarray:
    """Cumulative blending weights, shape ``s.shape + (k - 1,)``.

    Entry ``j - 1`` multiplies ``log(T_{j-1}^-1 T_j)``.  Weights are 0 at
    ``s = 0`` and 1 at ``s = 1`` for every scheme.
    """
    s = np.asarray(s, dtype=np.float64)
    if kind == LINEAR or k == 2:
        return s[..., None] * np.ones(k - 1)
    basis = _lagrange_basis(s, k) if kind == SPLINE else _bernstein_basis(s, k)
    # reversed cumulative sum over control index: B~_j = sum_{m >= j} B_m
    return np.cumsum(basis[..., ::-1], axis=-1)[..., ::-1][..., 1:]


def sample_controls(Rs: np.ndarray, ts: np.ndarray, s: np.ndarray, kind: str):
    """Evaluate a trajectory at parameters ``s``.

    Args:
        Rs: control rotations ``(..., k, 3, 3)``.
        ts: control translations ``(..., k, 3)``.
        s: sample parameters ``(n,)`` in ``[0, 1]``.
        kind: scheme kind.

    Returns:
        ``(R, t)`` of shapes ``(..., n, 3, 3)`` and ``(..., n, 3)``.
    """
    s = np.asarray(s, dtype=np.float64)
    k = Rs.shape[-3]
    Rinv, tinv = inverse_arrays(Rs[..., :-1, :, :], ts[..., :-1, :])
    dR, dt = compose_arrays(Rinv, tinv, Rs[..., 1:, :, :], ts[..., 1:, :])
    incr = se3_log_arrays(dR, dt)  # (..., k-1, 6)
    weights = cumulative_basis(kind, s, k)  # (n, k-1)
    R = np.broadcast_to(Rs[..., :1, :, :], Rs.shape[:-3] + (s.shape[0], 3, 3)).copy()
    t = np.broadcast_to(ts[..., :1, :], ts.shape[:-2] + (s.shape[0], 3)).copy()
    for j in range(k - 1):
        xi = weights[:, j, None] * incr[..., j, None, :]
        eR, et = se3_exp_arrays(xi)
        R, t = compose_arrays(R, t, eR, et)
    # exact endpoints irrespective of exp/log round-off
    at0 = s == 0.0
    at1 = s == 1.0
    R[..., at0, :, :] = Rs[..., :1, :, :]
    t[..., at0, :] = ts[..., :1, :]
    R[..., at1, :, :] = Rs[..., -1:, :, :]
    t[..., at1, :] = ts[..., -1:, :]
    return R, t


def interpolate_controls(controls: Sequence[Pose], s: float, scheme: TrajectoryScheme) -> Pose:
    if not 0.0 <= s <= 1.0:
        raise ParameterOutOfRange(f"interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return controls[0]
    if s == 1.0:
        return controls[-1]
    Rs = np.stack([c.rotation.matrix() for c in controls])
    ts = np.stack([c.translation for c in controls])
    R, t = sample_controls(Rs, ts, np.array([s]), scheme.kind)
    return Pose.from_arrays(R[0], t[0])


def geodesic_controls(T_start: Pose, T_end: Pose, k: int) -> list[Pose]:
    """``k`` poses equally spaced along the geodesic from ``T_start`` to ``T_end``."""
    xi = se3_log(T_start.inverse() @ T_end)
    return [T_start @ se3_exp(xi * (j / (k - 1))) for j in range(k)]


def interpolate_pose(T_start: Pose, T_end: Pose, s: float, scheme: TrajectoryScheme | None = None) -> Pose:
    """Pose at parameter ``s`` of the exposure between two endpoints.

    For spline/Bezier schemes the control poses are placed on the geodesic,
    which reproduces the linear trajectory.
    """
    scheme = scheme or TrajectoryScheme()
    if not 0.0 <= s <= 1.0:
        raise ParameterOutOfRange(f"interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return T_start
    if s == 1.0:
        return T_end
    if scheme.kind == LINEAR:
        return T_start @ se3_exp(s * se3_log(T_start.inverse() @ T_end))
    return interpolate_controls(geodesic_controls(T_start, T_end, scheme.n_controls), s, scheme)
