"""Blurred-image formation from subframe renders along an exposure trajectory.

A blurred image is the softmax-weighted sum of ``n`` sharp renders taken at
evenly spaced parameters ``s_i = i / (n - 1)`` along the trajectory.

Two parameterisations share one trajectory type:

* pose stage: the controls are world-to-camera poses and subframe ``i``
  is rendered from ``interp(controls, s_i)``;
* rigid stage: the controls are rigid scene transforms ``M`` and the camera
  is frozen at ``anchor``.  Moving every Gaussian by ``M`` and viewing from
  ``anchor`` is the same as viewing the unmoved scene from ``anchor @ M``,
  which is the pose actually handed to the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .lie import Pose, TrajectoryScheme
from .rasterizer import CameraIntrinsics, RenderGraph, render
from .scene import Scene

POSE_STAGE = 1
RIGID_STAGE = 2

# central-difference step for the control -> subframe pose Jacobian
JACOBIAN_STEP = 1e-6


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def sample_parameters(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one subframe")
    if n == 1:
        return np.array([0.5])
    return np.arange(n) / (n - 1)


@dataclass
class BlurTrajectory:
    """Exposure trajectory of one training image.

    ``quats``/``trans`` hold the ``k`` control poses (``k = 2`` endpoints for
    the linear scheme).  In the rigid stage ``anchor`` is the frozen
    mid-exposure camera pose and the controls are scene transforms.
    """

    quats: np.ndarray
    trans: np.ndarray
    scheme: TrajectoryScheme = field(default_factory=TrajectoryScheme)
    n_subframes: int = 21
    weight_logits: np.ndarray | None = None
    stage: int = POSE_STAGE
    anchor: Pose | None = None

    def __post_init__(self):
        self.quats = lie.quat_normalize(np.array(self.quats, dtype=np.float64).reshape(-1, 4))
        self.trans = np.array(self.trans, dtype=np.float64).reshape(-1, 3)
        if self.quats.shape[0] != self.scheme.control_count:
            raise ValueError(f"scheme {self.scheme} needs {self.scheme.control_count} controls, "
                             f"got {self.quats.shape[0]}")
        if self.weight_logits is None:
            self.weight_logits = np.zeros(self.n_subframes)
        self.weight_logits = np.array(self.weight_logits, dtype=np.float64).reshape(-1)
        if self.weight_logits.shape[0] != self.n_subframes:
            raise ValueError("one weight logit per subframe required")
        if self.stage == RIGID_STAGE and self.anchor is None:
            raise ValueError("rigid-stage trajectories need an anchor pose")

    @classmethod
    def from_endpoints(cls, start: Pose, end: Pose, scheme: TrajectoryScheme | None = None,
                       n_subframes: int = 21, **kw) -> "BlurTrajectory":
        scheme = scheme or TrajectoryScheme()
        ctrls = [start, end] if scheme.kind == lie.LINEAR else lie.geodesic_controls(start, end, scheme.n_controls)
        return cls(np.stack([c.rotation.quat for c in ctrls]), np.stack([c.translation for c in ctrls]),
                   scheme, n_subframes, **kw)

    @classmethod
    def static(cls, pose: Pose, n_subframes: int = 1, scheme: TrajectoryScheme | None = None) -> "BlurTrajectory":
        return cls.from_endpoints(pose, pose, scheme, n_subframes)

    def copy(self) -> "BlurTrajectory":
        return BlurTrajectory(self.quats.copy(), self.trans.copy(), self.scheme, self.n_subframes,
                              self.weight_logits.copy(), self.stage, self.anchor)

    @property
    def controls(self) -> list[Pose]:
        return [Pose(lie.Rotation(q), t) for q, t in zip(self.quats, self.trans)]

    @property
    def endpoints(self) -> tuple[Pose, Pose]:
        c = self.controls
        return c[0], c[-1]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.weight_logits)

    @property
    def sample_params(self) -> np.ndarray:
        return sample_parameters(self.n_subframes)

    def control_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return lie.quat_to_matrix(self.quats), self.trans.copy()

    def camera_arrays(self, s=None) -> tuple[np.ndarray, np.ndarray]:
        """Effective world-to-camera poses ``(R (n,3,3), t (n,3))`` at ``s``."""
        s = self.sample_params if s is None else np.atleast_1d(np.asarray(s, dtype=np.float64))
        Rs, ts = self.control_arrays()
        R, t = _effective(Rs, ts, s, self.scheme.kind, self.anchor)
        return R, t

    def mid_pose(self) -> Pose:
        R, t = self.camera_arrays(0.5)
        return Pose.from_arrays(R[0], t[0])

    def retract(self, twists: np.ndarray) -> None:
        """Left-multiplicative update ``T_j <- exp(twist_j) T_j`` of every control."""
        R, t = self.control_arrays()
        eR, et = lie.se3_exp_arrays(np.asarray(twists, dtype=np.float64).reshape(-1, 6))
        R, t = lie.compose_arrays(eR, et, R, t)
        self.quats = lie.matrix_to_quat(R)
        self.trans = t

    def to_rigid(self) -> "BlurTrajectory":
        """Freeze the mid-exposure camera and re-express the controls as scene transforms.

        With ``M_j = anchor^-1 T_j`` the effective camera poses ``anchor @ M(s)``
        reproduce the pose-stage trajectory, so the loss is unchanged.
        """
        if self.stage == RIGID_STAGE:
            return self.copy()
        anchor = self.mid_pose()
        aR, at = anchor.arrays()
        iR, it = lie.inverse_arrays(aR, at)
        R, t = lie.compose_arrays(iR, it, *self.control_arrays())
        return BlurTrajectory(lie.matrix_to_quat(R), t, self.scheme, self.n_subframes,
                              self.weight_logits.copy(), RIGID_STAGE, anchor)


def _effective(Rs, ts, s, kind, anchor):
    R, t = lie.sample_controls(Rs, ts, s, kind)
    if anchor is not None:
        aR, at = anchor.arrays()
        R, t = lie.compose_arrays(aR, at, R, t)
    return R, t


def control_jacobians(traj: BlurTrajectory) -> np.ndarray:
    """``J[i, j]`` (6x6): left perturbation of control ``j`` -> of subframe camera ``i``.

    Central differences on the interpolation map; the map is smooth and cheap,
    and this keeps every scheme on one code path.
    """
    Rs, ts = traj.control_arrays()
    s = traj.sample_params
    k = Rs.shape[0]
    h = JACOBIAN_STEP
    eps = np.zeros((2, k, 6, k, 6))
    for j in range(k):
        for d in range(6):
            eps[0, j, d, j, d] = h
            eps[1, j, d, j, d] = -h
    eps = eps.reshape(-1, k, 6)
    eR, et = lie.se3_exp_arrays(eps)
    pR, pt = lie.compose_arrays(eR, et, Rs[None], ts[None])  # (2*k*6, k, ...)
    R0, t0 = _effective(Rs, ts, s, traj.scheme.kind, traj.anchor)
    Rp, tp = _effective(pR, pt, s, traj.scheme.kind, traj.anchor)  # (B, n, ...)
    iR, it = lie.inverse_arrays(R0, t0)
    dR, dt = lie.compose_arrays(Rp, tp, iR[None], it[None])
    delta = lie.se3_log_arrays(dR, dt).reshape(2, k, 6, -1, 6)  # (+/-, j, d, i, 6)
    jac = (delta[0] - delta[1]) / (2 * h)  # (j, d, i, e)
    return np.transpose(jac, (2, 0, 3, 1))  # (i, j, e, d)


def control_gradients(traj: BlurTrajectory, subframe_pose_grads: np.ndarray) -> np.ndarray:
    """Pull per-subframe camera twist gradients back to the ``k`` controls."""
    jac = control_jacobians(traj)
    return np.einsum("ijed,ie->jd", jac, np.asarray(subframe_pose_grads, dtype=np.float64))


def sample_trajectory(traj: BlurTrajectory) -> list[Pose]:
    """Effective camera poses of the ``n`` subframes."""
    R, t = traj.camera_arrays()
    return [Pose.from_arrays(r, v) for r, v in zip(R, t)]


@dataclass
class SubframeStack:
    images: np.ndarray  # (n, H, W, 3)
    graphs: list[RenderGraph]
    params: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.graphs)


def synthesize_blur(scene: Scene, traj: BlurTrajectory, K: CameraIntrinsics, background=None):
    """Render every subframe and blend them with the trajectory weights.

    Returns:
        ``(blurred, stack)``.
    """
    R, t = traj.camera_arrays()
    images = []
    graphs = []
    for Ri, ti in zip(R, t):
        img, graph = render(scene, (Ri, ti), K, background)
        images.append(img)
        graphs.append(graph)
    images = np.stack(images)
    w = traj.weights
    blurred = blend(images, w)
    return blurred, SubframeStack(images, graphs, traj.sample_params, w)


def blend(images: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_i w_i C_i`` accumulated in subframe order.

    Equal weights reduce to the plain frame average, computed as such so it
    matches ``images.mean(axis=0)`` exactly.
    """
    if np.all(weights == weights[0]):
        return np.add.reduce(images, axis=0) / len(weights)
    out = weights[0] * images[0]
    for i in range(1, len(weights)):
        out = out + weights[i] * images[i]
    return out


def softmax_backward(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    return weights * (dweights - np.dot(weights, dweights))


def blur_backward(stack: SubframeStack | np.ndarray, weights: np.ndarray, dL_dblur: np.ndarray):
    """Adjoint of :func:`blend` through the softmax.

    Returns:
        ``(dL_dC, dL_dlogits)`` with ``dL_dC[i] = w_i dL_dblur``.
    """
    images = stack.images if isinstance(stack, SubframeStack) else np.asarray(stack)
    weights = np.asarray(weights, dtype=np.float64)
    dC = weights[:, None, None, None] * dL_dblur[None]
    dw = np.einsum("nhwc,hwc->n", images, dL_dblur)
    return dC, softmax_backward(weights, dw)
