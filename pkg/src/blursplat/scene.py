"""Gaussian primitives, the scene container and its binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CheckpointFormatError, InsufficientPoints
from .lie import matrix_to_quat, quat_multiply, quat_normalize, quat_to_matrix

MAGIC = b"BSGS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQd")
RECORD_FLOATS = 14

INIT_OPACITY = 0.1
SCALE_FLOOR = 1e-6


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian; ``rotation`` is a ``(w, x, y, z)`` quaternion."""

    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance_3d(g: GaussianPrimitive) -> np.ndarray:
    """``R diag(exp(2 log_scale)) R^T`` for a single primitive."""
    R = quat_to_matrix(quat_normalize(g.rotation))
    return (R * np.exp(2.0 * np.asarray(g.log_scale, dtype=np.float64))) @ R.T


@dataclass
class Scene:
    """Structure-of-arrays container for ``G`` primitives."""

    means: np.ndarray  # (G, 3)
    quats: np.ndarray  # (G, 4)
    log_scales: np.ndarray  # (G, 3)
    opacity_logits: np.ndarray  # (G,)
    colors: np.ndarray  # (G, 3)
    scene_extent: float

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "colors")

    def __post_init__(self):
        for name in self.PARAMS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.scene_extent = float(self.scene_extent)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.means[i].copy(),
            self.quats[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], scene_extent: float) -> "Scene":
        return cls(
            np.array([p.mean for p in prims]),
            np.array([p.rotation for p in prims]),
            np.array([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.array([p.color for p in prims]),
            scene_extent,
        )

    def copy(self) -> "Scene":
        return Scene(*(getattr(self, n).copy() for n in self.PARAMS), self.scene_extent)

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.PARAMS}

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        R = quat_to_matrix(quat_normalize(self.quats))
        return (R * np.exp(2.0 * self.log_scales)[:, None, :]) @ np.swapaxes(R, 1, 2)

    def select(self, mask: np.ndarray) -> "Scene":
        return Scene(*(getattr(self, n)[mask] for n in self.PARAMS), self.scene_extent)

    def append(self, other: "Scene") -> None:
        for n in self.PARAMS:
            setattr(self, n, np.concatenate([getattr(self, n), getattr(other, n)]))

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "Scene":
        """The scene rigidly moved by ``p -> R p + t`` (rotations follow)."""
        out = self.copy()
        out.means = self.means @ R.T + t
        out.quats = quat_multiply(matrix_to_quat(R), self.quats)
        return out


def bounding_radius(points: np.ndarray) -> float:
    center = points.mean(axis=0)
    return float(np.max(np.linalg.norm(points - center, axis=1)))


def init_scene(points, colors) -> Scene:
    """One isotropic primitive per input point.

    Scales start at the mean distance to the three nearest neighbours,
    floored at ``1e-6 * scene_extent``; opacity starts at 0.1.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    if len(points) < 4:
        raise InsufficientPoints(f"need at least 4 points, got {len(points)}")
    if len(colors) != len(points):
        raise ValueError(f"{len(points)} points but {len(colors)} colors")
    extent = bounding_radius(points)
    if extent <= 0.0:
        # all points coincide; any positive unit keeps the invariants
        extent = 1.0
    dist, _ = cKDTree(points).query(points, k=4)
    mean_nn = dist[:, 1:].mean(axis=1)
    scale = np.maximum(mean_nn, SCALE_FLOOR * extent)
    n = len(points)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return Scene(
        means=points.copy(),
        quats=quats,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(INIT_OPACITY))),
        colors=colors,
        scene_extent=extent,
    )


# ---------------------------------------------------------------------------
# Checkpoint format: "BSGS" | u32 version | u64 count | f64 extent | count x 14 f32


def scene_to_bytes(scene: Scene) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(scene), scene.scene_extent)
    body = np.concatenate(
        [scene.means, scene.quats, scene.log_scales, scene.opacity_logits[:, None], scene.colors], axis=1
    ).astype("<f4")
    return header + body.tobytes()


def scene_from_bytes(data: bytes) -> Scene:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("checkpoint truncated inside header")
    magic, version, count, extent = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    expected = _HEADER.size + count * RECORD_FLOATS * 4
    if len(data) != expected:
        raise CheckpointFormatError(f"checkpoint holds {len(data)} bytes, header implies {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, RECORD_FLOATS).astype(np.float64)
    return Scene(body[:, 0:3], body[:, 3:7], body[:, 7:10], body[:, 10], body[:, 11:14], extent)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())
