"""Plain-text dataset format and the synthetic blur-dataset generator.

Layout of a dataset directory::

    images/<name>          blurred input images (PNG)
    poses.txt              name qw qx qy qz tx ty tz    (world-to-camera)
    points.txt             x y z r g b                 (colours 0-255)
    intrinsics.txt         fx fy cx cy width height
    split.txt              name train|test
    gt/sharp/<name>        optional sharp mid-exposure images
    gt/trajectories.txt    optional: name, start pose (7 numbers), end pose (7 numbers)
    gt/points.txt          optional true points, same format as points.txt

``#`` starts a comment in every text file.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blur import BlurTrajectory, synthesize_blur
from .errors import DatasetMissingComponent, DatasetParseError
from .lie import Pose, Rotation, quat_normalize, se3_exp
from .metrics import load_image, save_image
from .rasterizer import CameraIntrinsics, render
from .scene import Scene, logit

log = logging.getLogger(__name__)

QUAT_TOLERANCE = 0.01
QUAT_WARN = 1e-6


@dataclass
class Dataset:
    root: Path
    names: list[str]
    images: dict[str, np.ndarray]
    poses: dict[str, Pose]
    points: np.ndarray
    colors: np.ndarray  # in [0, 1]
    intrinsics: CameraIntrinsics
    train: list[str]
    test: list[str]
    gt_sharp: dict[str, np.ndarray] = field(default_factory=dict)
    gt_trajectories: dict[str, tuple[Pose, Pose]] = field(default_factory=dict)
    gt_points: np.ndarray | None = None

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.names), len(self.points)


def _lines(path: Path):
    """Yield ``(line_number, tokens)`` for non-empty, non-comment lines."""
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _floats(path, lineno, tokens, count):
    if len(tokens) != count:
        raise DatasetParseError(path, lineno, f"expected {count} fields, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise DatasetParseError(path, lineno, str(exc)) from None
    if not all(np.isfinite(vals)):
        raise DatasetParseError(path, lineno, "non-finite number")
    return vals


def _checked_quat(path, lineno, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUAT_TOLERANCE:
        raise DatasetParseError(path, lineno, f"quaternion norm {norm:.6f} is not close to 1")
    if abs(norm - 1.0) > QUAT_WARN:
        warnings.warn(f"{path}:{lineno}: quaternion norm {norm:.6f} renormalised", stacklevel=3)
    return quat_normalize(q)


def _parse_pose(path, lineno, vals) -> Pose:
    q = _checked_quat(path, lineno, vals[:4])
    return Pose(Rotation(q), np.asarray(vals[4:7]))


def read_poses(path: Path) -> dict[str, Pose]:
    poses = {}
    for lineno, tok in _lines(path):
        name = tok[0]
        if name in poses:
            raise DatasetParseError(path, lineno, f"duplicate pose for {name}")
        poses[name] = _parse_pose(path, lineno, _floats(path, lineno, tok[1:], 7))
    return poses


def read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for lineno, tok in _lines(path):
        row = _floats(path, lineno, tok, 6)
        if not all(0.0 <= c <= 255.0 for c in row[3:]):
            raise DatasetParseError(path, lineno, "colour outside [0, 255]")
        rows.append(row)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:] / 255.0


def read_intrinsics(path: Path) -> CameraIntrinsics:
    rows = list(_lines(path))
    if len(rows) != 1:
        raise DatasetParseError(path, rows[1][0] if rows else 1, "expected exactly one line")
    lineno, tok = rows[0]
    fx, fy, cx, cy, w, h = _floats(path, lineno, tok, 6)
    if not (w.is_integer() and h.is_integer()):
        raise DatasetParseError(path, lineno, "width and height must be integers")
    try:
        return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    except ValueError as exc:
        raise DatasetParseError(path, lineno, str(exc)) from None


def read_split(path: Path, known: dict) -> tuple[list[str], list[str]]:
    train, test = [], []
    for lineno, tok in _lines(path):
        if len(tok) != 2 or tok[1] not in ("train", "test"):
            raise DatasetParseError(path, lineno, "expected 'name train|test'")
        if tok[0] not in known:
            raise DatasetParseError(path, lineno, f"{tok[0]} has no pose")
        (train if tok[1] == "train" else test).append(tok[0])
    return train, test


def read_trajectories(path: Path) -> dict[str, tuple[Pose, Pose]]:
    out = {}
    for lineno, tok in _lines(path):
        vals = _floats(path, lineno, tok[1:], 14)
        out[tok[0]] = (_parse_pose(path, lineno, vals[:7]), _parse_pose(path, lineno, vals[7:]))
    return out


def _require(root: Path, rel: str) -> Path:
    p = root / rel
    if not p.exists():
        raise DatasetMissingComponent(f"dataset {root} is missing {rel}")
    return p


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetMissingComponent(f"dataset directory {root} does not exist")
    img_dir = _require(root, "images")
    poses = read_poses(_require(root, "poses.txt"))
    points, colors = read_points(_require(root, "points.txt"))
    K = read_intrinsics(_require(root, "intrinsics.txt"))
    train, test = read_split(_require(root, "split.txt"), poses)
    names = list(poses)
    images = {}
    for name in names:
        path = img_dir / name
        if not path.exists():
            raise DatasetMissingComponent(f"dataset {root} is missing images/{name}")
        images[name] = _load_checked(path, K)
    ds = Dataset(root, names, images, poses, points, colors, K, train, test)
    sharp_dir = root / "gt" / "sharp"
    if sharp_dir.is_dir():
        ds.gt_sharp = {n: _load_checked(sharp_dir / n, K) for n in names if (sharp_dir / n).exists()}
    if (root / "gt" / "trajectories.txt").exists():
        ds.gt_trajectories = read_trajectories(root / "gt" / "trajectories.txt")
    if (root / "gt" / "points.txt").exists():
        ds.gt_points = read_points(root / "gt" / "points.txt")[0]
    return ds


def _load_checked(path: Path, K: CameraIntrinsics) -> np.ndarray:
    try:
        img = load_image(path)
    except OSError as exc:
        raise DatasetParseError(path, 0, f"cannot decode image: {exc}") from None
    if img.shape[:2] != (K.height, K.width):
        raise DatasetParseError(path, 0, f"image is {img.shape[1]}x{img.shape[0]}, "
                                         f"intrinsics say {K.width}x{K.height}")
    return img


# ---------------------------------------------------------------------------
# Writing


def _fmt(vals) -> str:
    return " ".join(f"{float(v):.17g}" for v in vals)


def write_poses(path: Path, poses: dict[str, Pose]) -> None:
    path.write_text("".join(f"{n} {_fmt(p.to_qt())}\n" for n, p in poses.items()))


def write_points(path: Path, points: np.ndarray, colors: np.ndarray) -> None:
    rgb = np.round(np.clip(colors, 0.0, 1.0) * 255.0)
    path.write_text("".join(f"{_fmt(p)} {_fmt(c)}\n" for p, c in zip(points, rgb)))


def write_intrinsics(path: Path, K: CameraIntrinsics) -> None:
    path.write_text(f"{_fmt([K.fx, K.fy, K.cx, K.cy])} {K.width} {K.height}\n")


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthConfig:
    """Parameters of a synthetic blurred dataset; ``seed`` fixes everything."""

    n_primitives: int = 300
    n_train: int = 24
    n_test: int = 4
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    ring_radius: float = 3.0  # in units of the scene radius
    ring_elevation_deg: float = 15.0
    max_rot_deg: float = 2.0
    max_trans_frac: float = 0.02
    n_frames: int = 9
    pose_noise_rot_deg: float = 0.3
    pose_noise_trans_frac: float = 0.003
    point_noise_frac: float = 0.01
    scale_min: float = 0.01
    scale_max: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.max_rot_deg < 0 or self.max_trans_frac < 0:
            raise ValueError("blur magnitudes must be non-negative")
        if self.n_primitives < 4 or self.n_train < 1 or self.n_frames < 1:
            raise ValueError("synthetic dataset too small")


def random_scene(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    n = cfg.n_primitives
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    means = direction * rng.uniform(0.0, 1.0, n)[:, None] ** (1.0 / 3.0)
    quats = quat_normalize(rng.standard_normal((n, 4)))
    quats *= np.sign(quats[:, :1] + (quats[:, :1] == 0))
    log_scales = rng.uniform(np.log(cfg.scale_min), np.log(cfg.scale_max), (n, 3))
    opac = rng.uniform(0.6, 0.95, n)
    colors = rng.uniform(0.05, 1.0, (n, 3))
    return Scene(means, quats, log_scales, logit(opac), colors, 1.0)


def look_at(center: np.ndarray, target: np.ndarray = np.zeros(3)) -> Pose:
    """World-to-camera pose at ``center`` looking at ``target`` (x right, y down, z forward)."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_arrays(R, -R @ center)


def camera_ring(n: int, radius: float, elevation_deg: float) -> list[Pose]:
    poses = []
    for j in range(n):
        a = 2.0 * np.pi * j / n
        el = np.deg2rad(elevation_deg) * np.sin(3.0 * a)
        c = radius * np.array([np.cos(el) * np.sin(a), -np.sin(el), -np.cos(el) * np.cos(a)])
        poses.append(look_at(c))
    return poses


def _random_twist(rng, max_rot: float, max_trans: float) -> np.ndarray:
    def vec(mag):
        v = rng.standard_normal(3)
        return v / np.linalg.norm(v) * mag * rng.uniform(0.5, 1.0)

    rho = vec(max_trans)
    omega = vec(max_rot)
    return np.concatenate([rho, omega])


def generate_synthetic(cfg: SynthConfig, outdir) -> Dataset:
    """Render a synthetic blurred dataset to ``outdir`` and load it back."""
    out = Path(outdir)
    rng = np.random.default_rng(cfg.seed)
    scene = random_scene(cfg, rng)
    extent = scene.scene_extent
    f = 0.5 * cfg.width / np.tan(np.deg2rad(cfg.fov_deg) / 2.0)
    K = CameraIntrinsics(f, f, cfg.width / 2.0, cfg.height / 2.0, cfg.width, cfg.height)
    n_views = cfg.n_train + cfg.n_test
    mids = camera_ring(n_views, cfg.ring_radius * extent, cfg.ring_elevation_deg)
    # test views are spread evenly through the ring
    test_idx = {int((i + 0.5) * n_views / cfg.n_test) for i in range(cfg.n_test)}

    for sub in ("images", "gt/sharp"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names, split, noisy, trajs = [], [], {}, {}
    for j, mid in enumerate(mids):
        name = f"view_{j:03d}.png"
        xi = _random_twist(rng, np.deg2rad(cfg.max_rot_deg), cfg.max_trans_frac * extent)
        # camera-frame shake: the mid-exposure pose stays on the trajectory midpoint
        start, end = se3_exp(-0.5 * xi) @ mid, se3_exp(0.5 * xi) @ mid
        traj = BlurTrajectory.from_endpoints(start, end, n_subframes=cfg.n_frames)
        blurred, _ = synthesize_blur(scene, traj, K)
        sharp, _ = render(scene, mid, K)
        save_image(blurred, out / "images" / name)
        save_image(sharp, out / "gt" / "sharp" / name)
        noise = np.concatenate([rng.standard_normal(3) * cfg.pose_noise_trans_frac * extent,
                                rng.standard_normal(3) * np.deg2rad(cfg.pose_noise_rot_deg)])
        noisy[name] = se3_exp(noise) @ mid
        trajs[name] = (start, end)
        names.append(name)
        split.append("test" if j in test_idx else "train")

    pts = scene.means + rng.standard_normal(scene.means.shape) * cfg.point_noise_frac * extent
    write_poses(out / "poses.txt", noisy)
    write_points(out / "points.txt", pts, scene.colors)
    write_intrinsics(out / "intrinsics.txt", K)
    (out / "split.txt").write_text("".join(f"{n} {s}\n" for n, s in zip(names, split)))
    (out / "gt" / "trajectories.txt").write_text(
        "".join(f"{n} {_fmt(a.to_qt())} {_fmt(b.to_qt())}\n" for n, (a, b) in trajs.items()))
    write_points(out / "gt" / "points.txt", scene.means, scene.colors)
    log.info("wrote %d views (%d test) to %s", n_views, cfg.n_test, out)
    return load_dataset(out)
