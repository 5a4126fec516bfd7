"""Tile-based differentiable rasterizer for Gaussian scenes.

The forward pass projects every primitive with the EWA affine approximation,
sorts them globally by camera depth (stable, so ties keep insertion order),
bins them into 16x16 pixel tiles and alpha-composites front to back.  A
primitive's screen bounding box is the exact box of the ellipse on which its
alpha drops to 1/255, so tiling never changes the image, only the cost.

Gradients for the Gaussian parameters are the exact adjoint of the forward
pass.  The camera-pose gradient only follows the projected centers: the
dependence of the projected covariance on the pose is deliberately dropped.
Pose gradients are left-perturbation twists ``(rho, omega)`` of the
world-to-camera pose.

Per-tile gradient partials are merged in a fixed tile order, so results are
bit-identical for any number of worker threads.  ``BSGS_THREADS`` caps the
worker count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

# the pool size is fixed when numba starts, so the cap must be in place first
if os.environ.get("BSGS_THREADS", "").strip():
    os.environ.setdefault("NUMBA_NUM_THREADS", os.environ["BSGS_THREADS"].strip())

import numba as nb  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ShapeMismatch  # noqa: E402
from .lie import Pose  # noqa: E402
from .scene import GaussianPrimitive, Scene  # noqa: E402

TILE = 16
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
# compositing stops once transmittance would drop below this
T_MIN = 1e-4
NEAR_CLIP_FRACTION = 0.01

STATUS_OK = 0
STATUS_NEAR = 1
STATUS_OFFSCREEN = 2
STATUS_TRANSPARENT = 3

# per-primitive pixel-stage gradient layout
_G_MX, _G_MY, _G_CA, _G_CB, _G_CC, _G_OP, _G_R = 0, 1, 2, 3, 4, 5, 6
_NGRAD = 9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    compositing_alpha_peak: float


class _Culled:
    def __repr__(self):
        return "Culled"

    def __bool__(self):
        return False


Culled = _Culled()


@dataclass
class RenderGraph:
    """Intermediates of one forward render, consumed by :func:`backward`."""

    intrinsics: CameraIntrinsics
    R: np.ndarray
    t: np.ndarray
    background: np.ndarray
    near_clip: float
    scene: Scene
    status: np.ndarray
    cam_means: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    min_power: np.ndarray
    depth: np.ndarray
    bbox: np.ndarray
    order: np.ndarray
    tile_ptr: np.ndarray
    tile_ids: np.ndarray
    final_T: np.ndarray
    last_entry: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        return self.status == STATUS_OK


@dataclass
class SceneGradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    view: np.ndarray  # dL/d(projected center), pixels
    view_jac: np.ndarray  # d(projected center)/d(world center), (G, 2, 3)
    means_cov: np.ndarray  # part of ``means`` reaching the center through the covariance
    visible: np.ndarray = field(default=None)

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "colors")

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
            np.zeros((n, 2)), np.zeros((n, 2, 3)), np.zeros((n, 3)), np.zeros(n, dtype=bool),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.PARAMS}


# ---------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True, nogil=True, inline="always")
def _mm(a, b):
    """Small dense product; numba's ``@`` would dispatch tiny matrices to BLAS."""
    n, m, p = a.shape[0], a.shape[1], b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


@nb.njit(cache=True, nogil=True)
def _quat_rot(qw, qx, qy, qz):
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@nb.njit(cache=True, nogil=True)
def _preprocess(means, quats, log_scales, opacity_logits, Rc, tc, fx, fy, cx, cy, width, height, near,
                status, cam_means, mean2d, cov2d, conic, opacity, min_power, depth, bbox):
    G = means.shape[0]
    for g in range(G):
        mc = np.empty(3)
        for i in range(3):
            mc[i] = Rc[i, 0] * means[g, 0] + Rc[i, 1] * means[g, 1] + Rc[i, 2] * means[g, 2] + tc[i]
            cam_means[g, i] = mc[i]
        depth[g] = mc[2]
        o = 1.0 / (1.0 + np.exp(-opacity_logits[g]))
        opacity[g] = o
        if mc[2] <= near:
            status[g] = STATUS_NEAR
            continue
        x, y, z = mc[0], mc[1], mc[2]
        mean2d[g, 0] = fx * x / z + cx
        mean2d[g, 1] = fy * y / z + cy
        Rq = _quat_rot(quats[g, 0], quats[g, 1], quats[g, 2], quats[g, 3])
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = Rq[i, j] * np.exp(log_scales[g, j])
        S3 = _mm(M, M.T)
        J = np.zeros((2, 3))
        J[0, 0] = fx / z
        J[0, 2] = -fx * x / (z * z)
        J[1, 1] = fy / z
        J[1, 2] = -fy * y / (z * z)
        T = _mm(J, Rc)
        S2 = _mm(_mm(T, S3), T.T)
        a = S2[0, 0] + DILATION
        b = 0.5 * (S2[0, 1] + S2[1, 0])
        c = S2[1, 1] + DILATION
        cov2d[g, 0] = a
        cov2d[g, 1] = b
        cov2d[g, 2] = c
        det = a * c - b * b
        conic[g, 0] = c / det
        conic[g, 1] = -b / det
        conic[g, 2] = a / det
        if o * 255.0 <= 1.0:
            status[g] = STATUS_TRANSPARENT
            continue
        # alpha >= 1/255  <=>  power >= -log(255 o); ellipse box at that level
        mp = -np.log(255.0 * o)
        min_power[g] = mp
        r = np.sqrt(-2.0 * mp)
        ex = r * np.sqrt(a)
        ey = r * np.sqrt(c)
        x0 = int(np.floor(mean2d[g, 0] - ex))
        x1 = int(np.ceil(mean2d[g, 0] + ex))
        y0 = int(np.floor(mean2d[g, 1] - ey))
        y1 = int(np.ceil(mean2d[g, 1] + ey))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, width - 1)
        y1 = min(y1, height - 1)
        if x0 > x1 or y0 > y1:
            status[g] = STATUS_OFFSCREEN
            continue
        bbox[g, 0] = x0
        bbox[g, 1] = y0
        bbox[g, 2] = x1
        bbox[g, 3] = y1
        status[g] = STATUS_OK


@nb.njit(cache=True, nogil=True)
def _bin_tiles(order, bbox, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(bbox[g, 1] // TILE, bbox[g, 3] // TILE + 1):
            for tx in range(bbox[g, 0] // TILE, bbox[g, 2] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(bbox[g, 1] // TILE, bbox[g, 3] // TILE + 1):
            for tx in range(bbox[g, 0] // TILE, bbox[g, 2] // TILE + 1):
                tile = ty * tiles_x + tx
                ids[fill[tile]] = g
                fill[tile] += 1
    return ptr, ids


@nb.njit(cache=True, nogil=True, parallel=True, fastmath=True)
def _forward(tile_ptr, tile_ids, mean2d, conic, opacity, min_power, bbox, colors, bg, width, height,
             tiles_x, image, final_T, last_entry):
    n_tiles = tile_ptr.shape[0] - 1
    for tile in nb.prange(n_tiles):
        tx0 = (tile % tiles_x) * TILE
        ty0 = (tile // tiles_x) * TILE
        tx1 = min(tx0 + TILE, width) - 1
        ty1 = min(ty0 + TILE, height) - 1
        T = np.ones((TILE, TILE))
        acc = np.zeros((TILE, TILE, 3))
        last = np.full((TILE, TILE), -1, dtype=np.int64)
        done = np.zeros((TILE, TILE), dtype=np.bool_)
        for e in range(tile_ptr[tile], tile_ptr[tile + 1]):
            g = tile_ids[e]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            o = opacity[g]
            mp = min_power[g]
            for py in range(max(ty0, bbox[g, 1]), min(ty1, bbox[g, 3]) + 1):
                dy = my - py
                ly = py - ty0
                for px in range(max(tx0, bbox[g, 0]), min(tx1, bbox[g, 2]) + 1):
                    lx = px - tx0
                    if done[ly, lx]:
                        continue
                    dx = mx - px
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power < mp:
                        continue
                    alpha = min(ALPHA_MAX, o * np.exp(power))
                    t = T[ly, lx]
                    t_next = t * (1.0 - alpha)
                    if t_next < T_MIN:
                        done[ly, lx] = True
                        continue
                    w = alpha * t
                    acc[ly, lx, 0] += colors[g, 0] * w
                    acc[ly, lx, 1] += colors[g, 1] * w
                    acc[ly, lx, 2] += colors[g, 2] * w
                    T[ly, lx] = t_next
                    last[ly, lx] = e
        for py in range(ty0, ty1 + 1):
            for px in range(tx0, tx1 + 1):
                ly = py - ty0
                lx = px - tx0
                t = T[ly, lx]
                image[py, px, 0] = acc[ly, lx, 0] + t * bg[0]
                image[py, px, 1] = acc[ly, lx, 1] + t * bg[1]
                image[py, px, 2] = acc[ly, lx, 2] + t * bg[2]
                final_T[py, px] = t
                last_entry[py, px] = last[ly, lx]


@nb.njit(cache=True, nogil=True, parallel=True, fastmath=True)
def _backward_pixels(tile_ptr, tile_ids, mean2d, conic, opacity, min_power, bbox, colors, bg, width,
                     height, tiles_x, final_T, last_entry, dimg, partial):
    n_tiles = tile_ptr.shape[0] - 1
    for tile in nb.prange(n_tiles):
        tx0 = (tile % tiles_x) * TILE
        ty0 = (tile // tiles_x) * TILE
        tx1 = min(tx0 + TILE, width) - 1
        ty1 = min(ty0 + TILE, height) - 1
        # transmittance after, and colour accumulated behind, the current entry
        T = np.ones((TILE, TILE))
        S = np.zeros((TILE, TILE, 3))
        for py in range(ty0, ty1 + 1):
            for px in range(tx0, tx1 + 1):
                t = final_T[py, px]
                T[py - ty0, px - tx0] = t
                S[py - ty0, px - tx0, 0] = t * bg[0]
                S[py - ty0, px - tx0, 1] = t * bg[1]
                S[py - ty0, px - tx0, 2] = t * bg[2]
        for e in range(tile_ptr[tile + 1] - 1, tile_ptr[tile] - 1, -1):
            g = tile_ids[e]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            o = opacity[g]
            mp = min_power[g]
            c0 = colors[g, 0]
            c1 = colors[g, 1]
            c2 = colors[g, 2]
            gmx = 0.0
            gmy = 0.0
            gca = 0.0
            gcb = 0.0
            gcc = 0.0
            gop = 0.0
            gr = 0.0
            gg = 0.0
            gb = 0.0
            for py in range(max(ty0, bbox[g, 1]), min(ty1, bbox[g, 3]) + 1):
                dy = my - py
                ly = py - ty0
                for px in range(max(tx0, bbox[g, 0]), min(tx1, bbox[g, 2]) + 1):
                    if e > last_entry[py, px]:
                        continue
                    dx = mx - px
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power < mp:
                        continue
                    lx = px - tx0
                    ge = np.exp(power)
                    a = o * ge
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    inv = 1.0 / (1.0 - a)
                    Tk = T[ly, lx] * inv
                    T[ly, lx] = Tk
                    w = a * Tk
                    d0 = dimg[py, px, 0]
                    d1 = dimg[py, px, 1]
                    d2 = dimg[py, px, 2]
                    gr += w * d0
                    gg += w * d1
                    gb += w * d2
                    s0 = S[ly, lx, 0]
                    s1 = S[ly, lx, 1]
                    s2 = S[ly, lx, 2]
                    dalpha = d0 * (c0 * Tk - s0 * inv) + d1 * (c1 * Tk - s1 * inv) + d2 * (c2 * Tk - s2 * inv)
                    S[ly, lx, 0] = s0 + c0 * w
                    S[ly, lx, 1] = s1 + c1 * w
                    S[ly, lx, 2] = s2 + c2 * w
                    if clamped:
                        continue
                    gop += dalpha * ge
                    dpower = dalpha * a
                    gmx -= dpower * (ca * dx + cb * dy)
                    gmy -= dpower * (cc * dy + cb * dx)
                    gca -= 0.5 * dpower * dx * dx
                    gcb -= dpower * dx * dy
                    gcc -= 0.5 * dpower * dy * dy
            partial[e, _G_MX] = gmx
            partial[e, _G_MY] = gmy
            partial[e, _G_CA] = gca
            partial[e, _G_CB] = gcb
            partial[e, _G_CC] = gcc
            partial[e, _G_OP] = gop
            partial[e, _G_R] = gr
            partial[e, _G_R + 1] = gg
            partial[e, _G_R + 2] = gb


@nb.njit(cache=True, nogil=True)
def _merge_partials(tile_ids, partial, out):
    for e in range(tile_ids.shape[0]):
        g = tile_ids[e]
        for k in range(_NGRAD):
            out[g, k] += partial[e, k]


@nb.njit(cache=True, nogil=True)
def _preprocess_backward(means, quats, log_scales, Rc, fx, fy, status, cam_means, cov2d, opacity, pix,
                         d_means, d_quats, d_log_scales, d_opacity_logits, d_colors, view, view_jac,
                         means_cov, pose):
    G = means.shape[0]
    for g in range(G):
        if status[g] != STATUS_OK:
            continue
        for k in range(3):
            d_colors[g, k] = pix[g, _G_R + k]
        o = opacity[g]
        d_opacity_logits[g] = pix[g, _G_OP] * o * (1.0 - o)
        x, y, z = cam_means[g, 0], cam_means[g, 1], cam_means[g, 2]
        gmx = pix[g, _G_MX]
        gmy = pix[g, _G_MY]
        view[g, 0] = gmx
        view[g, 1] = gmy
        # center path: mean2d = (fx x/z + cx, fy y/z + cy)
        Jp = np.zeros((2, 3))
        Jp[0, 0] = fx / z
        Jp[0, 2] = -fx * x / (z * z)
        Jp[1, 1] = fy / z
        Jp[1, 2] = -fy * y / (z * z)
        v = np.empty(3)
        for i in range(3):
            v[i] = Jp[0, i] * gmx + Jp[1, i] * gmy
        for r in range(2):
            for i in range(3):
                acc = 0.0
                for k in range(3):
                    acc += Jp[r, k] * Rc[k, i]
                view_jac[g, r, i] = acc
        # pose gradient through the center only: d mc / d(rho, omega) = [I, -hat(mc)]
        pose[0] += v[0]
        pose[1] += v[1]
        pose[2] += v[2]
        pose[3] += y * v[2] - z * v[1]
        pose[4] += z * v[0] - x * v[2]
        pose[5] += x * v[1] - y * v[0]
        # conic -> 2D covariance
        a, b, c = cov2d[g, 0], cov2d[g, 1], cov2d[g, 2]
        det = a * c - b * b
        A = np.empty((2, 2))
        A[0, 0] = c / det
        A[0, 1] = -b / det
        A[1, 0] = -b / det
        A[1, 1] = a / det
        GA = np.empty((2, 2))
        GA[0, 0] = pix[g, _G_CA]
        GA[0, 1] = 0.5 * pix[g, _G_CB]
        GA[1, 0] = 0.5 * pix[g, _G_CB]
        GA[1, 1] = pix[g, _G_CC]
        G2 = -_mm(_mm(A, GA), A)
        # 2D covariance = T S3 T^T with T = J Rc
        Rq = _quat_rot(quats[g, 0], quats[g, 1], quats[g, 2], quats[g, 3])
        s = np.empty(3)
        for j in range(3):
            s[j] = np.exp(log_scales[g, j])
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = Rq[i, j] * s[j]
        S3 = _mm(M, M.T)
        T = _mm(Jp, Rc)
        dT = 2.0 * _mm(_mm(G2, T), S3)
        dS3 = _mm(_mm(T.T, G2), T)
        dJ = _mm(dT, Rc.T)
        dmc = np.empty(3)
        dmc[0] = dJ[0, 2] * (-fx / (z * z))
        dmc[1] = dJ[1, 2] * (-fy / (z * z))
        dmc[2] = (dJ[0, 0] * (-fx / (z * z)) + dJ[0, 2] * (2.0 * fx * x / (z * z * z))
                  + dJ[1, 1] * (-fy / (z * z)) + dJ[1, 2] * (2.0 * fy * y / (z * z * z)))
        for i in range(3):
            cov_i = Rc[0, i] * dmc[0] + Rc[1, i] * dmc[1] + Rc[2, i] * dmc[2]
            ctr_i = Rc[0, i] * v[0] + Rc[1, i] * v[1] + Rc[2, i] * v[2]
            means_cov[g, i] = cov_i
            d_means[g, i] = ctr_i + cov_i
        # S3 = M M^T, M = Rq diag(s)
        dM = 2.0 * _mm(dS3, M)
        GR = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                GR[i, j] = dM[i, j] * s[j]
        for j in range(3):
            ds = dM[0, j] * Rq[0, j] + dM[1, j] * Rq[1, j] + dM[2, j] * Rq[2, j]
            d_log_scales[g, j] = ds * s[j]
        qn = np.sqrt(quats[g, 0] ** 2 + quats[g, 1] ** 2 + quats[g, 2] ** 2 + quats[g, 3] ** 2)
        w, qx, qy, qz = quats[g, 0] / qn, quats[g, 1] / qn, quats[g, 2] / qn, quats[g, 3] / qn
        dq = np.empty(4)
        dq[0] = 2 * (-qz * GR[0, 1] + qy * GR[0, 2] + qz * GR[1, 0] - qx * GR[1, 2] - qy * GR[2, 0] + qx * GR[2, 1])
        dq[1] = 2 * (qy * GR[0, 1] + qz * GR[0, 2] + qy * GR[1, 0] - 2 * qx * GR[1, 1] - w * GR[1, 2]
                     + qz * GR[2, 0] + w * GR[2, 1] - 2 * qx * GR[2, 2])
        dq[2] = 2 * (-2 * qy * GR[0, 0] + qx * GR[0, 1] + w * GR[0, 2] + qx * GR[1, 0] + qz * GR[1, 2]
                     - w * GR[2, 0] + qz * GR[2, 1] - 2 * qy * GR[2, 2])
        dq[3] = 2 * (-2 * qz * GR[0, 0] - w * GR[0, 1] + qx * GR[0, 2] + w * GR[1, 0] - 2 * qz * GR[1, 1]
                     + qy * GR[1, 2] + qx * GR[2, 0] + qy * GR[2, 1])
        # through the normalisation q / |q|
        qhat = (w, qx, qy, qz)
        dot = dq[0] * w + dq[1] * qx + dq[2] * qy + dq[3] * qz
        for k in range(4):
            d_quats[g, k] = (dq[k] - qhat[k] * dot) / qn


# ---------------------------------------------------------------------------
# public API


def default_near_clip(scene: Scene) -> float:
    return NEAR_CLIP_FRACTION * scene.scene_extent


def _pose_arrays(T_cam) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(T_cam, Pose):
        R, t = T_cam.arrays()
    else:
        R, t = T_cam
    return np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64)


def _project_all(scene: Scene, R, t, K: CameraIntrinsics, near: float):
    G = len(scene)
    status = np.zeros(G, dtype=np.int64)
    cam_means = np.zeros((G, 3))
    mean2d = np.zeros((G, 2))
    cov2d = np.zeros((G, 3))
    conic = np.zeros((G, 3))
    opacity = np.zeros(G)
    min_power = np.zeros(G)
    depth = np.zeros(G)
    bbox = np.zeros((G, 4), dtype=np.int64)
    _preprocess(scene.means, scene.quats, scene.log_scales, scene.opacity_logits, R, t,
                float(K.fx), float(K.fy), float(K.cx), float(K.cy), int(K.width), int(K.height), float(near),
                status, cam_means, mean2d, cov2d, conic, opacity, min_power, depth, bbox)
    return status, cam_means, mean2d, cov2d, conic, opacity, min_power, depth, bbox


def project_gaussian(g: GaussianPrimitive, T_cam, K: CameraIntrinsics, near_clip: float = 0.01):
    """Project one primitive; returns :data:`Culled` when it is behind the near plane."""
    scene = Scene.from_primitives([g], 1.0)
    R, t = _pose_arrays(T_cam)
    status, _, mean2d, cov2d, _, opacity, _, depth, _ = _project_all(scene, R, t, K, near_clip)
    if status[0] == STATUS_NEAR:
        return Culled
    a, b, c = cov2d[0]
    return ProjectedGaussian(mean2d[0].copy(), np.array([[a, b], [b, c]]), float(depth[0]),
                             float(min(ALPHA_MAX, opacity[0])))


def render(scene: Scene, T_cam, K: CameraIntrinsics, background=None, near_clip: float | None = None):
    """Render ``scene`` seen from the world-to-camera pose ``T_cam``.

    Returns:
        ``(image, graph)`` with ``image`` a float ``(H, W, 3)`` array.
    """
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    R, t = _pose_arrays(T_cam)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)
    near = default_near_clip(scene) if near_clip is None else float(near_clip)
    status, cam_means, mean2d, cov2d, conic, opacity, min_power, depth, bbox = _project_all(scene, R, t, K, near)
    visible = np.flatnonzero(status == STATUS_OK)
    order = visible[np.argsort(depth[visible], kind="stable")]
    tiles_x = -(-K.width // TILE)
    tiles_y = -(-K.height // TILE)
    tile_ptr, tile_ids = _bin_tiles(order, bbox, tiles_x, tiles_y)
    H, W = K.height, K.width
    image = np.empty((H, W, 3))
    final_T = np.empty((H, W))
    last_entry = np.empty((H, W), dtype=np.int64)
    _forward(tile_ptr, tile_ids, mean2d, conic, opacity, min_power, bbox, scene.colors, bg, W, H, tiles_x,
             image, final_T, last_entry)
    graph = RenderGraph(K, R, t, bg, near, scene, status, cam_means, mean2d, cov2d, conic, opacity, min_power,
                        depth, bbox, order, tile_ptr, tile_ids, final_T, last_entry)
    return image, graph


def backward(graph: RenderGraph, dL_dimage: np.ndarray) -> tuple[SceneGradients, np.ndarray]:
    """Adjoint of :func:`render`.

    Returns:
        ``(grads, pose_grad)``; ``pose_grad`` is the ``(rho, omega)`` gradient
        of a left perturbation ``exp(eps) T_cam``, centers-only.
    """
    K = graph.intrinsics
    dimg = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dimg.shape != (K.height, K.width, 3):
        raise ShapeMismatch(f"image gradient shape {dimg.shape} does not match render {(K.height, K.width, 3)}")
    scene = graph.scene
    G = len(scene)
    tiles_x = -(-K.width // TILE)
    partial = np.zeros((graph.tile_ids.shape[0], _NGRAD))
    _backward_pixels(graph.tile_ptr, graph.tile_ids, graph.mean2d, graph.conic, graph.opacity, graph.min_power,
                     graph.bbox, scene.colors, graph.background, K.width, K.height, tiles_x, graph.final_T,
                     graph.last_entry, dimg, partial)
    pix = np.zeros((G, _NGRAD))
    _merge_partials(graph.tile_ids, partial, pix)
    grads = SceneGradients.zeros(G)
    pose = np.zeros(6)
    _preprocess_backward(scene.means, scene.quats, scene.log_scales, graph.R, float(K.fx), float(K.fy),
                         graph.status, graph.cam_means, graph.cov2d, graph.opacity, pix,
                         grads.means, grads.quats, grads.log_scales, grads.opacity_logits, grads.colors,
                         grads.view, grads.view_jac, grads.means_cov, pose)
    grads.visible = graph.visible
    return grads, pose


def threads_from_env() -> int | None:
    """Apply ``BSGS_THREADS`` (if set) and return the resulting worker count."""
    value = os.environ.get("BSGS_THREADS", "").strip()
    if not value:
        return None
    return set_threads(int(value))


def set_threads(n: int) -> int:
    """Cap the rasterizer worker count; returns the count actually used."""
    n = max(1, min(int(n), nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)
    return n
