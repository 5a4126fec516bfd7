"""Adaptive density control with depth- and phase-dependent thresholds.

The clone/split/prune mechanics are the usual splatting ones.  What changes
is the gradient threshold: it is raised for primitives close to the camera
(``space_threshold``), lowered as training progresses (``time_threshold``),
and the two modulations multiply (``coupled_threshold``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import quat_normalize, quat_to_matrix
from .scene import Scene, sigmoid

# Image diagonal (pixels) at which ``tau0`` is calibrated.  The statistic is
# rescaled by ``diagonal / REFERENCE_DIAGONAL`` so one threshold serves any
# resolution: small images otherwise push most primitives over it.
REFERENCE_DIAGONAL = 1000.0


@dataclass
class DensifyConfig:
    """Thresholds and schedule of the densification passes.

    ``tau0`` is compared with the norm of the view-space positional gradient
    expressed in normalised device coordinates (pixel gradient times half
    the image size), scaled by the image diagonal over
    ``REFERENCE_DIAGONAL``.  ``beta`` is in units of ``1 / scene_extent``.
    Passes run every ``interval`` iterations from ``start`` to ``until``;
    the defaults cover the first half of a 6000-iteration run.
    """

    tau0: float = 2e-4
    alpha: float = 1.0
    beta: float = 4.0
    gamma: float = 0.5
    eta: float = 0.995
    t_split: int = 0
    interval: int = 100
    start: int = 300
    until: int = 3000
    fixed: bool = False
    clone_fraction: float = 0.01
    split_factor: float = 1.6
    min_opacity: float = 0.005

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if self.gamma >= 1.0:
            raise ValueError("gamma must stay below 1 so the stage-one threshold stays positive")
        if self.interval <= 0:
            raise ValueError("densification interval must be positive")

    def is_pass(self, iteration: int) -> bool:
        """Whether a densification pass runs after ``iteration`` (1-based count of finished steps)."""
        return self.start <= iteration <= self.until and iteration % self.interval == 0


def space_threshold(d, cfg: DensifyConfig):
    """``tau0 * (1 + alpha * exp(-beta * d))`` for normalised depth ``d``."""
    if cfg.fixed:
        return cfg.tau0 if np.ndim(d) == 0 else np.full(np.shape(d), cfg.tau0)
    return cfg.tau0 * (1.0 + cfg.alpha * np.exp(-cfg.beta * np.asarray(d, dtype=np.float64)))


def time_threshold(t, cfg: DensifyConfig) -> float:
    """Linear decay over stage one, geometric decay per interval in stage two.

    Stage one covers iterations ``[0, t_split)`` and uses ``t / t_split``;
    when ``t_split`` is zero there is no stage one.  A run that never enters
    stage two is expressed by ``t_split`` equal to the total iteration count.
    """
    if cfg.fixed:
        return cfg.tau0
    t = float(t)
    if t < cfg.t_split:
        return cfg.tau0 * (1.0 - cfg.gamma * (t / cfg.t_split))
    return cfg.tau0 * cfg.eta ** ((t - cfg.t_split) / cfg.interval)


def coupled_threshold(d, t, cfg: DensifyConfig):
    """``tau0 * (tau_s / tau0) * (tau_t / tau0)``."""
    if cfg.fixed:
        return space_threshold(d, cfg)
    return cfg.tau0 * (space_threshold(d, cfg) / cfg.tau0) * (time_threshold(t, cfg) / cfg.tau0)


@dataclass
class DensifyState:
    """Running per-primitive statistics between two densification passes."""

    grad_accum: np.ndarray
    count: np.ndarray
    depth: np.ndarray
    world_grad: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, n: int) -> "DensifyState":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros((n, 3)))

    def __len__(self) -> int:
        return self.grad_accum.shape[0]

    def reset(self, n: int | None = None) -> None:
        n = len(self) if n is None else n
        self.grad_accum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)
        self.world_grad = np.zeros((n, 3))
        if self.depth.shape[0] != n:
            self.depth = np.zeros(n)

    def update(self, visible: np.ndarray, view_grad: np.ndarray, depth: np.ndarray,
               world_grad: np.ndarray, image_size: tuple[int, int]) -> None:
        """Accumulate one training image.

        Args:
            visible: boolean mask of primitives that reached the image.
            view_grad: ``(G, 2)`` aggregated pixel-space positional gradient.
            depth: ``(G,)`` normalised depth under the mid-exposure pose.
            world_grad: ``(G, 3)`` world-space positional gradient.
            image_size: ``(width, height)``.
        """
        w, h = image_size
        ndc = view_grad * (np.array([0.5 * w, 0.5 * h]) * (np.hypot(w, h) / REFERENCE_DIAGONAL))
        self.grad_accum[visible] += np.linalg.norm(ndc[visible], axis=1)
        self.count[visible] += 1
        self.depth[visible] = depth[visible]
        self.world_grad[visible] += world_grad[visible]

    def mean_grad(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_accum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyResult:
    scene: Scene
    keep: np.ndarray  # mask over the old rows that survive, in order
    n_new: int  # rows appended after the survivors
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def densify_and_prune(scene: Scene, state: DensifyState, cfg: DensifyConfig, t: int,
                      rng: np.random.Generator) -> DensifyResult:
    """One densification pass; resets ``state`` to the new primitive count."""
    n = len(scene)
    if len(state) != n:
        raise ValueError(f"statistics for {len(state)} primitives, scene has {n}")
    grads = state.mean_grad()
    tau = coupled_threshold(state.depth, t, cfg)
    selected = (state.count > 0) & (grads > tau)
    max_scale = scene.scales.max(axis=1)
    small = max_scale <= cfg.clone_fraction * scene.scene_extent
    clone = selected & small
    split = selected & ~small

    # clones step half a sigma down the accumulated positional gradient
    cloned = scene.select(clone)
    g = state.world_grad[clone]
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    direction = np.where(gn > 0, -g / np.where(gn > 0, gn, 1.0), 0.0)
    cloned.means = cloned.means + 0.5 * max_scale[clone][:, None] * direction

    # each split parent becomes two children sampled from its own density
    parents = scene.select(split)
    m = len(parents)
    R = quat_to_matrix(quat_normalize(parents.quats))
    children = []
    for _ in range(2):
        z = rng.standard_normal((m, 3)) * parents.scales
        child = parents.copy()
        child.means = parents.means + np.einsum("gij,gj->gi", R, z)
        child.log_scales = parents.log_scales - np.log(cfg.split_factor)
        children.append(child)

    new = cloned
    for c in children:
        new.append(c)

    keep_old = ~split
    alive_old = sigmoid(scene.opacity_logits) >= cfg.min_opacity
    alive_new = sigmoid(new.opacity_logits) >= cfg.min_opacity
    pruned = int(np.count_nonzero(keep_old & ~alive_old) + np.count_nonzero(~alive_new))
    keep_old &= alive_old
    new = new.select(alive_new)
    out = scene.select(keep_old)
    out.append(new)
    state.reset(len(out))
    return DensifyResult(out, keep_old, len(new), int(clone.sum()), int(split.sum()), pruned, selected)
