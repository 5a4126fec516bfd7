"""Two-stage optimisation of a Gaussian scene from motion-blurred images.

Stage one learns the scene together with every image's exposure trajectory
(its control poses) and subframe weights.  Stage two freezes each image's
mid-exposure camera and instead learns a per-image rigid transform of the
scene along the exposure, which is equivalent to moving the camera about
the frozen anchor but keeps the anchor itself untouched.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation
from .blur import POSE_STAGE, RIGID_STAGE, BlurTrajectory, blur_backward, control_gradients, synthesize_blur
from .config import dump
from .data import Dataset, write_intrinsics, write_poses
from .densify import DensifyConfig, DensifyState, densify_and_prune
from .errors import DivergedTraining
from .lie import Pose, TrajectoryScheme, se3_exp
from .losses import photometric_loss
from .metrics import psnr, save_image, ssim
from .optim import EPS, Adam, AdamState, lr_at
from .rasterizer import CameraIntrinsics, backward, render
from .scene import Scene, init_scene, save_scene

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "loss", "psnr", "ssim", "primitive_count")


@dataclass
class TrainConfig:
    """Every knob of a training run; all fields are valid config-file keys."""

    iterations: int = 6000
    stage1_fraction: float = 0.4
    stage1_only: bool = False
    naive: bool = False
    lam: float = 0.2
    n_subframes: int = 21
    scheme: str = "linear"
    aggregation: str = "max"
    topk: int = 3
    pose_lr_init: float = 1e-3
    pose_lr_final: float = 1e-5
    rigid_lr_init: float = 1e-3
    rigid_lr_final: float = 1e-5
    weight_lr: float = 1e-2
    lr_means: float = 1.6e-4  # times scene extent
    lr_means_final: float = 1.6e-6
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    traj_init_noise: float = 1e-4
    eval_pose_iters: int = 100
    log_interval: int = 100
    seed: int = 0
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.iterations < 1 or self.n_subframes < 1:
            raise ValueError("iterations and n_subframes must be positive")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must lie in [0, 1]")
        if self.aggregation not in aggregation.MODES:
            raise ValueError(f"aggregation must be one of {aggregation.MODES}")
        TrajectoryScheme.parse(self.scheme)

    @property
    def t_split(self) -> int:
        if self.stage1_only or self.naive:
            return self.iterations
        return int(round(self.stage1_fraction * self.iterations))

    @property
    def subframes(self) -> int:
        return 1 if self.naive else self.n_subframes

    def densify_config(self) -> DensifyConfig:
        return dataclasses.replace(self.densify, t_split=self.t_split, fixed=self.densify.fixed or self.naive)


@dataclass
class TrainState:
    scene: Scene
    trajectories: dict[str, BlurTrajectory]
    scene_opt: Adam
    pose_opt: dict[str, AdamState]
    weight_opt: dict[str, AdamState]
    densify: DensifyState
    rng: np.random.Generator
    iteration: int = 0
    stage: int = POSE_STAGE
    order: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def snapshot(self) -> dict:
        return {"scene": self.scene.copy(), "trajectories": {n: t.copy() for n, t in self.trajectories.items()},
                "iteration": self.iteration, "stage": self.stage}


def init_state(ds: Dataset, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    scene = init_scene(ds.points, ds.colors)
    scheme = TrajectoryScheme.parse(cfg.scheme)
    trajs = {}
    for name in ds.train:
        pose = ds.poses[name]
        if cfg.naive:
            trajs[name] = BlurTrajectory.static(pose, 1, scheme)
            continue
        # a tiny symmetric opening lets the two endpoints receive different gradients
        xi = rng.standard_normal(6) * cfg.traj_init_noise * np.r_[np.full(3, scene.scene_extent), np.ones(3)]
        start, end = se3_exp(-0.5 * xi) @ pose, se3_exp(0.5 * xi) @ pose
        trajs[name] = BlurTrajectory.from_endpoints(start, end, scheme, cfg.subframes)
    k = scheme.control_count
    return TrainState(
        scene=scene,
        trajectories=trajs,
        scene_opt=Adam(scene.params()),
        pose_opt={n: AdamState((k, 6)) for n in trajs},
        weight_opt={n: AdamState((cfg.subframes,)) for n in trajs},
        densify=DensifyState.empty(len(scene)),
        rng=rng,
    )


def scene_lrs(cfg: TrainConfig, it: int, extent: float) -> dict[str, float]:
    return {
        "means": lr_at(it, cfg.iterations, cfg.lr_means * extent, cfg.lr_means_final * extent),
        "quats": cfg.lr_quats,
        "log_scales": cfg.lr_scales,
        "opacity_logits": cfg.lr_opacity,
        "colors": cfg.lr_colors,
    }


def probe_loss(scene: Scene, traj: BlurTrajectory, target: np.ndarray, K: CameraIntrinsics, lam: float) -> float:
    """Loss of one image under the given parameters; touches no state."""
    blurred, _ = synthesize_blur(scene, traj, K)
    return photometric_loss(blurred, target, lam)[0]


@dataclass
class StepResult:
    loss: float
    blurred: np.ndarray


def train_step(state: TrainState, ds: Dataset, cfg: TrainConfig, name: str) -> StepResult:
    """One optimisation step on training image ``name``."""
    scene, traj, K = state.scene, state.trajectories[name], ds.intrinsics
    target = ds.images[name]
    blurred, stack = synthesize_blur(scene, traj, K)
    loss, dB = photometric_loss(blurred, target, cfg.lam)
    if not np.isfinite(loss):
        raise DivergedTraining(f"non-finite loss at iteration {state.iteration} on {name}", state.snapshot())
    dC, dlogits = blur_backward(stack, stack.weights, dB)

    n, G = len(stack), len(scene)
    total = {p: np.zeros_like(getattr(scene, p)) for p in Scene.PARAMS}
    views = np.zeros((n, G, 2))
    jacs = np.zeros((n, G, 2, 3))
    visible = np.zeros(G, dtype=bool)
    pose_grads = np.zeros((n, 6))
    for i, graph in enumerate(stack.graphs):
        g, pose_grads[i] = backward(graph, dC[i])
        for p in ("quats", "log_scales", "opacity_logits", "colors"):
            total[p] += getattr(g, p)
        total["means"] += g.means_cov
        views[i] = g.view
        jacs[i] = g.view_jac
        visible |= g.visible

    # positional gradient: aggregated per component, then routed to world space
    sel = aggregation.selection_weights(views, cfg.aggregation, cfg.topk)
    weighted = n * sel * views
    total["means"] += np.einsum("igc,igcd->gd", weighted, jacs)
    agg2d = weighted.sum(axis=0)

    mid = traj.mid_pose()
    depth = (scene.means @ mid.rotation.matrix()[2] + mid.translation[2]) / scene.scene_extent
    state.densify.update(visible, agg2d, depth, total["means"], (K.width, K.height))

    it = state.iteration
    state.scene_opt.step(scene.params(), total, scene_lrs(cfg, it, scene.scene_extent))
    np.clip(scene.colors, 0.0, 1.0, out=scene.colors)

    if not cfg.naive:
        if state.stage == POSE_STAGE:
            lr = lr_at(it, cfg.iterations, cfg.pose_lr_init, cfg.pose_lr_final)
        else:
            lr = lr_at(it, cfg.iterations, cfg.rigid_lr_init, cfg.rigid_lr_final)
        ctrl = control_gradients(traj, pose_grads)
        traj.retract(state.pose_opt[name].update(ctrl, lr))
        if n > 1 and cfg.weight_lr > 0:
            traj.weight_logits += state.weight_opt[name].update(dlogits, cfg.weight_lr, eps=EPS)
    return StepResult(loss, blurred)


def _maybe_densify(state: TrainState, dcfg: DensifyConfig) -> None:
    done = state.iteration
    if not dcfg.is_pass(done):
        return
    res = densify_and_prune(state.scene, state.densify, dcfg, done, state.rng)
    state.scene = res.scene
    state.scene_opt.remap_rows(res.keep, res.n_new)


def _next_image(state: TrainState, ds: Dataset) -> str:
    if not state.order:
        state.order = [ds.train[i] for i in state.rng.permutation(len(ds.train))]
    return state.order.pop()


def _run(state: TrainState, ds: Dataset, cfg: TrainConfig, stop: int, on_log=None) -> TrainState:
    dcfg = cfg.densify_config()
    acc = []
    while state.iteration < stop:
        name = _next_image(state, ds)
        res = train_step(state, ds, cfg, name)
        acc.append((res.loss, psnr(np.clip(res.blurred, 0, 1), ds.images[name]),
                    ssim(np.clip(res.blurred, 0, 1), ds.images[name])))
        state.iteration += 1
        _maybe_densify(state, dcfg)
        if state.iteration % cfg.log_interval == 0 or state.iteration == cfg.iterations:
            a = np.array(acc)
            row = {"iteration": state.iteration, "loss": a[:, 0].mean(), "psnr": a[:, 1].mean(),
                   "ssim": a[:, 2].mean(), "primitive_count": len(state.scene)}
            state.history.append(row)
            acc = []
            log.info("it %d loss %.5f psnr %.2f prims %d", state.iteration, row["loss"], row["psnr"],
                     row["primitive_count"])
            if on_log:
                on_log(state, row)
    return state


def train_stage1(state: TrainState, ds: Dataset, cfg: TrainConfig, on_log=None) -> TrainState:
    state.stage = POSE_STAGE
    return _run(state, ds, cfg, min(cfg.t_split, cfg.iterations), on_log)


def enter_stage2(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Re-express every trajectory relative to its frozen mid-exposure pose."""
    state.trajectories = {n: t.to_rigid() for n, t in state.trajectories.items()}
    k = TrajectoryScheme.parse(cfg.scheme).control_count
    state.pose_opt = {n: AdamState((k, 6)) for n in state.trajectories}
    state.stage = RIGID_STAGE
    return state


def train_stage2(state: TrainState, ds: Dataset, cfg: TrainConfig, on_log=None) -> TrainState:
    if state.stage != RIGID_STAGE:
        enter_stage2(state, cfg)
    return _run(state, ds, cfg, cfg.iterations, on_log)


def frozen_pose_hash(state: TrainState) -> str:
    """Digest of every stage-two anchor pose."""
    h = hashlib.sha256()
    for name in sorted(state.trajectories):
        a = state.trajectories[name].anchor
        if a is not None:
            h.update(a.rotation.quat.tobytes())
            h.update(a.translation.tobytes())
    return h.hexdigest()


def refine_pose(scene: Scene, pose: Pose, target: np.ndarray, K: CameraIntrinsics, iters: int,
                lam: float = 0.2, lr_init: float = 1e-3, lr_final: float = 1e-4) -> Pose:
    """Pose-only fit of a sharp image against a frozen scene (left-perturbation Adam)."""
    st = AdamState((6,))
    traj = BlurTrajectory.static(pose, 1)
    for it in range(iters):
        img, graph = render(scene, traj.mid_pose(), K)
        _, dimg = photometric_loss(img, target, lam)
        _, g = backward(graph, dimg)
        traj.retract(np.tile(st.update(g, lr_at(it, iters, lr_init, lr_final)), (2, 1)))
    return traj.mid_pose()


def evaluate(scene: Scene, ds: Dataset, cfg: TrainConfig, names=None) -> dict[str, dict]:
    """Sharp renders of held-out views, scored against their ground truth.

    Each test pose is first refined against its reference image with the
    scene frozen, so every method is scored in its own reconstruction frame.
    """
    names = ds.test if names is None else names
    out = {}
    for name in names:
        gt = ds.gt_sharp.get(name)
        pose = ds.poses[name]
        if gt is not None and cfg.eval_pose_iters > 0:
            pose = refine_pose(scene, pose, gt, ds.intrinsics, cfg.eval_pose_iters, cfg.lam)
        img, _ = render(scene, pose, ds.intrinsics)
        img = np.clip(img, 0.0, 1.0)
        row = {"image": img, "pose": pose}
        if gt is not None:
            row["psnr"] = psnr(img, gt)
            row["ssim"] = ssim(img, gt)
        out[name] = row
    return out


@dataclass
class RunResult:
    state: TrainState
    evaluation: dict[str, dict]

    @property
    def test_psnr(self) -> float:
        vals = [r["psnr"] for r in self.evaluation.values() if "psnr" in r]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def test_ssim(self) -> float:
        vals = [r["ssim"] for r in self.evaluation.values() if "ssim" in r]
        return float(np.mean(vals)) if vals else float("nan")


def run_training(ds: Dataset, cfg: TrainConfig, out: Path | None = None, on_log=None) -> RunResult:
    """Full pipeline: stage one, stage two (unless disabled), evaluation, outputs."""
    state = init_state(ds, cfg)
    train_stage1(state, ds, cfg, on_log)
    if cfg.t_split < cfg.iterations:
        train_stage2(state, ds, cfg, on_log)
    result = RunResult(state, evaluate(state.scene, ds, cfg))
    if out is not None:
        write_outputs(result, ds, cfg, Path(out))
    return result


# ---------------------------------------------------------------------------
# Outputs


def write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["iteration"], repr(float(row["loss"])), repr(float(row["psnr"])),
                        repr(float(row["ssim"])), row["primitive_count"]])


def write_trajectories(path: Path, trajs: dict[str, BlurTrajectory]) -> None:
    """Sidecar: ``name stage scheme k n`` then k x (q, t), n logits, and the anchor (or ``-``)."""
    lines = []
    for name, tr in trajs.items():
        parts = [name, str(tr.stage), str(tr.scheme), str(len(tr.quats)), str(tr.n_subframes)]
        for q, t in zip(tr.quats, tr.trans):
            parts += [repr(float(v)) for v in (*q, *t)]
        parts += [repr(float(v)) for v in tr.weight_logits]
        parts += [repr(float(v)) for v in tr.anchor.to_qt()] if tr.anchor is not None else ["-"]
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")


def read_trajectories(path: Path) -> dict[str, BlurTrajectory]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        tok = raw.split()
        if not tok:
            continue
        name, stage, scheme, k, n = tok[0], int(tok[1]), TrajectoryScheme.parse(tok[2]), int(tok[3]), int(tok[4])
        vals = tok[5:]
        ctrl = np.array(vals[: 7 * k], dtype=np.float64).reshape(k, 7)
        logits = np.array(vals[7 * k: 7 * k + n], dtype=np.float64)
        rest = vals[7 * k + n:]
        anchor = None if rest == ["-"] else Pose.from_qt(np.array(rest, dtype=np.float64))
        out[name] = BlurTrajectory(ctrl[:, :4], ctrl[:, 4:], scheme, n, logits, stage, anchor)
    return out


def write_outputs(result: RunResult, ds: Dataset, cfg: TrainConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_scene(result.state.scene, out / "scene.bsgs")
    write_trajectories(out / "trajectories.txt", result.state.trajectories)
    write_metrics(out / "metrics.csv", result.state.history)
    write_intrinsics(out / "intrinsics.txt", ds.intrinsics)
    (out / "config.txt").write_text("\n".join(dump(cfg)) + "\n")
    (out / "renders").mkdir(exist_ok=True)
    for name, row in result.evaluation.items():
        save_image(row["image"], out / "renders" / name)
    write_poses(out / "test_poses.txt", {n: r["pose"] for n, r in result.evaluation.items()})
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("image", "psnr", "ssim"))
        for name, row in result.evaluation.items():
            if "psnr" in row:
                w.writerow((name, repr(float(row["psnr"])), repr(float(row["ssim"]))))
