"""Closed-loop declutter evaluation against the analytic grasp oracle.

Each round fuses the current scene, asks a planner for one grasp, executes it
with the oracle and removes the grasped object on success.  An episode ends when
the scene is empty, the planner has nothing to offer, or too many grasps fail in
a row.
"""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import DatagenConfig, fuse_scene, scene_seed
from .errors import DomainError
from .geometry import GripperModel, Pose, UnitQuaternion, gripper_keypoints, matrix_to_quat, semicircle_frames
from .network import GraspPrediction, ModelConfig, predict
from .scenegen import FINGER_CLEARANCE, KINDS, SdfScene, grasp_oracle, grasp_oracle_batch, make_scene, surface_samples
from .tensor import ParamStore
from .volume import TsdfGrid

FAILURE_LIMITS = {"single": 1, "multi": 2}
EPISODE_FIELDS = ("episode", "attempt", "voxel", "qx qy qz qw", "width", "quality", "success", "reason")
SHOW_QUALITY = 0.9  # grasps drawn in visual exports
# Primitives whose narrow side fits the default 8 cm gripper with finger clearance
# and which stand tall enough for a top grasp.
GRASPABLE_KINDS = ("box", "cylinder", "capsule")
GRASPABLE_SCALE = (0.8, 0.95)


class Termination(str, enum.Enum):
    CLEARED = "cleared"
    CONSECUTIVE_FAILURES = "consecutive_failures"
    NO_PREDICTION = "no_prediction"


@dataclass(frozen=True)
class GraspChoice:
    voxel: int  # linear voxel index
    pose: Pose
    width: float
    quality: float


@dataclass(frozen=True)
class Attempt:
    choice: GraspChoice
    success: bool
    reason: str  # "ok" or the oracle failure reason


@dataclass
class EpisodeResult:
    attempted: int
    successes: int
    initial: int
    remaining: int
    termination: Termination
    attempts: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.successes <= self.attempted and 0 <= self.remaining <= self.initial):
            raise DomainError("inconsistent episode counts")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "single"
    q_min: float = 0.5
    band: float = 0.8  # grasp centers must lie where |tsdf| < band
    table_margin: float = 0.005
    mu: float = 0.4
    clearance: float = FINGER_CLEARANCE
    max_width: float = 0.08
    finger_depth: float = 0.05

    @property
    def failure_limit(self) -> int:
        try:
            return FAILURE_LIMITS[self.mode]
        except KeyError:
            raise DomainError(f"mode must be one of {sorted(FAILURE_LIMITS)}") from None


# -- selection ------------------------------------------------------------------


def grasp_mask(grid: TsdfGrid, band: float = 0.8, min_height: float | None = None) -> np.ndarray:
    """Observed voxels near a surface and, if given, with centers above ``min_height``."""
    mask = (grid.weights > 0) & (np.abs(grid.values) < band)
    if min_height is not None:
        z = (np.arange(grid.resolution) + 0.5) * grid.voxel_size
        mask &= (z > min_height)[None, None, :]
    return mask


def select_grasp(pred: GraspPrediction, mask=None, q_min: float = 0.5) -> GraspChoice | None:
    """Highest-quality valid voxel (lowest linear index on ties), or None below ``q_min``."""
    q = np.asarray(pred.quality, dtype=np.float64)
    if mask is not None:
        q = np.where(mask, q, -np.inf)
    flat = q.reshape(-1)
    best = int(np.argmax(flat))
    if not flat[best] >= q_min:
        return None
    idx = np.unravel_index(best, q.shape)
    center = (np.asarray(idx) + 0.5) * pred.voxel_size
    rot = pred.rotation.reshape(4, -1)[:, best]
    width = float(np.asarray(pred.width).reshape(-1)[best])
    return GraspChoice(best, Pose(UnitQuaternion(*map(float, rot)), tuple(map(float, center))), width, float(flat[best]))


# -- planners -------------------------------------------------------------------


class ModelPlanner:
    """Picks the best predicted grasp of a trained network."""

    def __init__(self, store: ParamStore, model_cfg: ModelConfig, cfg: EvalConfig = EvalConfig(),
                 table_height: float = 0.05):
        self.store = store
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.table_height = table_height

    def __call__(self, scene: SdfScene, grid: TsdfGrid, key=()) -> GraspChoice | None:
        pred = predict(self.store, grid, self.model_cfg)
        self.store._leaves = {}
        floor = None if self.table_height is None else self.table_height + self.cfg.table_margin
        return select_grasp(pred, grasp_mask(grid, self.cfg.band, floor), self.cfg.q_min)


class OraclePlanner:
    """Returns a grasp that the oracle already accepts on the true scene, if one is found.

    Candidates come from the analytic object surfaces with exact normals: random
    surface points above the table, offsets along the normal and ``rolls``
    orientations each.  The first success in sampling order is chosen.
    """

    def __init__(self, cfg: EvalConfig = EvalConfig(), budget: int = 2000, batch: int = 64,
                 rolls: int = 12, seed: int = 0):
        self.cfg = cfg
        self.budget = budget
        self.batch = batch
        self.rolls = rolls
        self.seed = seed

    def _surface(self, scene: SdfScene):
        pts, owners = [], []
        for i, obj in enumerate(scene.objects):
            p = obj.pose.apply(surface_samples(obj, 400, seed=i))
            pts.append(p)
            owners.append(np.full(len(p), i))
        pts = np.concatenate(pts)
        owners = np.concatenate(owners)
        floor = -np.inf if scene.table_height is None else scene.table_height + self.cfg.table_margin
        # drop points buried under other objects or resting on the table
        keep = (scene.owner(pts) == owners) & (pts[:, 2] > floor) & (scene.sdf(pts) > -1e-4)
        pts = pts[keep]
        grad = scene.gradient(pts)
        return pts, grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)

    def __call__(self, scene: SdfScene, grid: TsdfGrid, key=()) -> GraspChoice | None:
        """``key`` (episode, attempt) seeds the sampling so results do not depend on call order."""
        model = GripperModel(self.cfg.max_width, self.cfg.finger_depth)
        rng = np.random.default_rng([self.seed, *key])
        pts, normals = self._surface(scene)
        if len(pts) == 0:
            return None
        tried = 0
        while tried < self.budget:
            idx = rng.integers(len(pts), size=self.batch)
            off = rng.uniform(-model.finger_depth / 2.0, model.finger_depth / 2.0, size=self.batch)
            rots = np.concatenate([semicircle_frames(normals[i], self.rolls) for i in idx])
            origins = np.repeat(pts[idx] + off[:, None] * normals[idx], self.rolls, axis=0)
            tried += self.batch
            res = grasp_oracle_batch(scene, rots, origins, model, self.cfg.mu, self.cfg.clearance)
            good = np.flatnonzero(res.success)
            if good.size:
                i = int(good[0])
                q = matrix_to_quat(rots[i])
                vox = np.ravel_multi_index(tuple(grid.voxel_index(origins[i])), grid.values.shape)
                pose = Pose(UnitQuaternion(*map(float, q)), tuple(map(float, origins[i])))
                return GraspChoice(int(vox), pose, float(res.width[i]), 1.0)
        return None


# -- episodes -------------------------------------------------------------------


def run_episode(scene: SdfScene, planner, cfg: EvalConfig = EvalConfig(),
                fusion: DatagenConfig = DatagenConfig(), episode: int = 0) -> EpisodeResult:
    """Fuse, plan, execute and remove until a termination condition holds.

    ``planner(scene, grid, key)`` returns a :class:`GraspChoice` or None; ``key`` is
    ``(episode, attempt)``.
    """
    model = GripperModel(cfg.max_width, cfg.finger_depth)
    limit = cfg.failure_limit
    initial = len(scene.objects)
    attempts = []
    successes = 0
    streak = 0
    while True:
        if not scene.objects:
            term = Termination.CLEARED
            break
        grid = fuse_scene(scene, fusion)
        choice = planner(scene, grid, (episode, len(attempts)))
        if choice is None:
            term = Termination.NO_PREDICTION
            break
        out = grasp_oracle(scene, choice.pose, model, cfg.mu, clearance=cfg.clearance)
        attempts.append(Attempt(choice, out.success, "ok" if out.success else out.failure_reason.value))
        if out.success:
            successes += 1
            streak = 0
            scene = scene.without(out.object_index)
        else:
            streak += 1
            if streak >= limit:
                term = Termination.CONSECUTIVE_FAILURES
                break
    return EpisodeResult(len(attempts), successes, initial, len(scene.objects), term, attempts)


def eval_scenes(count: int, mode: str = "single", seed: int = 1000, objects: int = 4,
                scale_range=(0.65, 1.7), kinds=KINDS, table_height: float = 0.05,
                workspace_size: float = 0.4) -> list:
    kind = "single" if mode == "single" else "pile"
    return [make_scene(kind, objects, scale_range, scene_seed(seed, i), kinds=kinds,
                       table_height=table_height, workspace_size=workspace_size) for i in range(count)]


def evaluate(scenes, planner, cfg: EvalConfig = EvalConfig(), fusion: DatagenConfig = DatagenConfig(),
             threads: int = 1) -> list:
    """Episodes in scene order; identical for any ``threads``."""
    def one(i):
        return run_episode(scenes[i], planner, cfg, fusion, episode=i)

    if threads <= 1:
        return [one(i) for i in range(len(scenes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(scenes))))


def metrics(episodes) -> dict:
    """Success rate (None when nothing was attempted) and declutter rate."""
    if not episodes:
        raise DomainError("need at least one episode")
    att = sum(e.attempted for e in episodes)
    succ = sum(e.successes for e in episodes)
    init = sum(e.initial for e in episodes)
    removed = sum(e.initial - e.remaining for e in episodes)
    return {
        "sr": succ / att if att else None,
        "dr": removed / init if init else None,
        "successes": succ,
        "attempted": att,
        "removed": removed,
        "objects": init,
    }


def format_metrics(m: dict) -> str:
    sr = "N/A" if m["sr"] is None else f"{100 * m['sr']:.1f}%"
    dr = "N/A" if m["dr"] is None else f"{100 * m['dr']:.1f}%"
    return f"SR {sr} ({m['successes']}/{m['attempted']})  DR {dr} ({m['removed']}/{m['objects']})"


def episode_rows(episodes) -> list:
    rows = []
    for e, ep in enumerate(episodes):
        for a, att in enumerate(ep.attempts):
            q = att.choice.pose.rotation
            rows.append([e, a, att.choice.voxel, f"{q.x!r} {q.y!r} {q.z!r} {q.w!r}",
                         repr(att.choice.width), repr(att.choice.quality), int(att.success), att.reason])
    return rows


def write_episode_csv(episodes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_FIELDS)
        w.writerows(episode_rows(episodes))


# -- visual export --------------------------------------------------------------

_SKELETON = ((0, 1), (0, 2), (1, 2), (1, 3), (2, 4))  # wrist-palm, palm, fingers


def grasp_skeleton_off(choices, model: GripperModel = GripperModel()) -> str:
    """OFF text with each gripper drawn as keypoints joined by two-vertex faces."""
    verts, faces = [], []
    for c in choices:
        width = min(max(c.width, 0.0), model.max_width)
        base = len(verts)
        verts.extend(gripper_keypoints(c.pose, width, model))
        faces.extend((base + i, base + j) for i, j in _SKELETON)
    lines = ["OFF", f"{len(verts)} {len(faces)} 0"]
    lines += [f"{v[0]!r} {v[1]!r} {v[2]!r}" for v in verts]
    lines += [f"2 {i} {j}" for i, j in faces]
    return "\n".join(lines) + "\n"


def write_attempt_meshes(episodes, directory, model: GripperModel = GripperModel()) -> list:
    """One OFF file per attempt, ``ep%03d_att%03d.off``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for e, ep in enumerate(episodes):
        for a, att in enumerate(ep.attempts):
            p = d / f"ep{e:03d}_att{a:03d}.off"
            p.write_text(grasp_skeleton_off([att.choice], model))
            paths.append(p)
    return paths


def confident_grasps(pred: GraspPrediction, mask=None, threshold: float = SHOW_QUALITY) -> list:
    """Every voxel whose quality exceeds ``threshold``, for visualization."""
    q = np.asarray(pred.quality)
    sel = q > threshold
    if mask is not None:
        sel &= mask
    out = []
    rot = pred.rotation.reshape(4, -1)
    for flat in np.flatnonzero(sel.reshape(-1)):
        idx = np.unravel_index(flat, q.shape)
        center = (np.asarray(idx) + 0.5) * pred.voxel_size
        out.append(GraspChoice(int(flat), Pose(UnitQuaternion(*map(float, rot[:, flat])), tuple(map(float, center))),
                               float(pred.width.reshape(-1)[flat]), float(q.reshape(-1)[flat])))
    return out
