"""Procedural primitive scenes, sphere-traced depth rendering, and the analytic grasp oracle.

Objects are compositions of analytic signed distance primitives resting on a
table half-space.  The oracle stands in for physics trials: a grasp succeeds when
the open gripper's keypoints stay clear of the scene, both fingers find contacts
on the same object while closing, and the closing line sits inside both friction
cones.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .geometry import (
    GripperModel,
    Pose,
    UnitQuaternion,
    random_rotation,
)
from .volume import DepthImage, Intrinsics

KINDS = ("sphere", "box", "cylinder", "capsule", "union")

# Shapes at unit scale; lengths are multiplied by ``scale * max_width``.
CANONICAL = {
    "sphere": (0.5,),
    "box": (0.5, 0.35, 0.3),
    "cylinder": (0.3, 0.5),
    "capsule": (0.25, 0.25),
}
# A wide block with a thin horizontal handle: only the handle is pinchable at large scales.
CANONICAL_UNION = (
    ("box", (0.4, 0.4, 0.25), (0.0, 0.0, 0.0), UnitQuaternion.identity()),
    ("capsule", (0.12, 0.2), (0.55, 0.0, 0.0), UnitQuaternion.from_axis_angle((0, 1, 0), math.pi / 2)),
)


def sd_sphere(p, r):
    return np.linalg.norm(p, axis=-1) - r


def sd_box(p, hx, hy, hz):
    q = np.abs(p) - np.array([hx, hy, hz])
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(np.max(q, axis=-1), 0.0)


def sd_cylinder(p, r, h):
    d = np.stack([np.linalg.norm(p[..., :2], axis=-1) - r, np.abs(p[..., 2]) - h], axis=-1)
    return np.minimum(np.max(d, axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


def sd_capsule(p, r, h):
    q = p.copy()
    q[..., 2] = p[..., 2] - np.clip(p[..., 2], -h, h)
    return np.linalg.norm(q, axis=-1) - r


_SDF = {"sphere": sd_sphere, "box": sd_box, "cylinder": sd_cylinder, "capsule": sd_capsule}


@dataclass(frozen=True)
class Part:
    """A primitive placed in its parent object's frame."""

    kind: str
    params: tuple
    pose: Pose = field(default_factory=Pose.identity)

    def sdf_local(self, p):
        q = (p - np.asarray(self.pose.translation)) @ self.pose.rotation.as_matrix()
        return _SDF[self.kind](q, *self.params)

    def bounding_radius(self) -> float:
        prm = self.params
        if self.kind == "sphere":
            r = prm[0]
        elif self.kind == "box":
            r = math.sqrt(sum(h * h for h in prm))
        elif self.kind == "cylinder":
            r = math.hypot(prm[0], prm[1])
        else:
            r = prm[0] + prm[1]
        return float(np.linalg.norm(self.pose.translation) + r)


@dataclass(frozen=True)
class SceneObject:
    kind: str
    parts: tuple  # of Part; a single part for plain primitives
    pose: Pose
    scale: float

    @property
    def params(self) -> tuple:
        return self.parts[0].params if len(self.parts) == 1 else ()

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        local = (p - np.asarray(self.pose.translation)) @ self.pose.rotation.as_matrix()
        d = self.parts[0].sdf_local(local)
        for part in self.parts[1:]:
            d = np.minimum(d, part.sdf_local(local))
        return d

    def bounding_radius(self) -> float:
        return max(part.bounding_radius() for part in self.parts)

    def lowest_point(self) -> float:
        """World z of the lowest surface point."""
        rot = self.pose.rotation.as_matrix()
        low = math.inf
        for part in self.parts:
            prot = rot @ part.pose.rotation.as_matrix()
            center_z = self.pose.translation[2] + (rot @ np.asarray(part.pose.translation))[2]
            axis = prot[2]  # world z expressed in the part frame
            prm = part.params
            if part.kind == "sphere":
                ext = prm[0]
            elif part.kind == "box":
                ext = sum(abs(axis[i]) * prm[i] for i in range(3))
            elif part.kind == "cylinder":
                ext = prm[1] * abs(axis[2]) + prm[0] * math.sqrt(max(0.0, 1.0 - axis[2] ** 2))
            else:
                ext = prm[1] * abs(axis[2]) + prm[0]
            low = min(low, center_z - ext)
        return low

    def moved(self, pose: Pose) -> SceneObject:
        return replace(self, pose=pose)


def make_object(kind: str, scale: float, pose: Pose, max_width: float = 0.08) -> SceneObject:
    """Instantiate a canonical primitive at ``scale`` relative to the gripper opening."""
    size = scale * max_width
    if kind == "union":
        parts = tuple(
            Part(k, tuple(size * v for v in prm), Pose(rot, tuple(size * c for c in off)))
            for k, prm, off, rot in CANONICAL_UNION
        )
    elif kind in CANONICAL:
        parts = (Part(kind, tuple(size * v for v in CANONICAL[kind])),)
    else:
        raise DomainError(f"unknown primitive kind {kind!r}")
    return SceneObject(kind, parts, pose, float(scale))


@dataclass(frozen=True)
class SdfScene:
    objects: tuple
    table_height: float | None = 0.05
    workspace_size: float = 0.4
    incomplete: bool = False  # placement gave up before reaching the requested count

    def object_sdfs(self, points) -> np.ndarray:
        """Per-object distances, shape ``(n_objects, ...)``."""
        p = np.asarray(points, dtype=np.float64)
        if not self.objects:
            return np.empty((0,) + p.shape[:-1])
        return np.stack([obj.sdf(p) for obj in self.objects])

    def table_sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.table_height is None:
            return np.full(p.shape[:-1], np.inf)
        return p[..., 2] - self.table_height

    def sdf(self, points) -> np.ndarray:
        d = self.table_sdf(points)
        for obj in self.objects:
            d = np.minimum(d, obj.sdf(points))
        return d

    def owner(self, points) -> np.ndarray:
        """Index of the closest object at each point, -1 for the table (or empty space)."""
        p = np.asarray(points, dtype=np.float64)
        if not self.objects:
            return np.full(p.shape[:-1], -1)
        per = self.object_sdfs(p)
        best = np.argmin(per, axis=0)
        table_closer = self.table_sdf(p) < np.min(per, axis=0)
        return np.where(table_closer, -1, best)

    def gradient(self, points, h: float = 1e-5) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        g = np.empty(p.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g

    def without(self, index: int) -> SdfScene:
        objs = self.objects[:index] + self.objects[index + 1 :]
        return replace(self, objects=objs)


# -- scene generation -----------------------------------------------------------


def surface_samples(obj: SceneObject, count: int = 400, seed: int = 0) -> np.ndarray:
    """Points on the object's surface, in its local frame."""
    local = replace(obj, pose=Pose.identity())
    rng = np.random.default_rng(seed)
    r = obj.bounding_radius()
    p = rng.uniform(-r, r, size=(count * 2, 3))
    for _ in range(12):
        d = local.sdf(p)
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            g[:, k] = (local.sdf(p + e) - local.sdf(p - e)) / 2e-6
        n = np.linalg.norm(g, axis=1, keepdims=True)
        p = p - d[:, None] * g / np.maximum(n, 1e-12)
    keep = np.abs(local.sdf(p)) < 1e-5
    return p[keep][:count]


def _penetration(scene_objects, obj: SceneObject, samples: np.ndarray) -> float:
    """Depth by which existing objects intrude into ``obj`` (sampled on its surface)."""
    if not scene_objects:
        return 0.0
    world = obj.pose.apply(samples)
    d = np.min(np.stack([o.sdf(world) for o in scene_objects]), axis=0)
    inner = obj.pose.apply(samples * 0.5)
    d_in = np.min(np.stack([o.sdf(inner) for o in scene_objects]), axis=0)
    return float(max(0.0, -min(d.min(), d_in.min())))


def _aabb(obj: SceneObject, samples: np.ndarray):
    w = obj.pose.apply(samples)
    return w.min(axis=0), w.max(axis=0)


def _yaw(rng) -> UnitQuaternion:
    return UnitQuaternion.from_axis_angle((0.0, 0.0, 1.0), rng.uniform(0.0, 2.0 * math.pi))


def make_scene(
    kind: str,
    object_count: int,
    scale_range=(0.65, 1.7),
    rng_seed=0,
    *,
    kinds=KINDS,
    max_width: float = 0.08,
    workspace_size: float = 0.4,
    table_height: float = 0.05,
    spread: float = 0.09,
    max_rejections: int = 1000,
) -> SdfScene:
    """Build a deterministic scene of ``single``, ``pile`` or ``packed`` type.

    Pile objects get random orientations and are lowered from above until they
    touch the table or an earlier object; packed objects stand upright with
    random yaw and are rejection-sampled against overlap.
    """
    lo, hi = scale_range
    if object_count < 1:
        raise DomainError("object_count must be >= 1")
    if not 0 < lo <= hi:
        raise DomainError("scale range must satisfy 0 < lo <= hi")
    if kind not in ("single", "pile", "packed"):
        raise DomainError(f"unknown scene kind {kind!r}")
    rng = np.random.default_rng(rng_seed)
    center = workspace_size / 2.0
    if kind == "single":
        object_count = 1
    placed: list[SceneObject] = []
    rejections = 0
    while len(placed) < object_count and rejections < max_rejections:
        prim = kinds[rng.integers(len(kinds))]
        s = float(rng.uniform(lo, hi))
        if kind == "single":
            xy = np.array([center, center])
            rot = _yaw(rng)
        elif kind == "packed":
            xy = rng.uniform(center - spread, center + spread, size=2)
            rot = _yaw(rng)
        else:
            xy = rng.uniform(center - spread, center + spread, size=2)
            rot = random_rotation(rng)
        obj = make_object(prim, s, Pose(rot, (xy[0], xy[1], 0.0)), max_width)
        samples = surface_samples(obj)
        rest = table_height - obj.lowest_point()
        if kind == "pile":
            obj = _drop(placed, obj, samples, rest, workspace_size)
        else:
            obj = obj.moved(Pose(rot, (xy[0], xy[1], rest)))
            if _penetration(placed, obj, samples) > 0.0:
                obj = None
        if obj is not None:
            lo_corner, hi_corner = _aabb(obj, samples)
            if np.all(lo_corner >= 0.0) and np.all(hi_corner <= workspace_size):
                placed.append(obj)
                continue
        rejections += 1
    return SdfScene(tuple(placed), table_height, workspace_size, incomplete=len(placed) < object_count)


def _drop(placed, obj, samples, rest_z, workspace_size, step=0.002, tol=0.001):
    """Lower ``obj`` from above the pile until first contact (penetration < ``tol``)."""
    rot = obj.pose.rotation
    x, y = obj.pose.translation[:2]
    top = rest_z
    for o in placed:
        top = max(top, o.pose.translation[2] + o.bounding_radius() + obj.bounding_radius())
    z = top
    at = lambda zz: obj.moved(Pose(rot, (x, y, zz)))  # noqa: E731
    if _penetration(placed, at(z), samples) > 0.0:
        return None
    while z - step > rest_z:
        if _penetration(placed, at(z - step), samples) > 0.0:
            a, b = z - step, z  # a penetrates, b is free
            while b - a > tol / 4:
                m = 0.5 * (a + b)
                if _penetration(placed, at(m), samples) > 0.0:
                    a = m
                else:
                    b = m
            return at(b)
        z -= step
    return at(rest_z) if _penetration(placed, at(rest_z), samples) < tol else None


# -- rendering ------------------------------------------------------------------


def render_depth(
    scene: SdfScene,
    intrinsics: Intrinsics,
    pose: Pose,
    far: float = 2.0,
    max_steps: int = 256,
    tol: float = 1e-4,
) -> DepthImage:
    """Sphere-trace every pixel; misses read ``far``.  Depth is along the optical axis."""
    k = intrinsics
    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height))
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(u.shape)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ pose.rotation.as_matrix().T
    origin = np.asarray(pose.translation)
    t = np.zeros(d_cam.shape[0])
    hit = np.zeros(d_cam.shape[0], dtype=bool)
    active = np.arange(d_cam.shape[0])
    for _ in range(max_steps):
        if active.size == 0:
            break
        p = origin + t[active, None] * d_world[active]
        s = scene.sdf(p)
        done = s < tol
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, s)
        alive = ~done & (t[active] < far)
        active = active[alive]
    depth = np.where(hit, t * d_cam[:, 2], far)
    return DepthImage(depth.reshape(k.height, k.width), intrinsics, pose)


def render_views(scene: SdfScene, cameras, **kwargs) -> list[DepthImage]:
    return [render_depth(scene, intr, pose, **kwargs) for intr, pose in cameras]


# -- grasp oracle ---------------------------------------------------------------


class FailureReason(str, enum.Enum):
    COLLISION = "collision"
    NO_CONTACT = "no_contact"
    WIDTH_EXCEEDED = "width_exceeded"
    FRICTION_VIOLATED = "friction_violated"


_REASONS = (None, FailureReason.COLLISION, FailureReason.NO_CONTACT, FailureReason.WIDTH_EXCEEDED,
            FailureReason.FRICTION_VIOLATED)
OK, COLLISION, NO_CONTACT, WIDTH_EXCEEDED, FRICTION = range(5)

# Keypoints stand for finger and palm links of finite thickness; an open gripper
# needs this much free space around each of them.
FINGER_CLEARANCE = 0.0125


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    failure_reason: FailureReason | None = None
    width: float = 0.0
    object_index: int = -1

    def __post_init__(self):
        if self.success and self.failure_reason is not None:
            raise DomainError("a successful grasp has no failure reason")


@dataclass
class OracleBatch:
    """Vectorized oracle results for ``K`` grasps."""

    code: np.ndarray  # (K,) int, 0 = success
    width: np.ndarray  # (K,) contact distance for grasps that reached contact checks
    object_index: np.ndarray  # (K,) object owning the contacts, -1 if none

    @property
    def success(self) -> np.ndarray:
        return self.code == OK

    def outcome(self, i: int) -> GraspOutcome:
        c = int(self.code[i])
        return GraspOutcome(c == OK, _REASONS[c], float(self.width[i]), int(self.object_index[i]))


def grasp_oracle(scene: SdfScene, pose: Pose, model: GripperModel, mu: float = 0.4, **kwargs) -> GraspOutcome:
    rot = pose.rotation.as_matrix()[None]
    org = np.asarray(pose.translation)[None]
    return grasp_oracle_batch(scene, rot, org, model, mu, **kwargs).outcome(0)


def grasp_oracle_batch(
    scene: SdfScene,
    rotations,
    origins,
    model: GripperModel,
    mu: float = 0.4,
    clearance: float = FINGER_CLEARANCE,
    bisect_iters: int = 40,
) -> OracleBatch:
    """Evaluate grasps given as rotation matrices ``(K, 3, 3)`` and origins ``(K, 3)``.

    Checks, in order: the object spans the whole opening (``width_exceeded``);
    a keypoint of the open gripper at the grasp or pre-grasp pose lies within
    ``clearance`` of the scene or outside the workspace (``collision``); the
    closing fingers meet the same object (``no_contact`` otherwise); both
    contact normals lie within the friction cone (``friction_violated``).
    """
    if not mu > 0:
        raise DomainError("friction coefficient must be positive")
    rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    org = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    k = rot.shape[0]
    w = model.max_width
    fd = model.finger_depth
    xaxis = rot[:, :, 0]
    approach = rot[:, :, 2]
    code = np.zeros(k, dtype=np.int64)
    width = np.zeros(k)
    owner = np.full(k, -1)

    center = org + approach * (fd / 2.0)
    start_pos = center + xaxis * (w / 2.0)
    start_neg = center - xaxis * (w / 2.0)
    s_c = scene.sdf(center)
    s_p = scene.sdf(start_pos)
    s_n = scene.sdf(start_neg)
    blocked = (s_c <= 0) & (s_p <= 0) & (s_n <= 0) & (scene.owner(center) >= 0)
    code[blocked] = WIDTH_EXCEEDED

    local = model.local_keypoints(w)
    pre = local - np.array([0.0, 0.0, fd])
    kp = np.concatenate([local, pre])  # (10, 3)
    world = np.einsum("kij,mj->kmi", rot, kp) + org[:, None, :]
    size = scene.workspace_size
    out_ws = np.any((world < 0.0) | (world > size), axis=(1, 2))
    kp_hit = np.any(scene.sdf(world) < clearance, axis=1)
    coll = (out_ws | kp_hit | (s_p <= 0) | (s_n <= 0)) & (code == OK)
    code[coll] = COLLISION

    todo = np.flatnonzero(code == OK)
    if todo.size:
        c1, f1 = _close_finger(scene, start_pos[todo], -xaxis[todo], w, bisect_iters)
        c2, f2 = _close_finger(scene, start_neg[todo], xaxis[todo], w, bisect_iters)
        o1 = scene.owner(c1)
        o2 = scene.owner(c2)
        found = f1 & f2 & (o1 == o2) & (o1 >= 0)
        code[todo[~found]] = NO_CONTACT
        width[todo] = np.linalg.norm(c1 - c2, axis=1)
        owner[todo[found]] = o1[found]
        ok = todo[found]
        too_wide = width[ok] > w
        code[ok[too_wide]] = WIDTH_EXCEEDED
        n1 = _unit(scene.gradient(c1[found]))
        n2 = _unit(scene.gradient(c2[found]))
        cos_lim = 1.0 / math.sqrt(1.0 + mu * mu)
        # each finger pushes against the outward normal at its contact
        in_cone = (np.sum(xaxis[ok] * n1, axis=1) >= cos_lim) & (np.sum(-xaxis[ok] * n2, axis=1) >= cos_lim)
        code[ok[~in_cone & ~too_wide]] = FRICTION
    return OracleBatch(code, width, owner)


def _unit(v):
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _close_finger(scene, start, direction, travel, iters, min_step=5e-4, max_iter=400):
    """First zero crossing of the scene SDF along ``start + t * direction``, t in [0, travel]."""
    k = start.shape[0]
    t = np.zeros(k)
    t_prev = np.zeros(k)
    found = np.zeros(k, dtype=bool)
    active = np.arange(k)
    for _ in range(max_iter):
        if active.size == 0:
            break
        f = scene.sdf(start[active] + t[active, None] * direction[active])
        crossed = f <= 0
        found[active[crossed]] = True
        live = active[~crossed]
        t_prev[live] = t[live]
        t[live] += np.maximum(f[~crossed], min_step)
        active = live[t[live] <= travel]
    # clamp brackets that ran past the far end; those are not found
    lo = t_prev.copy()
    hi = t.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = scene.sdf(start + mid[:, None] * direction) <= 0
        hi = np.where(found & inside, mid, hi)
        lo = np.where(found & ~inside, mid, lo)
    contact = start + (0.5 * (lo + hi))[:, None] * direction
    return contact, found


# -- files ----------------------------------------------------------------------

_SCENE_HEADER = "voxgrasp-scene 1"


def _hex(values) -> str:
    return ",".join(float(v).hex() for v in values)


def _unhex(text: str) -> tuple:
    return tuple(float.fromhex(t) for t in text.split(",")) if text else ()


def _pose_fields(pose: Pose) -> str:
    return _hex(pose.rotation.as_array()) + ";" + _hex(pose.translation)


def _parse_pose(text: str) -> Pose:
    q, t = text.split(";")
    return Pose(UnitQuaternion(*_unhex(q)), _unhex(t))


def scene_to_text(scene: SdfScene) -> str:
    lines = [_SCENE_HEADER]
    table = "none" if scene.table_height is None else float(scene.table_height).hex()
    lines.append(f"workspace {float(scene.workspace_size).hex()} table {table} incomplete {int(scene.incomplete)}")
    for obj in scene.objects:
        rec = [f"object kind={obj.kind}", f"scale={float(obj.scale).hex()}", f"pose={_pose_fields(obj.pose)}"]
        for part in obj.parts:
            rec.append(f"part={part.kind}|{_hex(part.params)}|{_pose_fields(part.pose)}")
        lines.append(" ".join(rec))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str, path=None) -> SdfScene:
    lines = text.splitlines()
    if not lines or lines[0] != _SCENE_HEADER:
        raise FormatError("bad scene header", path, 0)
    try:
        head = lines[1].split()
        ws = float.fromhex(head[1])
        table = None if head[3] == "none" else float.fromhex(head[3])
        incomplete = bool(int(head[5]))
        objects = []
        for lineno, line in enumerate(lines[2:], start=2):
            fields = dict(f.split("=", 1) for f in line.split()[1:] if not f.startswith("part="))
            parts = []
            for f in line.split():
                if f.startswith("part="):
                    kind, prm, pose = f[5:].split("|")
                    parts.append(Part(kind, _unhex(prm), _parse_pose(pose)))
            objects.append(
                SceneObject(fields["kind"], tuple(parts), _parse_pose(fields["pose"]), float.fromhex(fields["scale"]))
            )
    except (IndexError, KeyError, ValueError) as exc:
        raise FormatError(f"malformed scene record: {exc}", path) from exc
    return SdfScene(tuple(objects), table, ws, incomplete)


def write_scene(scene: SdfScene, path) -> None:
    Path(path).write_text(scene_to_text(scene))


def read_scene(path) -> SdfScene:
    return scene_from_text(Path(path).read_text(), path)


__all__ = [
    "KINDS",
    "FailureReason",
    "GraspOutcome",
    "OracleBatch",
    "Part",
    "SceneObject",
    "SdfScene",
    "grasp_oracle",
    "grasp_oracle_batch",
    "make_object",
    "make_scene",
    "read_scene",
    "render_depth",
    "render_views",
    "scene_from_text",
    "scene_to_text",
    "write_scene",
]
