"""Grasp label generation: candidate sampling, TSDF pre-pruning, oracle trials, dataset files.

A *trial* is one sampled surface point.  Its six rolled orientations are pruned
against the fused TSDF and the survivors are sent to the oracle.  Each trial
yields at most one label: a positive at a successful roll, otherwise a negative.
"""
from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .geometry import GripperModel, Pose, UnitQuaternion, matrix_to_quat, semicircle_frames
from .scenegen import (
    COLLISION,
    FINGER_CLEARANCE,
    KINDS,
    OK,
    SdfScene,
    grasp_oracle_batch,
    make_scene,
    read_scene,
    render_views,
    write_scene,
)
from .volume import (
    GridConfig,
    TsdfGrid,
    keypoints_collide_batch,
    orbit_cameras,
    read_tsdf,
    surface_points_normals,
    tsdf_fuse,
    write_tsdf,
)

LABEL_MAGIC = b"VGLB"
LABEL_VERSION = 1
_LABEL_REC = struct.Struct("<3f4ffB")
ROLLS = 6

_f32 = np.float32


@dataclass(frozen=True)
class GraspLabel:
    position: tuple
    rotation: UnitQuaternion
    width: float
    quality: int

    def __post_init__(self):
        p = tuple(float(c) for c in self.position)
        if len(p) != 3:
            raise DomainError("label position must have three components")
        object.__setattr__(self, "position", p)
        if self.quality not in (0, 1):
            raise DomainError("label quality must be 0 or 1")
        if not self.width >= 0.0:
            raise DomainError("label width must be non-negative")


@dataclass
class SceneRecord:
    tsdf: TsdfGrid
    labels: list
    scene_id: int
    seed: int
    flagged: bool = False  # quota not met within the trial budget
    scene: SdfScene | None = None
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def positives(self) -> list:
        return [lab for lab in self.labels if lab.quality == 1]

    @property
    def negatives(self) -> list:
        return [lab for lab in self.labels if lab.quality == 0]


@dataclass(frozen=True)
class LabelTargets:
    pos: int = 8
    neg: int = 64

    def __post_init__(self):
        if self.pos < 1 or self.neg < 1:
            raise DomainError("label targets must be >= 1")


# -- candidates -----------------------------------------------------------------


@dataclass
class CandidateSet:
    """``count`` sampled points times ``ROLLS`` orientations, stored flat."""

    rotations: np.ndarray  # (count * ROLLS, 3, 3)
    origins: np.ndarray  # (count * ROLLS, 3)
    widths: np.ndarray  # (count * ROLLS,)
    surface_index: np.ndarray  # (count,) index into the surface point list

    def __len__(self) -> int:
        return self.origins.shape[0]

    def poses(self) -> list:
        quats = matrix_to_quat(self.rotations)
        return [(Pose(UnitQuaternion(*map(float, q)), tuple(o)), float(w))
                for q, o, w in zip(quats, self.origins, self.widths)]


def sample_candidate_set(grid: TsdfGrid, count: int, rng: np.random.Generator,
                         model: GripperModel = GripperModel(), band: float = 0.2,
                         min_height: float | None = None) -> CandidateSet:
    """Vectorized candidate sampling.  ``min_height`` drops surface points at or below it (the table)."""
    if count < 1:
        raise DomainError("count must be >= 1")
    pts, normals = surface_points_normals(grid, band)
    if min_height is not None:
        keep = pts[:, 2] > min_height
        pts, normals = pts[keep], normals[keep]
    if len(pts) == 0:
        empty = np.empty((0, 3))
        return CandidateSet(np.empty((0, 3, 3)), empty, np.empty(0), np.empty(0, dtype=np.int64))
    idx = rng.integers(len(pts), size=count)
    offsets = rng.uniform(-model.finger_depth / 2.0, model.finger_depth / 2.0, size=count)
    rots = np.empty((count, ROLLS, 3, 3))
    origins = np.empty((count, ROLLS, 3))
    for c, (i, off) in enumerate(zip(idx, offsets)):
        rots[c] = semicircle_frames(normals[i], ROLLS)
        origins[c] = pts[i] + off * normals[i]
    return CandidateSet(
        rots.reshape(-1, 3, 3),
        origins.reshape(-1, 3),
        np.full(count * ROLLS, model.max_width),
        idx.astype(np.int64),
    )


def sample_candidates(grid: TsdfGrid, count: int, rng: np.random.Generator,
                      model: GripperModel = GripperModel(), min_height: float | None = None) -> list:
    """``count`` surface points, each expanded to six rolled ``(Pose, width)`` candidates."""
    return sample_candidate_set(grid, count, rng, model, min_height=min_height).poses()


def pregrasp_keypoints(rotations, origins, widths, model: GripperModel) -> np.ndarray:
    """Keypoints of the grasp and pre-grasp poses, shape ``(K, 10, 3)``."""
    rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    org = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    wid = np.broadcast_to(np.asarray(widths, dtype=np.float64), (rot.shape[0],))
    h = wid / 2.0
    fd = model.finger_depth
    local = np.zeros((rot.shape[0], 10, 3))
    for base, dz in ((0, 0.0), (5, -fd)):
        local[:, base + 0, 2] = -fd / 2.0 + dz
        local[:, base + 1, 0] = h
        local[:, base + 2, 0] = -h
        local[:, base + 3, 0] = h
        local[:, base + 4, 0] = -h
        local[:, base + 1 : base + 3, 2] = dz
        local[:, base + 3 : base + 5, 2] = fd + dz
    return np.einsum("kij,kmj->kmi", rot, local) + org[:, None, :]


def prune_mask(grid: TsdfGrid, rotations, origins, widths, model: GripperModel,
               threshold: float = 0.0) -> np.ndarray:
    """True where a grasp or pre-grasp keypoint collides with the fused volume."""
    kp = pregrasp_keypoints(rotations, origins, widths, model)
    return keypoints_collide_batch(grid, kp, threshold)


def prune_candidates(grid: TsdfGrid, candidates, model: GripperModel = GripperModel(),
                     threshold: float = 0.0):
    """Drop candidates that collide at the grasp or pre-grasp pose.  Returns ``(kept, pruned_count)``."""
    candidates = list(candidates)
    if not candidates:
        return [], 0
    rots = np.stack([p.rotation.as_matrix() for p, _ in candidates])
    orgs = np.array([p.translation for p, _ in candidates])
    wids = np.array([w for _, w in candidates])
    pruned = prune_mask(grid, rots, orgs, wids, model, threshold)
    kept = [c for c, bad in zip(candidates, pruned) if not bad]
    return kept, int(pruned.sum())


# -- labelling ------------------------------------------------------------------


def _label(position, rotation_matrix, width, quality) -> GraspLabel:
    """Build a label with every float rounded to 32 bits, as stored on disk."""
    q = matrix_to_quat(rotation_matrix).astype(_f32).astype(np.float64)
    q /= np.linalg.norm(q)
    q = q.astype(_f32).astype(np.float64)
    pos = np.asarray(position, dtype=_f32).astype(np.float64)
    return GraspLabel(tuple(pos), UnitQuaternion(*map(float, q)), float(_f32(width)), int(quality))


def label_scene(
    scene: SdfScene,
    grid: TsdfGrid,
    targets: LabelTargets = LabelTargets(),
    mu: float = 0.4,
    rng: np.random.Generator | None = None,
    model: GripperModel = GripperModel(),
    budget: int = 10_000,
    batch: int = 32,
    prune: bool = True,
    scene_id: int = 0,
    seed: int = 0,
    min_height: float | None = None,
    clearance: float = FINGER_CLEARANCE,
) -> SceneRecord:
    """Sample, prune and test grasps until the quotas are met or ``budget`` trials are spent.

    A trial with any successful roll yields one positive at the middle successful
    roll, labelled with the measured contact width.  Otherwise it yields one
    negative (pruned trials count as collisions).  Only one label is kept per voxel
    so labels never share a supervision site.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    size = grid.workspace_size
    pos, neg = [], []
    used = set()
    trials = 0
    stats = {"trials": 0, "candidates": 0, "pruned": 0, "oracle_calls": 0}
    while (len(pos) < targets.pos or len(neg) < targets.neg) and trials < budget:
        n = min(batch, budget - trials)
        cs = sample_candidate_set(grid, n, rng, model, min_height=min_height)
        if len(cs) == 0:
            break
        trials += n
        pruned = prune_mask(grid, cs.rotations, cs.origins, cs.widths, model) if prune else np.zeros(len(cs), bool)
        code = np.full(len(cs), COLLISION)
        width = np.zeros(len(cs))
        live = np.flatnonzero(~pruned)
        if live.size:
            res = grasp_oracle_batch(scene, cs.rotations[live], cs.origins[live], model, mu, clearance)
            code[live] = res.code
            width[live] = res.width
        stats["candidates"] += len(cs)
        stats["pruned"] += int(pruned.sum())
        stats["oracle_calls"] += int(live.size)
        for t in range(n):
            sl = slice(t * ROLLS, (t + 1) * ROLLS)
            origin = cs.origins[sl][0]
            if np.any(origin < 0.0) or np.any(origin >= size):
                continue
            vox = tuple(grid.voxel_index(origin))
            if vox in used:
                continue
            good = np.flatnonzero(code[sl] == OK)
            if good.size and len(pos) < targets.pos:
                k = good[(good.size - 1) // 2]
                pos.append(_label(origin, cs.rotations[sl][k], width[sl][k], 1))
                used.add(vox)
            elif not good.size and len(neg) < targets.neg:
                neg.append(_label(origin, cs.rotations[sl][0], 0.0, 0))
                used.add(vox)
    stats["trials"] = trials
    flagged = len(pos) < targets.pos or len(neg) < targets.neg
    return SceneRecord(grid, pos + neg, scene_id, seed, flagged, scene, stats)


# -- end-to-end generation ------------------------------------------------------


@dataclass(frozen=True)
class DatagenConfig:
    scenes: int = 10
    kind: str = "pile"
    objects: int = 4
    kinds: tuple = KINDS  # primitive shapes to draw from
    scale_lo: float = 0.65
    scale_hi: float = 1.7
    resolution: int = 40
    workspace_size: float = 0.4
    views: int = 6
    image_size: int = 96
    fov_deg: float = 80.0
    pos: int = 8
    neg: int = 64
    mu: float = 0.4
    budget: int = 10_000
    max_width: float = 0.08
    finger_depth: float = 0.05
    table_height: float = 0.05
    table_margin: float = 0.005  # surface points this close to the table are not sampled
    clearance: float = FINGER_CLEARANCE
    prune: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        problems = []
        if self.kind not in ("single", "pile", "packed"):
            problems.append(f"kind must be single, pile or packed, not {self.kind!r}")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            problems.append(f"kinds must be a non-empty subset of {KINDS}")
        for name in ("scenes", "objects", "resolution", "views", "image_size", "pos", "neg", "budget"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0 < self.scale_lo <= self.scale_hi:
            problems.append("need 0 < scale_lo <= scale_hi")
        if not self.mu > 0:
            problems.append("mu must be positive")
        if not 0 < self.fov_deg < 180:
            problems.append("fov_deg must lie in (0, 180)")
        if problems:
            raise ConfigError("invalid datagen config", problems)


def scene_seed(seed: int, index: int) -> int:
    """Independent 32-bit seed for scene ``index`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def fuse_scene(scene: SdfScene, cfg: DatagenConfig) -> TsdfGrid:
    from .volume import Intrinsics

    intr = Intrinsics.from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg)
    cams = orbit_cameras(cfg.workspace_size, cfg.views, intrinsics=intr)
    return tsdf_fuse(render_views(scene, cams), GridConfig(cfg.resolution, cfg.workspace_size))


def generate_record(cfg: DatagenConfig, index: int) -> SceneRecord:
    s = scene_seed(cfg.seed, index)
    model = GripperModel(cfg.max_width, cfg.finger_depth)
    scene = make_scene(cfg.kind, cfg.objects, (cfg.scale_lo, cfg.scale_hi), s, kinds=tuple(cfg.kinds),
                       max_width=cfg.max_width, workspace_size=cfg.workspace_size,
                       table_height=cfg.table_height)
    grid = fuse_scene(scene, cfg)
    rng = np.random.default_rng([s, 1])
    return label_scene(scene, grid, LabelTargets(cfg.pos, cfg.neg), cfg.mu, rng, model,
                       budget=cfg.budget, prune=cfg.prune, scene_id=index, seed=s,
                       min_height=cfg.table_height + cfg.table_margin, clearance=cfg.clearance)


def generate_dataset(cfg: DatagenConfig, threads: int = 1) -> list:
    """Records for scenes ``0 .. cfg.scenes - 1``; identical for any ``threads``."""
    if threads <= 1:
        return [generate_record(cfg, i) for i in range(cfg.scenes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: generate_record(cfg, i), range(cfg.scenes)))


# -- files ----------------------------------------------------------------------


def labels_to_bytes(labels) -> bytes:
    out = [LABEL_MAGIC, struct.pack("<II", LABEL_VERSION, len(labels))]
    for lab in labels:
        out.append(_LABEL_REC.pack(*lab.position, *lab.rotation.as_array(), lab.width, lab.quality))
    return b"".join(out)


def labels_from_bytes(data: bytes, path=None) -> list:
    if len(data) < 4 or data[:4] != LABEL_MAGIC:
        raise FormatError("bad label magic", path, 0)
    if len(data) < 12:
        raise FormatError("truncated label header", path, len(data))
    version, count = struct.unpack_from("<II", data, 4)
    if version != LABEL_VERSION:
        raise FormatError(f"unsupported label version {version}", path, 4)
    expected = 12 + count * _LABEL_REC.size
    if len(data) != expected:
        raise FormatError(f"label payload is {len(data)} bytes, expected {expected}", path,
                          min(len(data), expected))
    labels = []
    for i in range(count):
        off = 12 + i * _LABEL_REC.size
        px, py, pz, qw, qx, qy, qz, w, q = _LABEL_REC.unpack_from(data, off)
        try:
            labels.append(GraspLabel((px, py, pz), UnitQuaternion(qw, qx, qy, qz), w, q))
        except DomainError as exc:
            raise FormatError(f"invalid label record: {exc}", path, off) from exc
    return labels


def write_labels(labels, path) -> None:
    Path(path).write_bytes(labels_to_bytes(labels))


def read_labels(path) -> list:
    return labels_from_bytes(Path(path).read_bytes(), path)


MANIFEST_HEADER = "voxgrasp-dataset 1"


def _crc(path: Path) -> str:
    return f"{zlib.crc32(path.read_bytes()):08x}"


def write_dataset(records, directory) -> None:
    """Write ``scene_%06d.{tsdf,labels[,scene]}`` plus a checksummed ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for rec in records:
        stem = f"scene_{rec.scene_id:06d}"
        write_tsdf(rec.tsdf, d / f"{stem}.tsdf")
        write_labels(rec.labels, d / f"{stem}.labels")
        fields = [stem, f"seed={rec.seed}", f"flagged={int(rec.flagged)}",
                  f"tsdf={_crc(d / f'{stem}.tsdf')}", f"labels={_crc(d / f'{stem}.labels')}"]
        if rec.scene is not None:
            write_scene(rec.scene, d / f"{stem}.scene")
            fields.append(f"scene={_crc(d / f'{stem}.scene')}")
        lines.append(" ".join(fields))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> list:
    d = Path(directory)
    path = d / "manifest.txt"
    if not path.exists():
        raise FormatError("missing manifest", path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError("bad manifest header", path, 0)
    entries = []
    for n, line in enumerate(lines[1:], start=1):
        parts = line.split()
        try:
            entry = {"stem": parts[0]}
            entry.update(p.split("=", 1) for p in parts[1:])
            entry["seed"] = int(entry["seed"])
            entry["flagged"] = bool(int(entry["flagged"]))
            entry["id"] = int(parts[0].split("_")[1])
        except (IndexError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed manifest line: {line!r}", path, n) from exc
        entries.append(entry)
    return entries


def read_dataset(directory, indices=None) -> list:
    """Load records (optionally only the given manifest positions), verifying checksums."""
    d = Path(directory)
    entries = read_manifest(d)
    if indices is not None:
        entries = [entries[i] for i in indices]
    records = []
    for e in entries:
        stem = e["stem"]
        for ext in ("tsdf", "labels", "scene"):
            if ext in e:
                f = d / f"{stem}.{ext}"
                if not f.exists():
                    raise FormatError("missing dataset file", f)
                if _crc(f) != e[ext]:
                    raise FormatError("checksum mismatch", f)
        grid = read_tsdf(d / f"{stem}.tsdf")
        labels = read_labels(d / f"{stem}.labels")
        scene = read_scene(d / f"{stem}.scene") if "scene" in e else None
        records.append(SceneRecord(grid, labels, e["id"], e["seed"], e["flagged"], scene))
    return records


def split_indices(count: int, val_per: int = 100, total_per: int = 5100) -> tuple:
    """Train/validation split by index; the last ``count * 100 / 5100`` scenes validate."""
    n_val = int(round(count * val_per / total_per))
    n_val = min(max(n_val, 1 if count > 1 else 0), count)
    split = count - n_val
    return list(range(split)), list(range(split, count))
