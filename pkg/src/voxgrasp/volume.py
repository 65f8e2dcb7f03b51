"""Projective TSDF fusion, trilinear sampling, surface extraction and keypoint collision checks.

Volumes are indexed ``[i, j, k]`` along workspace ``x, y, z``.  Voxel ``(i, j, k)``
has its center at ``((i + 0.5) * voxel_size, ...)``; the workspace is the cube
``[0, workspace_size]^3``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .geometry import Pose, look_at

TSDF_MAGIC = b"VGTS"
TSDF_VERSION = 1
PRED_MAGIC = b"VGPR"
PRED_VERSION = 1


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> Intrinsics:
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(width, height, f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class DepthImage:
    depth: np.ndarray  # (height, width) z-depth in meters, 0 marks invalid pixels
    intrinsics: Intrinsics
    pose: Pose  # camera-to-workspace

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise DomainError("depth array does not match the intrinsics size")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise DomainError("depth values must be finite and non-negative")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


@dataclass(frozen=True)
class GridConfig:
    resolution: int = 40
    workspace_size: float = 0.4
    truncation: float | None = None  # defaults to 4 voxels

    @property
    def voxel_size(self) -> float:
        return self.workspace_size / self.resolution

    @property
    def trunc(self) -> float:
        return 4.0 * self.voxel_size if self.truncation is None else self.truncation


@dataclass
class TsdfGrid:
    values: np.ndarray  # (N, N, N) float32 in [-1, 1]
    weights: np.ndarray  # (N, N, N) float32
    voxel_size: float
    truncation: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.voxel_size = float(np.float32(self.voxel_size))
        self.truncation = float(np.float32(self.truncation))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def workspace_size(self) -> float:
        return self.voxel_size * self.resolution

    def voxel_centers(self) -> np.ndarray:
        n = self.resolution
        c = (np.arange(n) + 0.5) * self.voxel_size
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def voxel_index(self, points) -> np.ndarray:
        """Nearest voxel (the one containing the point), clipped into the grid."""
        idx = np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def __eq__(self, other):
        if not isinstance(other, TsdfGrid):
            return NotImplemented
        return (
            self.voxel_size == other.voxel_size
            and self.truncation == other.truncation
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.weights, other.weights)
        )


def orbit_cameras(
    workspace_size: float = 0.4,
    count: int = 6,
    elevation_deg: float = 45.0,
    radius_factor: float = 1.5,
    intrinsics: Intrinsics | None = None,
    target=None,
) -> list[tuple[Intrinsics, Pose]]:
    """Evenly spaced views on a ring around the workspace, all looking at ``target``."""
    if intrinsics is None:
        intrinsics = Intrinsics.from_fov(96, 96, 80.0)
    if target is None:
        target = np.full(3, workspace_size / 2.0)
    target = np.asarray(target, dtype=np.float64)
    r = radius_factor * workspace_size
    el = math.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = 2.0 * math.pi * k / count
        eye = target + r * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append((intrinsics, look_at(eye, target)))
    return cams


def tsdf_fuse(images: list[DepthImage], config: GridConfig, behind_floor: float = 0.05) -> TsdfGrid:
    """Weighted average of the truncated projective signed distance of every observing image.

    Each voxel accumulates ``clip(depth - z, ±τ) / τ`` from every image in which it
    projects onto a valid pixel with ``depth - z >= -τ``; unobserved voxels read +1.
    An observation in front of the surface has weight 1; behind it the weight
    falls linearly to ``behind_floor`` at ``-τ``.
    """
    if not images:
        raise DomainError("at least one depth image is required")
    n = config.resolution
    vs = config.voxel_size
    tau = config.trunc
    if tau < vs:
        raise DomainError("truncation must be at least one voxel")
    c = (np.arange(n) + 0.5) * vs
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    contrib = np.zeros((len(images), pts.shape[0]))
    weight = np.zeros((len(images), pts.shape[0]))
    for m, img in enumerate(images):
        sdf, ok = _projective_sdf(img, pts, tau)
        # rays grazing an occluding edge land behind it; trust them less the deeper they land
        w = np.clip(1.0 + sdf, behind_floor, 1.0)
        weight[m, ok] = w[ok]
        contrib[m, ok] = w[ok] * sdf[ok]
    # summing sorted contributions makes the result independent of image order
    acc = np.sort(contrib, axis=0).sum(axis=0)
    wsum = np.sort(weight, axis=0).sum(axis=0)
    values = np.ones(pts.shape[0])
    seen = wsum > 0
    values[seen] = acc[seen] / wsum[seen]
    return TsdfGrid(values.reshape(n, n, n), wsum.reshape(n, n, n), vs, tau)


def _projective_sdf(img: DepthImage, pts: np.ndarray, tau: float):
    """Normalized truncated SDF of ``pts`` seen from one image, plus the update mask."""
    k = img.intrinsics
    rot = img.pose.rotation.as_matrix()
    cam = (pts - np.asarray(img.pose.translation)) @ rot  # world -> camera
    z = cam[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    uf = k.fx * cam[:, 0] / zs + k.cx
    vf = k.fy * cam[:, 1] / zs + k.cy
    inside = front & (uf > -0.5) & (uf < k.width - 0.5) & (vf > -0.5) & (vf < k.height - 0.5)
    d = np.zeros(pts.shape[0])
    d[inside] = _lookup_depth(img.depth, uf[inside], vf[inside], tau)
    valid = inside & (d > 0)
    sdf = d - z
    ok = valid & (sdf >= -tau)
    return np.clip(sdf, -tau, tau) / tau, ok


def _lookup_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray, tau: float) -> np.ndarray:
    """Bilinear depth at subpixel positions.

    Projections whose four neighbouring pixels include a hole or straddle a depth
    jump of ``tau`` or more read as invalid (0).  Such mixed pixels carry the
    silhouette-grazing rays that otherwise smear the fused field near edges.
    """
    h, w = depth.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    d00 = depth[v0, u0]
    d01 = depth[v0, u0 + 1]
    d10 = depth[v0 + 1, u0]
    d11 = depth[v0 + 1, u0 + 1]
    quad = np.stack([d00, d01, d10, d11])
    smooth = (quad.min(axis=0) > 0) & (quad.max(axis=0) - quad.min(axis=0) < tau)
    bilinear = (d00 * (1 - fu) + d01 * fu) * (1 - fv) + (d10 * (1 - fu) + d11 * fu) * fv
    return np.where(smooth, bilinear, 0.0)


def observation_counts(images: list[DepthImage], config: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per voxel: number of views that update it, and number that see it unoccluded."""
    n = config.resolution
    c = (np.arange(n) + 0.5) * config.voxel_size
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    updated = np.zeros(pts.shape[0], dtype=np.int64)
    visible = np.zeros(pts.shape[0], dtype=np.int64)
    for img in images:
        sdf, ok = _projective_sdf(img, pts, config.trunc)
        updated += ok
        visible += ok & (sdf >= 0)
    return updated.reshape(n, n, n), visible.reshape(n, n, n)


def trilinear_sample_points(values, points, voxel_size: float) -> np.ndarray:
    """Sample ``values`` (``(N,N,N)`` or ``(C,N,N,N)``) at points ``(P, 3)``.

    Returns ``(P,)`` or ``(P, C)``.  Points beyond the outermost voxel centers take
    the boundary value along that axis.  No bounds check is done here.
    """
    vals = np.asarray(values)
    squeeze = vals.ndim == 3
    if squeeze:
        vals = vals[None]
    n = np.array(vals.shape[1:])
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u = np.clip(p / voxel_size - 0.5, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2).clip(0)
    f = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    out = np.zeros((p.shape[0], vals.shape[0]))
    for dx in (0, 1):
        ix = i1[:, 0] if dx else i0[:, 0]
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            iy = i1[:, 1] if dy else i0[:, 1]
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                iz = i1[:, 2] if dz else i0[:, 2]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                out += (wx * wy * wz)[:, None] * vals[:, ix, iy, iz].T
    return out[:, 0] if squeeze else out


def trilinear_sample(values, point, voxel_size: float):
    """Trilinear value at one workspace point; raises for points outside the workspace."""
    vals = np.asarray(values)
    size = vals.shape[-1] * voxel_size
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0.0) or np.any(p > size):
        raise DomainError(f"point {p} is outside the workspace [0, {size}]^3")
    out = trilinear_sample_points(vals, p[None], voxel_size)[0]
    return float(out) if vals.ndim == 3 else out


def surface_points_normals(grid: TsdfGrid, band: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Centers of observed near-surface voxels and their outward unit normals."""
    if band <= 0:
        raise DomainError("band must be positive")
    v = grid.values.astype(np.float64)
    gx, gy, gz = np.gradient(v)
    mask = (np.abs(v) < band) & (grid.weights > 0)
    g = np.stack([gx[mask], gy[mask], gz[mask]], axis=-1)
    norm = np.linalg.norm(g, axis=1)
    keep = norm >= 1e-6
    idx = np.argwhere(mask)[keep]
    points = (idx + 0.5) * grid.voxel_size
    normals = g[keep] / norm[keep][:, None]
    return points, normals


def keypoints_collide(grid: TsdfGrid, keypoints, threshold: float = 0.0) -> bool:
    return bool(keypoints_collide_batch(grid, np.asarray(keypoints)[None], threshold)[0])


def keypoints_collide_batch(grid: TsdfGrid, keypoints, threshold: float = 0.0) -> np.ndarray:
    """Collision flags for keypoint sets ``(K, M, 3)``; out-of-workspace points collide."""
    if not -1.0 < threshold < 1.0:
        raise DomainError("threshold must lie in (-1, 1)")
    kp = np.asarray(keypoints, dtype=np.float64)
    size = grid.workspace_size
    outside = np.any((kp < 0.0) | (kp > size), axis=-1)
    vals = trilinear_sample_points(grid.values, kp.reshape(-1, 3), grid.voxel_size).reshape(kp.shape[:-1])
    hit = outside | (vals < threshold)
    return np.any(hit, axis=-1)


# -- files ----------------------------------------------------------------------


def write_tsdf(grid: TsdfGrid, path) -> None:
    n = grid.resolution
    with open(path, "wb") as fh:
        fh.write(TSDF_MAGIC)
        fh.write(struct.pack("<IIff", TSDF_VERSION, n, grid.voxel_size, grid.truncation))
        fh.write(grid.values.astype("<f4").ravel(order="F").tobytes())
        fh.write(grid.weights.astype("<f4").ravel(order="F").tobytes())


def read_tsdf(path) -> TsdfGrid:
    data = Path(path).read_bytes()
    return tsdf_from_bytes(data, path)


def tsdf_from_bytes(data: bytes, path=None) -> TsdfGrid:
    if len(data) < 4 or data[:4] != TSDF_MAGIC:
        raise FormatError("bad TSDF magic", path, 0)
    if len(data) < 20:
        raise FormatError("truncated TSDF header", path, len(data))
    version, n, vs, tau = struct.unpack_from("<IIff", data, 4)
    if version != TSDF_VERSION:
        raise FormatError(f"unsupported TSDF version {version}", path, 4)
    count = n**3
    expected = 20 + 8 * count
    if len(data) != expected:
        raise FormatError(f"TSDF payload is {len(data)} bytes, expected {expected}", path, min(len(data), expected))
    vals = np.frombuffer(data, "<f4", count, 20).reshape((n, n, n), order="F")
    wts = np.frombuffer(data, "<f4", count, 20 + 4 * count).reshape((n, n, n), order="F")
    return TsdfGrid(vals.astype(np.float32), wts.astype(np.float32), vs, tau)


PRED_CHANNELS = ("quality", "rot_w", "rot_x", "rot_y", "rot_z", "width")


def write_prediction_volume(channels: np.ndarray, voxel_size: float, path) -> None:
    """Store a ``(6, N, N, N)`` volume of quality, quaternion (w, x, y, z) and width."""
    ch = np.asarray(channels)
    if ch.ndim != 4 or ch.shape[0] != len(PRED_CHANNELS):
        raise DomainError("prediction volume must be (6, N, N, N)")
    n = ch.shape[1]
    with open(path, "wb") as fh:
        fh.write(PRED_MAGIC)
        fh.write(struct.pack("<IIfI", PRED_VERSION, n, voxel_size, ch.shape[0]))
        for c in ch:
            fh.write(c.astype("<f4").ravel(order="F").tobytes())


def read_prediction_volume(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != PRED_MAGIC:
        raise FormatError("bad prediction magic", path, 0)
    if len(data) < 20:
        raise FormatError("truncated prediction header", path, len(data))
    version, n, vs, nch = struct.unpack_from("<IIfI", data, 4)
    if version != PRED_VERSION:
        raise FormatError(f"unsupported prediction version {version}", path, 4)
    count = n**3
    expected = 20 + 4 * count * nch
    if len(data) != expected:
        raise FormatError(f"prediction payload is {len(data)} bytes, expected {expected}", path, min(len(data), expected))
    chans = [
        np.frombuffer(data, "<f4", count, 20 + 4 * count * c).reshape((n, n, n), order="F") for c in range(nch)
    ]
    return np.stack(chans).astype(np.float32), vs
