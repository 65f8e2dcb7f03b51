"""Contrastive feature enhancement with a nearest-neighbour memory bank.

Features of every positive grasp point are pulled out of each pyramid level by
trilinear interpolation, concatenated, projected to a unit embedding, and
attracted toward their nearest neighbour among embeddings of earlier steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import ParamStore, Tensor


class MemoryBank:
    """FIFO ring of unit-norm embeddings.  Slot ``i`` is a fixed storage position."""

    def __init__(self, capacity: int = 512, dim: int = 32, warmup: int | None = None):
        if capacity < 1 or dim < 1:
            raise DomainError("bank capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.warmup = max(1, capacity // 8) if warmup is None else warmup
        self.entries = np.zeros((capacity, dim))
        self.fill = 0
        self._next = 0  # slot written by the next push

    @property
    def ready(self) -> bool:
        return self.fill >= self.warmup

    def stored(self) -> np.ndarray:
        """Occupied slots, in slot order."""
        return self.entries[: self.fill] if self.fill < self.capacity else self.entries

    def in_age_order(self) -> np.ndarray:
        """Stored embeddings from oldest to newest."""
        if self.fill < self.capacity:
            return self.entries[: self.fill].copy()
        return np.roll(self.entries, -self._next, axis=0)

    def push(self, z) -> None:
        """Append rows of ``z`` (normalized here) in order, overwriting the oldest when full."""
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.where(norms > 0, z / np.where(norms > 0, norms, 1.0), np.eye(1, self.dim))
        for row in z:
            self.entries[self._next] = row
            self._next = (self._next + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)


def bank_update(bank: MemoryBank, z) -> None:
    bank.push(z.data if isinstance(z, Tensor) else z)


def nn_lookup_batch(z, bank: MemoryBank) -> tuple:
    """Nearest stored entry (largest dot product, lowest slot on ties) for each row of ``z``.

    Returns ``(neighbours (P, dim), slots (P,))``.  Raises when the bank is not warm.
    """
    if not bank.ready:
        raise DomainError("memory bank below warmup")
    z = np.asarray(z, dtype=np.float64).reshape(-1, bank.dim)
    stored = bank.stored()
    scores = z @ stored.T
    slots = np.argmax(scores, axis=1)  # first maximum = lowest slot
    return stored[slots].copy(), slots


def nn_lookup(z, bank: MemoryBank) -> np.ndarray:
    return nn_lookup_batch(np.asarray(z)[None], bank)[0][0]


def extract_positive_embeddings(levels, positions, voxel_size: float) -> Tensor:
    """Concatenated per-level features at workspace ``positions`` ``(P, 3)``.

    Level ``l`` (0-based) has voxel size ``voxel_size * 2**l``; its voxel ``i`` is
    centered at ``(i + 0.5)`` of those voxels.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    size = voxel_size * levels[0].shape[1]
    if np.any(pos < 0.0) or np.any(pos > size):
        raise DomainError("positions must lie inside the workspace")
    parts = []
    for lvl, vol in enumerate(levels):
        vs = voxel_size * 2**lvl
        parts.append(T.trilinear_points(vol, pos / vs - 0.5))
    return T.concat(parts, axis=1)


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    hidden: int = 32
    out_dim: int = 32


def init_projection(store: ParamStore, spec: HeadSpec, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 7])
    dims = [spec.in_dim, spec.hidden, spec.hidden, spec.out_dim]
    for i in range(3):
        bound = np.sqrt(6.0 / dims[i])
        store.add(f"proj.l{i + 1}.w", rng.uniform(-bound, bound, size=(dims[i + 1], dims[i])))
        store.add(f"proj.l{i + 1}.b", np.zeros(dims[i + 1]))


def project(store: ParamStore, x: Tensor) -> tuple:
    """Three linear layers with rectifiers between, then L2 normalization.

    Returns ``(z, degenerate)``; rows whose pre-normalization vector is zero come
    back as ``e1`` and are flagged.
    """
    if x.shape[-1] != store.params["proj.l1.w"].shape[1]:
        raise ShapeError("embedding width does not match the projection head")
    h = T.relu(T.linear(x, store["proj.l1.w"], store["proj.l1.b"]))
    h = T.relu(T.linear(h, store["proj.l2.w"], store["proj.l2.b"]))
    h = T.linear(h, store["proj.l3.w"], store["proj.l3.b"])
    return T.normalize_rows(h)


def contrastive_loss(z: Tensor, bank: MemoryBank) -> tuple:
    """``-mean_p <z_p, NN(z_p)>`` with neighbours held constant.  Returns ``(loss, ready)``.

    When the bank is below warmup the loss is a zero constant and ``ready`` is False.
    """
    if z.shape[0] < 1:
        raise DomainError("need at least one embedding")
    if not bank.ready:
        return Tensor(np.zeros((), dtype=z.dtype)), False
    nn, _ = nn_lookup_batch(z.data, bank)
    dots = T.sum_axis(T.mul(z, nn.astype(z.dtype)), 1)
    return T.scale(T.mean(dots), -1.0), True
