"""Deterministic geometric preprocessing for scene point clouds.

Everything here is exact and seed-deterministic: voxel downsampling with
centroid representatives, greedy farthest-point sampling, brute-force exact
k-nearest neighbors, and the multi-level pyramid index with many-to-one
parent maps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SCENE_BLOCK_VERSION = 1


@dataclass
class PointCloud:
    """N x 3 positions in meters, scene frame."""

    positions: np.ndarray

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class PyramidIndex:
    """FPS selections per level and nearest-coarse parent maps between levels.

    selections[k] indexes level k-1 points (level 0 is the input cloud, so
    selections[0] indexes the cloud); parents[k][i] is the index at level k+1
    of the parent of point i at level k.
    """

    level_sizes: list[int]
    selections: list[np.ndarray]
    parents: list[np.ndarray]


def voxel_downsample(pc: PointCloud, cell: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel key for determinism."""
    if cell <= 0:
        raise ValueError("voxel cell size must be positive")
    pos = pc.positions
    keys = np.floor(pos / cell).astype(np.int64)
    # lexicographic voxel ordering
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    pos_sorted = pos[order]
    boundaries = np.ones(len(pos), dtype=bool)
    boundaries[1:] = np.any(keys_sorted[1:] != keys_sorted[:-1], axis=1)
    group_ids = np.cumsum(boundaries) - 1
    n_groups = group_ids[-1] + 1
    sums = np.zeros((n_groups, 3))
    np.add.at(sums, group_ids, pos_sorted)
    counts = np.bincount(group_ids, minlength=n_groups)
    return PointCloud(sums / counts[:, None])


def fps(pc: PointCloud, count: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min selection of `count` indices; ties break to lowest index.

    The first index is drawn from the seeded rng (augmentation hook). If the
    cloud is smaller than `count`, indices cycle so the output length is
    always exactly `count`.
    """
    if count < 1:
        raise ValueError("fps count must be >= 1")
    pos = pc.positions
    n = len(pos)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    if n <= count:
        perm = _fps_greedy(pos, n, first)
        reps = np.resize(perm, count)
        return reps
    return _fps_greedy(pos, count, first)


def _fps_greedy(pos: np.ndarray, count: int, first: int) -> np.ndarray:
    n = len(pos)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = first
    d2 = np.sum((pos - pos[first]) ** 2, axis=1)
    for k in range(1, count):
        # argmax returns the lowest index among ties
        idx = int(np.argmax(d2))
        chosen[k] = idx
        d2 = np.minimum(d2, np.sum((pos - pos[idx]) ** 2, axis=1))
    return chosen


def knn(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Exact Euclidean k-NN indices (P x k), ties broken by lowest index."""
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    q_n, p_n = len(queries), len(points)
    if p_n < k:
        raise ValueError(f"knn requires at least k={k} points, got {p_n}")
    d2 = (
        np.sum(queries**2, axis=1)[:, None]
        - 2.0 * queries @ points.T
        + np.sum(points**2, axis=1)[None, :]
    )
    # stable sort on distance keeps index order among exact ties; argpartition
    # alone does not guarantee the tie rule
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx


def build_pyramid(pc: PointCloud, level_sizes: list[int], seed: int = 0) -> PyramidIndex:
    """FPS selection per level plus nearest-selected parent maps."""
    sizes = list(level_sizes)
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"level sizes must strictly decrease, got {sizes}")
    if len(pc) < 1:
        raise ValueError("empty cloud")
    selections = []
    parents = []
    current = pc.positions
    rng = np.random.default_rng(seed)
    if sizes and sizes[0] != len(current):
        raise ValueError(
            f"level 0 size {sizes[0]} must equal the preprocessed cloud size {len(current)}"
        )
    for target in sizes[1:]:
        sub_seed = int(rng.integers(2**63 - 1))
        sel = fps(PointCloud(current), target, seed=sub_seed)
        coarse = current[sel]
        parent = knn(current, coarse, 1)[:, 0]
        selections.append(sel)
        parents.append(parent)
        current = coarse
    return PyramidIndex(sizes, selections, parents)


def ancestors(pyr: PyramidIndex, level0_index: np.ndarray) -> list[np.ndarray]:
    """Indices of each level-0 point's ancestor at every coarser level."""
    out = []
    idx = np.asarray(level0_index)
    for parent in pyr.parents:
        idx = parent[idx]
        out.append(idx)
    return out


def preprocess_cloud(raw: PointCloud, cell: float, cardinality: int, seed: int = 0) -> PointCloud:
    """Voxel downsample then FPS to the fixed cardinality."""
    vox = voxel_downsample(raw, cell)
    sel = fps(vox, cardinality, seed=seed)
    return PointCloud(vox.positions[sel])


# ---------------------------------------------------------------------------
# scene block serialization: u32 version, u32 point count, f32 LE positions


def write_scene_block(f, pc: PointCloud) -> None:
    f.write(struct.pack("<II", SCENE_BLOCK_VERSION, len(pc)))
    f.write(np.ascontiguousarray(pc.positions, dtype="<f4").tobytes())


def read_scene_block(f) -> PointCloud:
    version, count = struct.unpack("<II", f.read(8))
    if version != SCENE_BLOCK_VERSION:
        raise ValueError(f"unsupported scene block version {version}")
    raw = f.read(12 * count)
    if len(raw) != 12 * count:
        raise ValueError("truncated scene block")
    return PointCloud(np.frombuffer(raw, dtype="<f4").astype(float).reshape(count, 3))
