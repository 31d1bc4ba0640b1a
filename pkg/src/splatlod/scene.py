"""Large-scene pipeline: chunk grid, camera assignment, skybox, per-chunk
assembly and consolidation into a single hierarchy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .build import BuildConfig, build_bvh, leaf_aabb_batch, match_orientations, merge_bottom_up, refresh_bounds
from .errors import EmptyScene
from .merge import merge_segments
from .model import NONE, Aabb, ChunkEntry, GaussianArrays, Hierarchy, SceneManifest, SfmPointSet, relayout, relayout_order

MIN_SHARED_POINTS = 50
SKYBOX_FALLOFF = 0.7


@dataclass
class ChunkSpec:
    grid_coord: tuple
    bounds: Aabb  # vertical extent is (-inf, inf)
    camera_ids: set = field(default_factory=set)
    sfm_point_ids: set = field(default_factory=set)


def ground_axes(up_axis: int = 2):
    return [a for a in range(3) if a != up_axis]


def _cam_items(cams):
    return list(cams.items()) if isinstance(cams, dict) else list(enumerate(cams))


def _rect(chunk: ChunkSpec, axes):
    return chunk.bounds.min[axes], chunk.bounds.max[axes]


def ground_distance(points, lo, hi) -> np.ndarray:
    """Distance in the ground plane from 2D ``points`` to the rectangle [lo, hi] (0 inside)."""
    gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=-1))


def _inside(points, lo, hi):
    return np.all((points >= lo) & (points <= hi), axis=-1)


def assign_cameras(chunk: ChunkSpec, cams, sfm: SfmPointSet, up_axis: int = 2) -> set:
    """Cameras inside the chunk, or inside the chunk scaled 2x about its center
    that observe more than 50 SfM points lying in the chunk."""
    axes = ground_axes(up_axis)
    lo, hi = _rect(chunk, axes)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    in_pts = _inside(sfm.positions[:, axes], lo, hi) if len(sfm.positions) else np.zeros(0, dtype=bool)
    out = set()
    for cid, cam in _cam_items(cams):
        p = cam.position[axes]
        if _inside(p, lo, hi):
            out.add(cid)
        elif _inside(p, center - 2 * half, center + 2 * half):
            seen = sfm.observed_points(cid)
            seen = seen[(seen >= 0) & (seen < len(in_pts))]
            if np.count_nonzero(in_pts[np.unique(seen)]) > MIN_SHARED_POINTS:
                out.add(cid)
    return out


def make_grid(sfm: SfmPointSet, cams, chunk_size: float, up_axis: int = 2) -> list:
    """Square grid over the ground rectangle of camera positions, anchored at
    its minimum corner; chunks without cameras are dropped."""
    if not chunk_size > 0:
        raise ValueError("chunk_size must be positive")
    items = _cam_items(cams)
    if not items:
        raise EmptyScene("no cameras")
    axes = ground_axes(up_axis)
    pos = np.array([c.position[axes] for _, c in items])
    origin = pos.min(axis=0)
    extent = pos.max(axis=0) - origin
    nx, ny = (max(1, math.ceil(e / chunk_size - 1e-12)) for e in extent)
    chunks = []
    for j in range(ny):
        for i in range(nx):
            lo = np.full(3, -np.inf)
            hi = np.full(3, np.inf)
            lo[axes] = origin + chunk_size * np.array([i, j])
            hi[axes] = lo[axes] + chunk_size
            ch = ChunkSpec((i, j), Aabb(lo, hi))
            ch.camera_ids = assign_cameras(ch, cams, sfm, up_axis)
            if not ch.camera_ids:
                continue
            if len(sfm.positions):
                ch.sfm_point_ids = set(np.flatnonzero(_inside(sfm.positions[:, axes], lo[axes], hi[axes])).tolist())
            chunks.append(ch)
    return chunks


def make_skybox(scene_diameter: float, count: int = 100_000, seed: int = 0, center=(0.0, 0.0, 0.0)) -> GaussianArrays:
    """Isotropic Gaussians spread uniformly on a sphere of radius 5x the scene diameter."""
    if not scene_diameter > 0:
        raise ValueError("scene diameter must be positive")
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = 5.0 * scene_diameter
    scale = 2 * np.pi * r / math.sqrt(count)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    return GaussianArrays(
        np.asarray(center, dtype=np.float64) + r * d,
        np.full((count, 3), scale),
        rot,
        np.full(count, SKYBOX_FALLOFF),
        np.zeros((count, 16, 3)),
    )


def scene_diameter(cams, sfm: SfmPointSet | None = None) -> float:
    pts = [c.position for _, c in _cam_items(cams)]
    if sfm is not None and len(sfm.positions):
        pts.extend(sfm.positions)
    pts = np.asarray(pts)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def chunk_leaves(chunk: ChunkSpec, trained, scaffold=None, up_axis: int = 2) -> GaussianArrays:
    """Leaves for one chunk: its trained Gaussians plus scaffold Gaussians
    lying outside the chunk as backdrop (later pruned by consolidation)."""
    parts = [trained if isinstance(trained, GaussianArrays) else GaussianArrays.from_list(trained)]
    if scaffold is not None and len(scaffold):
        axes = ground_axes(up_axis)
        lo, hi = _rect(chunk, axes)
        out = ~_inside(scaffold.means[:, axes], lo, hi)
        parts.append(scaffold.take(np.flatnonzero(out)))
    return GaussianArrays.concat(parts)


def build_chunk(chunk: ChunkSpec, trained, scaffold=None, cfg: BuildConfig = BuildConfig(), up_axis: int = 2) -> Hierarchy:
    return build_bvh(chunk_leaves(chunk, trained, scaffold, up_axis), cfg)


def _prune_leaves(h: Hierarchy, drop: np.ndarray, sigma_extent: float):
    """Remove the leaves flagged in ``drop``, collapse single-child nodes and
    re-merge the ancestors that lost leaves.  Returns None if nothing is left."""
    if not np.any(drop):
        return h
    n = len(h)
    alive_leaves = np.zeros(n, dtype=np.int64)
    alive_leaves[h.is_leaf & ~drop] = 1
    levels = h.depth_order()
    for level in reversed(levels):
        inner = level[h.child_count[level] > 0]
        for i in inner:
            ch = h.children(i)
            alive_leaves[i] = alive_leaves[ch.start:ch.stop].sum()
    if alive_leaves[0] == 0:
        return None
    alive = alive_leaves > 0
    live_children = np.zeros(n, dtype=np.int64)
    np.add.at(live_children, h.parent[1:][alive[1:]], 1)
    keep = alive & ~((h.child_count > 0) & (live_children == 1))
    touched = np.zeros(n, dtype=bool)
    for leaf in np.flatnonzero(drop & h.is_leaf):
        p = h.parent[leaf]
        while p >= 0 and not touched[p]:
            touched[p] = True
            p = h.parent[p]
    # nearest kept ancestor
    pa = np.full(n, NONE, dtype=np.int64)
    for level in levels[1:]:
        par = h.parent[level]
        pa[level] = np.where(keep[par], par, pa[par])
    root = int(np.flatnonzero(keep & (pa == NONE))[0])
    idx = np.flatnonzero(keep)
    remap = np.full(n, NONE, dtype=np.int64)
    remap[idx] = np.arange(len(idx))
    new_parent = np.where(pa[idx] >= 0, remap[np.maximum(pa[idx], 0)], NONE)
    new_parent[remap[root]] = NONE
    g = h.gaussians.take(idx)
    out = relayout(g, h.bounds_min[idx], h.bounds_max[idx], new_parent, int(remap[root]), h.sh_degree)
    flag = touched[idx]
    order = relayout_order(new_parent, int(remap[root]))
    affected = np.flatnonzero(flag[order] & (out.child_count > 0))
    merge_bottom_up(out, affected)
    refresh_bounds(out, sigma_extent)
    return out


def prune_chunk(chunk: ChunkSpec, h: Hierarchy, others: list, up_axis: int = 2, sigma_extent: float = 3.0):
    """Delete leaves outside ``chunk`` that are strictly closer to one of
    ``others`` (ground-plane distance to the chunk rectangles)."""
    axes = ground_axes(up_axis)
    leaves = h.leaf_indices
    p = h.gaussians.means[leaves][:, axes]
    lo, hi = _rect(chunk, axes)
    own = ground_distance(p, lo, hi)
    best = np.full(len(leaves), np.inf)
    for o in others:
        olo, ohi = _rect(o, axes)
        best = np.minimum(best, ground_distance(p, olo, ohi))
    drop = np.zeros(len(h), dtype=bool)
    drop[leaves] = (own > 0) & (best < own)
    return _prune_leaves(h, drop, sigma_extent)


def _concat_trees(trees):
    """Attach ``trees`` under a new root whose Gaussian merges their roots."""
    gs, lo, hi, par = [], [], [], []
    offset = 1
    roots = []
    for t in trees:
        gs.append(t.gaussians)
        lo.append(t.bounds_min)
        hi.append(t.bounds_max)
        p = t.parent.copy()
        p[p >= 0] += offset
        p[0] = 0
        par.append(p)
        roots.append(offset)
        offset += len(t)
    root_g = GaussianArrays.empty(1)
    g = GaussianArrays.concat([root_g] + gs)
    bmin = np.vstack([np.min([b[0] for b in lo], axis=0)[None]] + lo)
    bmax = np.vstack([np.max([b[0] for b in hi], axis=0)[None]] + hi)
    parent = np.concatenate([[NONE]] + par)
    h = relayout(g, bmin, bmax, parent, 0, trees[0].sh_degree)
    merged, _ = merge_segments(h.gaussians, h.first_child[:1], h.child_count[:1])
    for name in ("means", "scales", "rotations", "falloff", "sh"):
        getattr(h.gaussians, name)[0] = getattr(merged, name)[0]
    return h


def consolidate(chunks, skybox=None, up_axis: int = 2, cfg: BuildConfig = BuildConfig()) -> Hierarchy:
    """Prune cross-chunk leaves and put every chunk (and the skybox) under one root.

    ``chunks`` is a list of (ChunkSpec, Hierarchy); ``skybox`` is a
    Hierarchy or a set of Gaussians (built into a BVH).
    """
    chunks = list(chunks)
    if not chunks:
        raise EmptyScene("no chunks to consolidate")
    trees = []
    for i, (spec, h) in enumerate(chunks):
        others = [s for j, (s, _) in enumerate(chunks) if j != i]
        pruned = prune_chunk(spec, h, others, up_axis, cfg.sigma_extent)
        if pruned is not None:
            trees.append(pruned)
    if skybox is not None:
        trees.append(skybox if isinstance(skybox, Hierarchy) else build_bvh(skybox, cfg))
    if not trees:
        raise EmptyScene("every leaf was pruned")
    h = _concat_trees(trees)
    match_orientations(h)
    return h


def leaf_owner(h: Hierarchy) -> np.ndarray:
    """For each node, the index of the global root's child containing it."""
    owner = np.full(len(h), NONE, dtype=np.int64)
    for c in h.children(0):
        owner[c] = c
    for level in h.depth_order()[2:]:
        owner[level] = owner[h.parent[level]]
    return owner


def manifest_for(chunks: list, chunk_size: float, refs=None, scaffold_ref=None, skybox_ref=None,
                 diameter: float = 0.0, up_axis: int = 2) -> SceneManifest:
    refs = refs or [None] * len(chunks)
    entries = [ChunkEntry(tuple(c.grid_coord), c.bounds, sorted(c.camera_ids), r) for c, r in zip(chunks, refs)]
    return SceneManifest(chunk_size, entries, scaffold_ref, skybox_ref, diameter, up_axis)


def chunk_from_entry(e: ChunkEntry) -> ChunkSpec:
    return ChunkSpec(tuple(e.grid_coord), e.bounds, set(e.camera_ids))


def leaf_bounds(g: GaussianArrays, sigma_extent: float = 3.0) -> Aabb:
    lo, hi = leaf_aabb_batch(g, sigma_extent)
    return Aabb(lo.min(axis=0), hi.max(axis=0))
