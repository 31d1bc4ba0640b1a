"""Hierarchy construction: median-split BVH, bottom-up merging, orientation
matching, and compaction of rarely useful levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .merge import match_orientation_batch, merge_segments
from .model import NONE, Aabb, GaussianArrays, Hierarchy, as_arrays, covariance_from, relayout


@dataclass(frozen=True)
class BuildConfig:
    sigma_extent: float = 3.0
    min_leaf_per_node: int = 1

    def __post_init__(self):
        if not self.sigma_extent > 0:
            raise ValueError("sigma_extent must be positive")


def leaf_aabb_batch(g: GaussianArrays, sigma_extent: float = 3.0):
    half = sigma_extent * np.sqrt(np.diagonal(covariance_from(g.scales, g.rotations), axis1=1, axis2=2))
    return g.means - half, g.means + half


def leaf_aabb(g, cfg: BuildConfig = BuildConfig()) -> Aabb:
    """Axis-aligned box of the ``sigma_extent`` ellipsoid of one Gaussian."""
    lo, hi = leaf_aabb_batch(as_arrays([g]), cfg.sigma_extent)
    return Aabb(lo[0], hi[0])


@njit(cache=True)
def _median_split(means, lo, hi):
    """Top-down binary median split.

    Nodes are allocated in processing order, so the two children of a node
    are adjacent.  Returns parent, first_child, child_count, leaf_of (input
    index for leaf nodes, -1 otherwise) and node bounds.
    """
    n = means.shape[0]
    m = 2 * n - 1
    parent = np.full(m, -1, dtype=np.int64)
    first = np.full(m, -1, dtype=np.int64)
    count = np.zeros(m, dtype=np.int64)
    leaf_of = np.full(m, -1, dtype=np.int64)
    rng_lo = np.zeros(m, dtype=np.int64)
    rng_hi = np.zeros(m, dtype=np.int64)
    bmin = np.empty((m, 3))
    bmax = np.empty((m, 3))
    order = np.arange(n)
    scratch = np.empty(n, dtype=np.int64)
    rng_hi[0] = n
    used = 1
    i = 0
    while i < used:
        s = rng_lo[i]
        e = rng_hi[i]
        for k in range(3):
            bmin[i, k] = np.inf
            bmax[i, k] = -np.inf
        for j in range(s, e):
            idx = order[j]
            for k in range(3):
                if lo[idx, k] < bmin[i, k]:
                    bmin[i, k] = lo[idx, k]
                if hi[idx, k] > bmax[i, k]:
                    bmax[i, k] = hi[idx, k]
        if e - s == 1:
            leaf_of[i] = order[s]
            i += 1
            continue
        axis = 0
        best = bmax[i, 0] - bmin[i, 0]
        for k in range(1, 3):
            if bmax[i, k] - bmin[i, k] > best:
                best = bmax[i, k] - bmin[i, k]
                axis = k
        proj = np.empty(e - s)
        for j in range(s, e):
            proj[j - s] = means[order[j], axis]
        med = np.median(proj)
        n_low = 0
        for j in range(e - s):
            if proj[j] < med:
                n_low += 1
        if n_low == 0 or n_low == e - s:
            # degenerate: stable sort by projection, split at the middle
            perm = np.argsort(proj, kind="mergesort")
            for j in range(e - s):
                scratch[j] = order[s + perm[j]]
            for j in range(e - s):
                order[s + j] = scratch[j]
            n_low = (e - s) // 2
        else:
            a = 0
            for j in range(e - s):
                if proj[j] < med:
                    scratch[a] = order[s + j]
                    a += 1
            for j in range(e - s):
                if not proj[j] < med:
                    scratch[a] = order[s + j]
                    a += 1
            for j in range(e - s):
                order[s + j] = scratch[j]
        c = used
        first[i] = c
        count[i] = 2
        parent[c] = i
        parent[c + 1] = i
        rng_lo[c] = s
        rng_hi[c] = s + n_low
        rng_lo[c + 1] = s + n_low
        rng_hi[c + 1] = e
        used += 2
        i += 1
    return parent, first, count, leaf_of, bmin, bmax


def merge_bottom_up(h: Hierarchy, nodes=None) -> Hierarchy:
    """Recompute interior Gaussians from their children, deepest level first.

    ``nodes`` restricts the update to the given interior nodes (and is
    processed in depth order); by default every interior node is merged.
    """
    levels = h.depth_order()
    restrict = None
    if nodes is not None:
        restrict = np.zeros(len(h), dtype=bool)
        restrict[np.asarray(nodes, dtype=np.int64)] = True
    g = h.gaussians
    for level in reversed(levels):
        inner = level[h.child_count[level] > 0]
        if restrict is not None:
            inner = inner[restrict[inner]]
        if len(inner) == 0:
            continue
        merged, _ = merge_segments(g, h.first_child[inner], h.child_count[inner])
        g.means[inner] = merged.means
        g.scales[inner] = merged.scales
        g.rotations[inner] = merged.rotations
        g.falloff[inner] = merged.falloff
        g.sh[inner] = merged.sh
    return h


def match_orientations(h: Hierarchy) -> Hierarchy:
    """Root-down pass re-labelling child axes to minimise rotation w.r.t. the parent."""
    g = h.gaussians
    for level in h.depth_order()[1:]:
        par = h.parent[level]
        s, q = match_orientation_batch(g.scales[level], g.rotations[level], g.rotations[par])
        g.scales[level] = s
        g.rotations[level] = q
    return h


def refresh_bounds(h: Hierarchy, sigma_extent: float = 3.0) -> Hierarchy:
    """Leaf boxes from the Gaussians, interior boxes as unions of children."""
    leaves = h.leaf_indices
    lo, hi = leaf_aabb_batch(h.gaussians.take(leaves), sigma_extent)
    h.bounds_min[leaves] = lo
    h.bounds_max[leaves] = hi
    for level in reversed(h.depth_order()):
        inner = level[h.child_count[level] > 0]
        for i in inner:
            ch = h.children(i)
            h.bounds_min[i] = h.bounds_min[ch.start:ch.stop].min(axis=0)
            h.bounds_max[i] = h.bounds_max[ch.start:ch.stop].max(axis=0)
    return h


def build_bvh(leaves, cfg: BuildConfig = BuildConfig()) -> Hierarchy:
    """Median-split BVH over ``leaves`` with merged interior nodes.

    The split axis is the longest axis of the node's box; means on or above
    the median of the projections go to the upper child.
    """
    g = as_arrays(leaves)
    n = len(g)
    if n == 0:
        raise ValueError("need at least one leaf")
    lo, hi = leaf_aabb_batch(g, cfg.sigma_extent)
    parent, first, count, leaf_of, bmin, bmax = _median_split(
        np.ascontiguousarray(g.means), np.ascontiguousarray(lo), np.ascontiguousarray(hi)
    )
    m = len(parent)
    nodes = GaussianArrays.empty(m)
    is_leaf = leaf_of >= 0
    src = leaf_of[is_leaf]
    nodes.means[is_leaf] = g.means[src]
    nodes.scales[is_leaf] = g.scales[src]
    nodes.rotations[is_leaf] = g.rotations[src]
    nodes.falloff[is_leaf] = g.falloff[src]
    nodes.sh[is_leaf] = g.sh[src]
    h = Hierarchy(nodes, bmin, bmax, parent, first, count)
    merge_bottom_up(h)
    match_orientations(h)
    return h


def leaf_order(h: Hierarchy) -> np.ndarray:
    """Leaf node indices sorted by node index (stable identity for comparisons)."""
    return h.leaf_indices


# ---------------------------------------------------------------------------
# compaction
# ---------------------------------------------------------------------------

def _node_depths(parent):
    depth = np.zeros(len(parent), dtype=np.int64)
    # parents always precede children in the layouts produced here
    for i in range(1, len(parent)):
        depth[i] = depth[parent[i]] + 1
    return depth


def compact(h: Hierarchy, cams, tau_min: float = 3.0, tau_max: float | None = None) -> Hierarchy:
    """Remove interior nodes that no doubling granularity level needs.

    Starting at ``tau_min`` and doubling up to ``tau_max`` (default: half the
    largest camera resolution), the bottom-most nodes of the union of cuts
    over ``cams`` are marked relevant and every unmarked node between them
    and already-marked descendants is removed; surviving children are
    re-attached to their nearest surviving ancestor.
    """
    from .lod import granularities

    cams = list(cams)
    if not cams:
        raise ValueError("need at least one camera")
    if tau_max is None:
        tau_max = max(max(c.resolution) for c in cams) / 2.0
    if tau_max < tau_min:
        raise ValueError("tau_max must be >= tau_min")
    n = len(h)
    if n == 1:
        return h.copy()

    parent = h.parent.copy()
    depth = _node_depths(parent)
    by_depth = np.argsort(depth, kind="stable")
    leaf = h.is_leaf
    eps = [granularities(h, c) for c in cams]
    alive = np.ones(n, dtype=bool)
    marked = leaf.copy()
    pa = parent.copy()  # nearest alive ancestor

    tau = tau_min
    while tau <= tau_max:
        union = np.zeros(n, dtype=bool)
        for e in eps:
            ep = np.where(pa >= 0, e[np.maximum(pa, 0)], np.inf)
            sel = alive & (((e <= tau) & (ep > tau)) | (leaf & (e > tau)))
            union |= sel
        # bottom-most: union nodes without union descendants
        has_desc = np.zeros(n, dtype=bool)
        for i in by_depth[::-1]:
            if pa[i] >= 0 and alive[i] and (union[i] or has_desc[i]):
                has_desc[pa[i]] = True
        bottom = union & ~has_desc
        newly = bottom & ~marked
        marked |= bottom
        # everything unmarked below a newly marked node goes
        under = np.zeros(n, dtype=bool)
        for i in by_depth:
            p = pa[i]
            if p >= 0 and alive[i]:
                under[i] = under[p] or newly[p]
        doomed = under & ~marked & alive
        alive &= ~doomed
        for i in by_depth:
            p = pa[i]
            while p >= 0 and not alive[p]:
                p = pa[p]
            pa[i] = p
        tau *= 2.0

    keep = np.flatnonzero(alive)
    remap = np.full(n, NONE, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    new_parent = np.where(pa[keep] >= 0, remap[np.maximum(pa[keep], 0)], NONE)
    return relayout(h.gaussians.take(keep), h.bounds_min[keep], h.bounds_max[keep], new_parent, 0, h.sh_degree)
