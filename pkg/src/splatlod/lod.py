"""Granularity, cut selection and parent-to-child transitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Aabb, CameraModel, CutEntry, Gaussian, Hierarchy, HierarchyNode, quat_normalize
from .render.project import SplatBatch
from .render.raster import ALPHA_MAX

NEAR = 0.01


@dataclass(frozen=True)
class GranularityQuery:
    camera: CameraModel
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _box_granularity(lo, hi, cam: CameraModel) -> np.ndarray:
    """Projected size of the largest box side at the box's closest point to
    the camera.  Closer than NEAR (or containing the camera) gives +inf."""
    lo = np.asarray(lo, dtype=np.float64).reshape(-1, 3)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1, 3)
    c = cam.position
    gap = np.maximum(np.maximum(lo - c, c - hi), 0.0)
    dist = np.sqrt(np.einsum("ij,ij->i", gap, gap))
    size = (hi - lo).max(axis=1)
    with np.errstate(divide="ignore"):
        eps = np.where(dist > NEAR, cam.focal.max() * size / np.maximum(dist, NEAR), np.inf)
    return eps


def granularity(node, cam: CameraModel) -> float:
    """Screen size in pixels of the node's bounding box (largest side)."""
    box = node.bounds if isinstance(node, HierarchyNode) else node
    if not isinstance(box, Aabb):
        raise TypeError("expected a HierarchyNode or Aabb")
    return float(_box_granularity(box.min, box.max, cam)[0])


def granularities(h: Hierarchy, cam: CameraModel) -> np.ndarray:
    return _box_granularity(h.bounds_min, h.bounds_max, cam)


def interp_weight(eps_n: float, eps_p: float, tau: float) -> float:
    """(tau - eps_n) / (eps_p - eps_n) clamped to [0, 1]; 0 means the node
    looks like itself, 1 like its parent.  Degenerate spans give 0."""
    return float(interp_weights(np.asarray([eps_n]), np.asarray([eps_p]), tau)[0])


def interp_weights(eps_n, eps_p, tau) -> np.ndarray:
    eps_n = np.asarray(eps_n, dtype=np.float64)
    eps_p = np.asarray(eps_p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        span = eps_p - eps_n
        t = (tau - eps_n) / span
    t = np.where((span > 0) & np.isfinite(t), t, 0.0)
    return np.clip(t, 0.0, 1.0)


def transition_alpha(alpha_p, k):
    """Per-child alpha so that k children blended over one pixel cover alpha_p."""
    k = np.asarray(k)
    if np.any(k < 1):
        raise ValueError("k must be >= 1")
    out = 1.0 - (1.0 - np.asarray(alpha_p, dtype=np.float64)) ** (1.0 / k)
    return float(out) if np.ndim(out) == 0 else out


class Cut:
    """Selected nodes with their transition weight and alpha'.

    Indexing and iteration yield :class:`CutEntry` values; the underlying
    arrays are available as ``nodes``, ``t`` and ``alpha_prime``.
    """

    def __init__(self, nodes, t, alpha_prime, tau=None):
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.float64)
        self.alpha_prime = np.asarray(alpha_prime, dtype=np.float64)
        self.tau = tau

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i) -> CutEntry:
        return CutEntry(int(self.nodes[i]), float(self.t[i]), float(self.alpha_prime[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def node_set(self) -> set:
        return set(self.nodes.tolist())


def select_cut(h: Hierarchy, query, tau: float | None = None) -> Cut:
    """Nodes that meet ``tau`` while their parent does not, plus leaves whose
    ancestors all fail.  Accepts a GranularityQuery or (camera, tau)."""
    if not isinstance(query, GranularityQuery):
        query = GranularityQuery(query, tau)
    tau = query.tau
    eps = granularities(h, query.camera)
    has_parent = h.parent >= 0
    eps_p = np.where(has_parent, eps[np.maximum(h.parent, 0)], np.inf)
    nodes = np.flatnonzero((eps_p > tau) & ((eps <= tau) | h.is_leaf))
    t = interp_weights(eps[nodes], eps_p[nodes], tau)
    par = h.parent[nodes]
    ap = np.zeros(len(nodes))
    inner = par >= 0
    fp = np.minimum(h.gaussians.falloff[par[inner]], ALPHA_MAX)
    ap[inner] = transition_alpha(fp, h.child_count[par[inner]])
    return Cut(nodes, t, ap, tau)


def interpolated_gaussian(child: Gaussian, parent: Gaussian, t: float, k: int = 1) -> Gaussian:
    """Child/parent blend with child weight ``t`` (1 = child, 0 = parent).

    The falloff channel mixes the child falloff with alpha' of the parent
    split over ``k`` siblings; the renderer applies the same mix per pixel.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0:
        return child
    qc = child.rotation if np.dot(child.rotation, parent.rotation) >= 0 else -child.rotation
    ap = transition_alpha(min(parent.falloff, ALPHA_MAX), k)
    return Gaussian(
        t * child.mean + (1 - t) * parent.mean,
        t * child.scale + (1 - t) * parent.scale,
        quat_normalize(t * qc + (1 - t) * parent.rotation),
        t * child.falloff + (1 - t) * ap,
        t * child.sh + (1 - t) * parent.sh,
    )


def transition_batch(h: Hierarchy, nodes, child_weight) -> SplatBatch:
    """Splats for ``nodes`` where each node is blended toward its parent with
    weight ``1 - child_weight``.  Quaternions are sign-aligned and linearly
    mixed (the renderer normalizes them)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    b = np.asarray(child_weight, dtype=np.float64).reshape(len(nodes))
    par = h.parent[nodes]
    b = np.where(par >= 0, b, 1.0)
    p = np.where(par >= 0, par, nodes)
    g = h.gaussians
    qc = g.rotations[nodes]
    qp = g.rotations[p]
    flip = np.einsum("ij,ij->i", qc, qp) < 0
    qc = np.where(flip[:, None], -qc, qc)
    bb = b[:, None]
    moving = b < 1.0
    return SplatBatch(
        bb * g.means[nodes] + (1 - bb) * g.means[p],
        bb * g.scales[nodes] + (1 - bb) * g.scales[p],
        np.where(moving[:, None], bb * qc + (1 - bb) * qp, g.rotations[nodes]),
        g.falloff[nodes],
        b[:, None, None] * g.sh[nodes] + (1 - b[:, None, None]) * g.sh[p],
        t=b,
        parent_falloff=np.where(moving, g.falloff[p], 0.0),
        k=np.where(moving, h.child_count[p], 1),
        group=np.where(moving, p, -1),
    )


def cut_batch(h: Hierarchy, cut: Cut) -> SplatBatch:
    """Render-ready splats for a cut (child weight = 1 - cut.t)."""
    return transition_batch(h, cut.nodes, 1.0 - cut.t)


def render_cut(h: Hierarchy, cam: CameraModel, tau: float, **kw):
    from .render import render

    return render(cut_batch(h, select_cut(h, cam, tau)), cam, **kw)
