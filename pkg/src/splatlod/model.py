"""Shared domain types: Gaussians, cameras, boxes and the LOD hierarchy.

The hierarchy keeps its attributes as flat numpy arrays (one row per node) so
that cut selection, merging and rendering can run vectorized.  Per-node views
(:class:`HierarchyNode`) are materialized on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2  # 16
NONE = -1  # "no node" marker for parent/child indices


# ---------------------------------------------------------------------------
# quaternion helpers, (w, x, y, z) convention
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrix of (possibly batched) unit quaternions."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r):
    """Unit quaternion (w >= 0) of (possibly batched) proper rotation matrices."""
    r = np.asarray(r, dtype=np.float64)
    shape = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    m00, m11, m22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    tr = m00 + m11 + m22
    # branch on the numerically largest quaternion component
    which = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)

    s = np.sqrt(np.maximum(1.0 + tr, 1e-300)) * 2
    c0 = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], 1)
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 1e-300)) * 2
    c1 = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], 1)
    s = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 1e-300)) * 2
    c2 = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], 1)
    s = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 1e-300)) * 2
    c3 = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s, (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], 1)
    q = np.choose(which[:, None], [c0, c1, c2, c3])
    q = quat_normalize(q)
    q[q[:, 0] < 0] *= -1
    return q.reshape(shape + (4,))


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def covariance_from(scale, rotation):
    """Sigma = R diag(scale^2) R^T, batched over leading axes."""
    r = quat_to_rotmat(rotation)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return (r * s2[..., None, :]) @ np.swapaxes(r, -1, -2)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _as_sh(sh):
    sh = np.asarray(sh, dtype=np.float64)
    if sh.size == 3 * SH_COEFFS:
        return sh.reshape(SH_COEFFS, 3)
    if sh.ndim == 2 and sh.shape[1] == 3 and sh.shape[0] < SH_COEFFS:
        # lower-degree input, zero-pad
        out = np.zeros((SH_COEFFS, 3))
        out[: sh.shape[0]] = sh
        return out
    raise ValueError(f"cannot interpret SH array of shape {sh.shape}")


@dataclass(frozen=True, eq=False)
class Gaussian:
    """One splat primitive.

    ``falloff`` is the opacity for leaves; merged interior nodes may carry a
    value above 1, which is only clamped when blending.
    ``sh`` is stored as (16, 3): coefficient-major, RGB last.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    falloff: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if not np.all(scale > 0):
            raise ValueError(f"scale must be positive, got {scale}")
        n = np.linalg.norm(rot)
        if abs(n - 1.0) > 1e-6:
            if n == 0:
                raise ValueError("zero quaternion")
            rot = rot / n
        if not self.falloff >= 0:
            raise ValueError(f"falloff must be non-negative, got {self.falloff}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "falloff", float(self.falloff))
        object.__setattr__(self, "sh", _as_sh(self.sh))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.scale, self.rotation)

    def replace(self, **kw) -> "Gaussian":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "rotation": self.rotation.tolist(),
            "falloff": self.falloff,
            "sh": self.sh.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Gaussian":
        return cls(d["mean"], d["scale"], d["rotation"], d["falloff"], d["sh"])

    def __eq__(self, other):
        if not isinstance(other, Gaussian):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.rotation, other.rotation)
            and self.falloff == other.falloff
            and np.array_equal(self.sh, other.sh)
        )


@dataclass
class GaussianArrays:
    """Struct-of-arrays form of a list of Gaussians."""

    means: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    falloff: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls, n: int = 0) -> "GaussianArrays":
        rot = np.zeros((n, 4))
        rot[:, 0] = 1
        return cls(np.zeros((n, 3)), np.ones((n, 3)), rot, np.ones(n), np.zeros((n, SH_COEFFS, 3)))

    @classmethod
    def from_list(cls, gaussians) -> "GaussianArrays":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(0)
        return cls(
            np.array([g.mean for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.falloff for g in gaussians]),
            np.array([g.sh for g in gaussians]),
        )

    def to_list(self) -> list:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i], self.scales[i], self.rotations[i], self.falloff[i], self.sh[i])

    def take(self, idx) -> "GaussianArrays":
        return GaussianArrays(
            self.means[idx], self.scales[idx], self.rotations[idx], self.falloff[idx], self.sh[idx]
        )

    def copy(self) -> "GaussianArrays":
        return GaussianArrays(
            self.means.copy(), self.scales.copy(), self.rotations.copy(), self.falloff.copy(), self.sh.copy()
        )

    @staticmethod
    def concat(parts) -> "GaussianArrays":
        parts = [p for p in parts if len(p)]
        if not parts:
            return GaussianArrays.empty(0)
        return GaussianArrays(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.falloff for p in parts]),
            np.concatenate([p.sh for p in parts]),
        )


def as_arrays(splats) -> GaussianArrays:
    if isinstance(splats, GaussianArrays):
        return splats
    return GaussianArrays.from_list(splats)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"invalid box {lo} > {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self):
        return 0.5 * (self.min + self.max)

    @property
    def extent(self):
        return self.max - self.min

    def contains(self, other: "Aabb", tol: float = 0.0) -> bool:
        return bool(np.all(self.min <= other.min + tol) and np.all(self.max >= other.max - tol))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera.  ``world_to_camera`` is a 3x4 [R|t]; camera looks down +z,
    image x right, y down; pixel (i, j) has its center at (j + 0.5, i + 0.5)."""

    focal: np.ndarray
    principal: np.ndarray
    resolution: tuple  # (width, height)
    world_to_camera: np.ndarray
    exposure: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        principal = np.asarray(self.principal, dtype=np.float64).reshape(2)
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape == (4, 4):
            w2c = w2c[:3]
        w2c = w2c.reshape(3, 4)
        exposure = np.asarray(self.exposure, dtype=np.float64).reshape(3, 4)
        if not np.all(focal > 0):
            raise ValueError("focal length must be positive")
        r = w2c[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("world_to_camera rotation is not orthonormal")
        w, h = (int(v) for v in self.resolution)
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal", principal)
        object.__setattr__(self, "resolution", (w, h))
        object.__setattr__(self, "world_to_camera", w2c)
        object.__setattr__(self, "exposure", exposure)

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def replace(self, **kw) -> "CameraModel":
        return replace(self, **kw)

    @classmethod
    def look_at(cls, eye, target, up=(0, 0, 1), focal=500.0, resolution=(256, 256)) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        w2c = np.hstack([r, (-r @ eye)[:, None]])
        w, h = resolution
        f = np.broadcast_to(np.asarray(focal, dtype=np.float64), (2,))
        return cls(f, (w / 2.0, h / 2.0), (w, h), w2c)

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "focal": self.focal.tolist(),
            "principal": self.principal.tolist(),
            "world_to_camera": self.world_to_camera.ravel().tolist(),
            "exposure": self.exposure.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        kw = {}
        if "exposure" in d:
            kw["exposure"] = d["exposure"]
        return cls(d["focal"], d["principal"], tuple(d["resolution"]), d["world_to_camera"], **kw)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            np.array_equal(self.focal, other.focal)
            and np.array_equal(self.principal, other.principal)
            and self.resolution == other.resolution
            and np.array_equal(self.world_to_camera, other.world_to_camera)
            and np.array_equal(self.exposure, other.exposure)
        )


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    alpha_scale: float
    depth: float
    color: np.ndarray


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HierarchyNode:
    gaussian: Gaussian
    bounds: Aabb
    parent: int
    first_child: int
    child_count: int

    @property
    def is_leaf(self) -> bool:
        return self.child_count == 0


@dataclass
class Hierarchy:
    """Tree of Gaussians.  Node 0 is the root; children of a node occupy the
    contiguous index range ``first_child[i] : first_child[i] + child_count[i]``."""

    gaussians: GaussianArrays
    bounds_min: np.ndarray  # (N, 3)
    bounds_max: np.ndarray  # (N, 3)
    parent: np.ndarray  # (N,) int64, NONE for the root
    first_child: np.ndarray  # (N,) int64, NONE for leaves
    child_count: np.ndarray  # (N,) int64
    sh_degree: int = SH_DEGREE

    def __len__(self):
        return len(self.parent)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.child_count == 0

    @property
    def leaf_indices(self) -> np.ndarray:
        return np.flatnonzero(self.child_count == 0)

    def children(self, i: int) -> range:
        c = int(self.child_count[i])
        if c == 0:
            return range(0)
        f = int(self.first_child[i])
        return range(f, f + c)

    def node(self, i: int) -> HierarchyNode:
        return HierarchyNode(
            self.gaussians[i],
            Aabb(self.bounds_min[i], self.bounds_max[i]),
            int(self.parent[i]),
            int(self.first_child[i]),
            int(self.child_count[i]),
        )

    def copy(self) -> "Hierarchy":
        return Hierarchy(
            self.gaussians.copy(),
            self.bounds_min.copy(),
            self.bounds_max.copy(),
            self.parent.copy(),
            self.first_child.copy(),
            self.child_count.copy(),
            self.sh_degree,
        )

    def depth_order(self) -> list:
        """Node indices grouped by depth, root level first."""
        levels = [np.array([0])]
        while True:
            cur = levels[-1]
            cc = self.child_count[cur]
            cur = cur[cc > 0]
            if len(cur) == 0:
                break
            nxt = np.concatenate([np.arange(f, f + c) for f, c in zip(self.first_child[cur], self.child_count[cur])])
            levels.append(nxt)
        return levels

    def leaf_sets(self) -> list:
        """For every node, the sorted array of leaf indices below it."""
        out = [None] * len(self)
        for level in reversed(self.depth_order()):
            for i in level:
                if self.child_count[i] == 0:
                    out[i] = np.array([i])
                else:
                    out[i] = np.sort(np.concatenate([out[c] for c in self.children(i)]))
        return out

    def validate(self) -> None:
        """Raise ValueError if tree invariants are broken."""
        n = len(self)
        if n == 0:
            raise ValueError("empty hierarchy")
        if self.parent[0] != NONE:
            raise ValueError("node 0 must be the root")
        if np.count_nonzero(self.parent == NONE) != 1:
            raise ValueError("exactly one root expected")
        seen = np.zeros(n, dtype=np.int64)
        for i in range(n):
            for c in self.children(i):
                if c <= 0 or c >= n or self.parent[c] != i:
                    raise ValueError(f"broken child link {i} -> {c}")
                seen[c] += 1
        if seen[0] != 0 or np.any(seen[1:] != 1):
            raise ValueError("not a tree")
        reached = sum(len(level) for level in self.depth_order())
        if reached != n:
            raise ValueError("unreachable nodes")


def relayout_order(parent, root: int = 0) -> np.ndarray:
    """Breadth-first order of the nodes reachable from ``root``; children keep
    their relative index order."""
    parent = np.asarray(parent, dtype=np.int64)
    kids = [[] for _ in range(len(parent))]
    for i, p in enumerate(parent.tolist()):
        if p >= 0 and i != root:
            kids[p].append(i)
    order = [root]
    head = 0
    while head < len(order):
        order.extend(kids[order[head]])
        head += 1
    return np.asarray(order, dtype=np.int64)


def relayout(gaussians: GaussianArrays, bounds_min, bounds_max, parent, root: int = 0,
             sh_degree: int = SH_DEGREE) -> Hierarchy:
    """Build a Hierarchy in breadth-first contiguous-children layout from an
    arbitrary parent array.  Nodes unreachable from ``root`` are dropped."""
    parent = np.asarray(parent, dtype=np.int64)
    order = relayout_order(parent, root)
    m = len(order)
    new_index = np.full(len(parent), NONE, dtype=np.int64)
    new_index[order] = np.arange(m)
    new_parent = np.where(np.arange(m) == 0, NONE, new_index[np.maximum(parent[order], 0)])
    count = np.bincount(new_parent[1:], minlength=m).astype(np.int64)
    first = np.full(m, NONE, dtype=np.int64)
    # children of a node are contiguous and appear in parent order
    starts = np.searchsorted(new_parent[1:], np.arange(m)) + 1
    first[count > 0] = starts[count > 0]
    return Hierarchy(
        gaussians.take(order),
        np.asarray(bounds_min)[order].copy(),
        np.asarray(bounds_max)[order].copy(),
        new_parent,
        first,
        count,
        sh_degree,
    )


@dataclass(frozen=True)
class CutEntry:
    node: int
    t: float
    alpha_prime: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t out of range: {self.t}")
        if not 0.0 <= self.alpha_prime < 1.0:
            raise ValueError(f"alpha' out of range: {self.alpha_prime}")


@dataclass
class SfmPointSet:
    """Sparse reconstruction.  ``observations[image_id]`` is an (M, 3) array of
    (point index, reprojection error px, inverse depth)."""

    positions: np.ndarray
    observations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        obs = {}
        for k, v in self.observations.items():
            v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
            if np.any(v[:, 2] <= 0):
                raise ValueError(f"non-positive inverse depth in observations of image {k}")
            obs[k] = v
        self.observations = obs

    def observed_points(self, image_id) -> np.ndarray:
        v = self.observations.get(image_id)
        if v is None:
            return np.zeros(0, dtype=np.int64)
        return v[:, 0].astype(np.int64)


@dataclass
class ChunkEntry:
    grid_coord: tuple
    bounds: Aabb
    camera_ids: list
    hierarchy_ref: str | None = None


@dataclass
class SceneManifest:
    chunk_size: float
    chunks: list
    scaffold_ref: str | None = None
    skybox_ref: str | None = None
    scene_diameter: float = 0.0
    up_axis: int = 2
