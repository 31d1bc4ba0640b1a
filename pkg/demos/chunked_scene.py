"""Split a street-like capture into chunks, build one hierarchy per chunk
and consolidate them, with a skybox, into a single hierarchy.

    python demos/chunked_scene.py
"""

import numpy as np

from splatlod.build import build_bvh
from splatlod.model import CameraModel, SfmPointSet
from splatlod.scene import (
    chunk_leaves, consolidate, ground_distance, leaf_owner, make_grid, make_skybox, scene_diameter,
)
from splatlod.synthetic import surface_scene


def main():
    rng = np.random.default_rng(0)
    # cameras walking along a 120 m x 40 m block, looking along +x
    xs, ys = np.meshgrid(np.linspace(2, 118, 30), np.linspace(2, 38, 4))
    cams = [CameraModel.look_at([x, y, 1.6], [x + 5, y, 1.6], up=(0, 0, 1), focal=300, resolution=(320, 240))
            for x, y in zip(xs.ravel(), ys.ravel())]
    sfm = SfmPointSet(np.column_stack([rng.uniform(0, 120, 3000), rng.uniform(0, 40, 3000), rng.uniform(0, 6, 3000)]))
    chunks = make_grid(sfm, cams, chunk_size=50)
    print(f"{len(chunks)} chunks: {[c.grid_coord for c in chunks]}")

    pairs = []
    for c in chunks:
        # stand-in for per-chunk training: splats covering the chunk plus a margin
        g = surface_scene(1500, seed=int(rng.integers(1 << 30)), radius=1.0)
        lo, hi = c.bounds.min[:2], c.bounds.max[:2]
        g.means[:, :2] = lo - 5 + rng.random((len(g), 2)) * (hi - lo + 10)
        g.scales *= 3
        pairs.append((c, build_bvh(chunk_leaves(c, g))))
        print(f"chunk {c.grid_coord}: {len(c.camera_ids)} cameras, {len(g)} splats")

    sky = make_skybox(scene_diameter(cams, sfm), count=2000)
    h = consolidate(pairs, sky)
    owner = leaf_owner(h)
    roots = list(h.children(0))
    leaves = h.leaf_indices
    kept = [int(np.sum(owner[leaves] == r)) for r in roots]
    print(f"global hierarchy: {len(h)} nodes, leaves per subtree {kept} (last is the skybox)")

    # every chunk leaf is at least as close to its own chunk as to any other
    p = h.gaussians.means[leaves][:, :2]
    own = np.array([roots.index(o) for o in owner[leaves]])
    chunk_leaf = own < len(pairs)
    dist = np.stack([ground_distance(p, c.bounds.min[:2], c.bounds.max[:2]) for c, _ in pairs], axis=1)
    mine = dist[np.arange(len(leaves)), np.minimum(own, len(pairs) - 1)]
    print("consolidation check:", bool(np.all(mine[chunk_leaf] <= dist[chunk_leaf].min(axis=1))))


if __name__ == "__main__":
    main()
