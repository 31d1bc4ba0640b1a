"""Build a hierarchy over a synthetic scene, render it at several target
granularities, refine the interior nodes and compact it.

    python demos/lod_walkthrough.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from splatlod.build import build_bvh, compact
from splatlod.io import write_hierarchy, write_png
from splatlod.lod import render_cut
from splatlod.metrics import psnr
from splatlod.refine import RefineConfig, refine_hierarchy
from splatlod.render import render
from splatlod.synthetic import orbit_cameras, surface_scene


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    g = surface_scene(5000, seed=0)
    h = build_bvh(g)
    print(f"hierarchy: {len(h)} nodes over {len(g)} leaves")

    views = orbit_cameras(4, phase=0.2)
    refs = [render(g, c).color for c in views]
    write_png(out / "leaves.png", refs[0])
    for tau in (3, 6, 15, 40):
        frames = [render_cut(h, c, tau) for c in views]
        score = np.mean([psnr(f.color, r) for f, r in zip(frames, refs)])
        share = np.mean([f.rendered_count for f in frames]) / len(g)
        print(f"tau {tau:>3} px: PSNR {score:6.2f} dB, {100 * share:5.1f}% of leaves rendered")
        write_png(out / f"tau{tau}.png", frames[0].color)

    train = orbit_cameras(24)
    history = []
    refined = refine_hierarchy(h, train, [render(g, c).color for c in train],
                               RefineConfig(tau_min=6, tau_max=30, steps=200), history=history)
    before = np.mean([psnr(render_cut(h, c, 15).color, r) for c, r in zip(views, refs)])
    after = np.mean([psnr(render_cut(refined, c, 15).color, r) for c, r in zip(views, refs)])
    print(f"refinement: loss {np.mean(history[:20]):.4f} -> {np.mean(history[-20:]):.4f}, "
          f"tau 15 PSNR {before:.2f} -> {after:.2f} dB")

    small = compact(refined, train)
    print(f"compaction: {len(refined)} -> {len(small)} nodes")
    write_hierarchy(out / "scene.h3dg", small)


if __name__ == "__main__":
    main(*sys.argv[1:])
