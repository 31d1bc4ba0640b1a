"""Command line interface: ``splatlod <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import bench_path
from .build import BuildConfig, build_bvh, compact
from .lod import cut_batch, select_cut
from .refine import RefineConfig, refine_hierarchy
from .render import apply_exposure, render
from .scene import chunk_from_entry, consolidate, make_grid, make_skybox, manifest_for, scene_diameter


def _config_section(args, name, cls, **overrides):
    values = {}
    if args.config:
        values.update(io.read_config(args.config).get(name, {}))
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise SystemExit(f"unknown {name} config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def _load_hierarchy(path):
    p = Path(path)
    if p.suffix.lower() == ".ply":
        return build_bvh(io.read_splats(p))
    return io.read_hierarchy(p)


def cmd_build(args):
    cfg = _config_section(args, "build", BuildConfig)
    h = build_bvh(io.read_splats(args.input), cfg)
    io.write_hierarchy(args.output, h)
    print(f"built {len(h)} nodes over {int(h.is_leaf.sum())} leaves -> {args.output}")


def cmd_compact(args):
    h = io.read_hierarchy(args.input)
    cams, _ = io.read_cameras(args.cameras)
    out = compact(h, cams, args.tau_min, args.tau_max)
    io.write_hierarchy(args.output, out)
    print(f"compacted {len(h)} -> {len(out)} nodes -> {args.output}")


def cmd_refine(args):
    h = io.read_hierarchy(args.input)
    cams, images = io.read_cameras(args.cameras)
    if any(i is None for i in images):
        raise SystemExit("every camera needs an 'image' entry for refinement")
    targets = [io.read_png(p) for p in images]
    cfg = _config_section(args, "refine", RefineConfig, steps=args.steps, seed=args.seed)
    history = []
    out = refine_hierarchy(h, cams, targets, cfg, history=history)
    io.write_hierarchy(args.output, out)
    if history:
        print(f"refined {cfg.steps} steps, loss {np.mean(history[:10]):.5f} -> {np.mean(history[-10:]):.5f}")


def cmd_chunk(args):
    cams, _ = io.read_cameras(args.cameras)
    sfm = io.read_sfm(args.sfm)
    chunks = make_grid(sfm, cams, args.chunk_size, args.up_axis)
    m = manifest_for(chunks, args.chunk_size, diameter=scene_diameter(cams, sfm), up_axis=args.up_axis)
    io.write_manifest(args.output, m)
    print(f"{len(chunks)} chunk(s) -> {args.output}")


def cmd_consolidate(args):
    m = io.read_manifest(args.manifest)
    base = Path(args.manifest).parent
    pairs = []
    for e in m.chunks:
        if e.hierarchy_ref is None:
            raise SystemExit(f"chunk {e.grid_coord} has no hierarchy file")
        pairs.append((chunk_from_entry(e), _load_hierarchy(base / e.hierarchy_ref)))
    skybox = None
    if m.skybox_ref:
        skybox = io.read_splats(base / m.skybox_ref)
    elif args.skybox_count > 0 and m.scene_diameter > 0:
        skybox = make_skybox(m.scene_diameter, args.skybox_count, args.seed)
    h = consolidate(pairs, skybox, m.up_axis)
    io.write_hierarchy(args.output, h)
    print(f"global hierarchy with {len(h)} nodes -> {args.output}")


def _render(h, cam, tau):
    if tau > 0:
        return render(cut_batch(h, select_cut(h, cam, tau)), cam)
    return render(h.gaussians.take(h.leaf_indices), cam)


def cmd_render(args):
    h = _load_hierarchy(args.input)
    cams, _ = io.read_cameras(args.cameras)
    cam = cams[args.index]
    out = _render(h, cam, args.tau)
    io.write_png(args.output, apply_exposure(out, cam.exposure))
    if args.depth:
        io.write_depth(args.depth, out.depth)
    print(f"rendered {out.rendered_count} splats -> {args.output}")


def cmd_bench(args):
    h = _load_hierarchy(args.input)
    report = bench_path(h, io.read_path(args.path), args.tau)
    report.write_csv(args.output)
    print(json.dumps(report.summary(), indent=1))


def cmd_inspect(args):
    h = _load_hierarchy(args.input)
    levels = h.depth_order()
    kids = h.child_count[h.child_count > 0]
    stats = {
        "nodes": len(h),
        "leaves": int(h.is_leaf.sum()),
        "depth": len(levels),
        "children_min": int(kids.min()) if len(kids) else 0,
        "children_max": int(kids.max()) if len(kids) else 0,
        "children_mean": float(kids.mean()) if len(kids) else 0.0,
        "bounds_min": h.bounds_min[0].tolist(),
        "bounds_max": h.bounds_max[0].tolist(),
        "sh_degree": h.sh_degree,
    }
    print(json.dumps(stats, indent=1))


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tau", type=float, default=argparse.SUPPRESS, help="target granularity in pixels")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with build/refine sections")

    p = argparse.ArgumentParser(prog="splatlod", parents=[common], description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.set_defaults(func=fn)
        return s

    s = add("build", cmd_build, "splat file -> hierarchy")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)

    s = add("compact", cmd_compact, "remove rarely selected interior nodes")
    s.add_argument("input")
    s.add_argument("--cameras", required=True)
    s.add_argument("--tau-min", type=float, default=3.0)
    s.add_argument("--tau-max", type=float, default=None)
    s.add_argument("-o", "--output", required=True)

    s = add("refine", cmd_refine, "optimize interior nodes against images")
    s.add_argument("input")
    s.add_argument("--cameras", required=True, help="camera JSON with an 'image' per camera")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("-o", "--output", required=True)

    s = add("chunk", cmd_chunk, "cameras + SfM -> chunk manifest")
    s.add_argument("--cameras", required=True)
    s.add_argument("--sfm", required=True)
    s.add_argument("--chunk-size", type=float, default=50.0)
    s.add_argument("--up-axis", type=int, default=2, choices=(0, 1, 2))
    s.add_argument("-o", "--output", required=True)

    s = add("consolidate", cmd_consolidate, "merge chunk hierarchies into one")
    s.add_argument("manifest")
    s.add_argument("--skybox-count", type=int, default=100_000)
    s.add_argument("-o", "--output", required=True)

    s = add("render", cmd_render, "render one camera at --tau (0 = leaves)")
    s.add_argument("input", help="hierarchy binary or .ply splat file")
    s.add_argument("--cameras", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--depth", default=None, help="also write the depth map (f32)")
    s.add_argument("-o", "--output", required=True)

    s = add("bench", cmd_bench, "replay a camera path, write CSV")
    s.add_argument("input")
    s.add_argument("--path", required=True)
    s.add_argument("-o", "--output", required=True)

    s = add("inspect", cmd_inspect, "print hierarchy statistics")
    s.add_argument("input")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    for name, default in (("tau", 0.0), ("seed", 0), ("threads", None), ("config", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
