"""Camera-path replay: rendered splat counts, cut deltas and stage timings."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .lod import Cut, cut_batch, select_cut
from .model import Hierarchy
from .render import render

STAGES = ("cut/expand", "weights", "preprocess", "duplicate", "tile ranges", "alpha-blend")
CUT_INTERVAL = 2


@dataclass
class BenchReport:
    frames: list = field(default_factory=list)  # one dict per frame
    leaf_count: int = 0

    def summary(self) -> dict:
        if not self.frames:
            return {}
        out = {"frames": len(self.frames), "leaves": self.leaf_count}
        for key in ("rendered", "rendered_pct", "transferred", "cut_size"):
            out[key] = float(np.mean([f[key] for f in self.frames]))
        for s in STAGES:
            out[s] = float(np.mean([f[s] for f in self.frames]))
        return out

    def write_csv(self, path) -> None:
        cols = ["frame", "tau", "cut_size", "rendered", "rendered_pct", "transferred", *STAGES]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for row in self.frames:
                w.writerow({k: row[k] for k in cols})


def bench_path(h: Hierarchy, path, tau: float) -> BenchReport:
    """Replay ``path`` (a CameraPath or list of cameras) at target granularity ``tau``.

    The cut is recomputed every second frame; "transferred" counts nodes that
    enter the cut compared with the previous one.  ``tau <= 0`` renders the
    leaves directly.
    """
    cams = list(getattr(path, "cameras", path))
    n_leaves = int(h.is_leaf.sum())
    report = BenchReport(leaf_count=n_leaves)
    clock = time.perf_counter
    prev_nodes = None
    batch = None
    cut_size = 0
    for i, cam in enumerate(cams):
        timings = dict.fromkeys(STAGES, 0.0)
        transferred = 0
        if i % CUT_INTERVAL == 0 or batch is None:
            t0 = clock()
            if tau > 0:
                cut = select_cut(h, cam, tau)
                nodes, t = cut.nodes, cut.t
            else:
                nodes, t = h.leaf_indices, np.zeros(n_leaves)
            t1 = clock()
            batch = cut_batch(h, Cut(nodes, t, np.zeros(len(nodes))))
            t2 = clock()
            timings["cut/expand"] = t1 - t0
            timings["weights"] = t2 - t1
            if prev_nodes is not None:
                transferred = int(len(np.setdiff1d(nodes, prev_nodes, assume_unique=True)))
            prev_nodes = nodes
            cut_size = len(nodes)
        out = render(batch, cam, timings=timings)
        report.frames.append({
            "frame": i,
            "tau": tau,
            "cut_size": cut_size,
            "rendered": out.rendered_count,
            "rendered_pct": 100.0 * out.rendered_count / max(n_leaves, 1),
            "transferred": transferred,
            **timings,
        })
    return report
