import csv

import numpy as np

from splatlod.bench import STAGES, bench_path
from splatlod.build import build_bvh
from splatlod.io import CameraPath
from splatlod.synthetic import orbit_cameras, surface_scene


def scene():
    return build_bvh(surface_scene(800, seed=2))


def test_static_path_transfers_nothing():
    h = scene()
    cam = orbit_cameras(1, focal=128, resolution=(96, 96))[0]
    report = bench_path(h, CameraPath([cam] * 5, np.arange(5.0)), 6)
    assert report.frames[0]["transferred"] == 0
    assert all(f["transferred"] == 0 for f in report.frames[1:])
    assert len({f["rendered"] for f in report.frames}) == 1


def test_coarser_tau_renders_fewer():
    h = scene()
    cams = orbit_cameras(4, focal=128, resolution=(96, 96))
    fine = bench_path(h, cams, 3).summary()["rendered"]
    coarse = bench_path(h, cams, 15).summary()["rendered"]
    assert coarse < fine


def test_leaf_rendering_counts_visible_leaves():
    h = scene()
    cams = orbit_cameras(2, focal=128, resolution=(96, 96))
    report = bench_path(h, cams, 0)
    for f in report.frames:
        assert f["cut_size"] == 800
        assert f["rendered"] <= 800
    assert report.frames[0]["rendered_pct"] > 95


def test_moving_path_transfers_and_csv(tmp_path):
    h = scene()
    cams = orbit_cameras(6, focal=128, resolution=(64, 64))
    report = bench_path(h, cams, 6)
    assert sum(f["transferred"] for f in report.frames) > 0
    # the cut is only refreshed on even frames
    assert all(f["transferred"] == 0 for f in report.frames[1::2])
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 6
    assert set(STAGES) <= set(rows[0])
    s = report.summary()
    assert s["frames"] == 6 and s["leaves"] == 800
