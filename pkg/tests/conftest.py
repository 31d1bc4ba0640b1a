import numpy as np
import pytest

from splatlod.model import CameraModel, Gaussian, GaussianArrays


def random_gaussian(rng, center=(0.0, 0.0, 0.0), spread=1.0, log_scale=-1.5, falloff=None):
    return Gaussian(
        np.asarray(center) + rng.normal(size=3) * spread,
        np.exp(rng.normal(log_scale, 0.4, 3)),
        rng.normal(size=4),
        rng.uniform(0.2, 0.95) if falloff is None else falloff,
        rng.normal(size=(16, 3)) * 0.2,
    )


def random_arrays(rng, n, **kw) -> GaussianArrays:
    return GaussianArrays.from_list([random_gaussian(rng, **kw) for _ in range(n)])


def random_camera(rng, target=(0.0, 0.0, 0.0), dist=(4.0, 8.0), focal=200.0, resolution=(64, 48)):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = np.asarray(target) + d * rng.uniform(*dist)
    up = (0, 0, 1) if abs(d[2]) < 0.95 else (0, 1, 0)
    return CameraModel.look_at(eye, target, up=up, focal=focal, resolution=resolution)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_level_fixture(seed=3):
    """Root over (merged parent of two leaves, one extra leaf); camera and target image."""
    from splatlod.merge import merge_gaussians
    from splatlod.model import relayout

    rng = np.random.default_rng(seed)
    kids = [Gaussian(rng.normal(size=3) * 0.25 + [0, 0, 4], np.exp(rng.normal(-1.6, 0.3, 3)), rng.normal(size=4),
                     rng.uniform(0.3, 0.8), rng.normal(size=(16, 3)) * 0.2) for _ in range(2)]
    parent = merge_gaussians(kids)
    other = Gaussian([0.4, 0.2, 4.5], [0.3, 0.2, 0.1], rng.normal(size=4), 0.6, rng.normal(size=(16, 3)) * 0.2)
    root = merge_gaussians([parent, other])
    g = GaussianArrays.from_list([root, parent, other] + kids)
    h = relayout(g, np.zeros((5, 3)), np.zeros((5, 3)), np.array([-1, 0, 0, 1, 1]))
    h.gaussians.falloff[1] = 0.7
    cam = CameraModel.look_at([0.1, -0.3, 0], [0, 0, 4], up=(0, -1, 0), focal=60, resolution=(40, 32))
    target = rng.random((32, 40, 3)) * 0.3 + 0.2
    return h, cam, target


def fd_agreement(f, arrays, grads, skip=lambda name, idx: False, step=1e-6, rtol=0.02):
    """Fraction of coordinates whose analytic gradient matches central differences."""
    ok = total = 0
    for k, (arr, g) in enumerate(zip(arrays, grads)):
        for idx in np.ndindex(arr.shape):
            if skip(k, idx):
                continue
            old = arr[idx]
            arr[idx] = old + step
            lp = f()
            arr[idx] = old - step
            lm = f()
            arr[idx] = old
            fd = (lp - lm) / (2 * step)
            if abs(fd) < 1e-9 and abs(g[idx]) < 1e-9:
                continue
            total += 1
            ok += abs(fd - g[idx]) <= rtol * max(abs(fd), abs(g[idx]))
    return ok, total


def fields(g):
    return g.means, g.scales, g.rotations, g.falloff, g.sh


def grid_scene(rng, chunk=10.0, per_chunk=150, overlap=0.3, up_axis=2):
    """2x2 chunks of splats that spill ``overlap`` chunk widths past their bounds."""
    from splatlod.build import build_bvh
    from splatlod.model import Aabb
    from splatlod.scene import ChunkSpec, ground_axes

    axes = ground_axes(up_axis)
    pairs = []
    for j in range(2):
        for i in range(2):
            lo, hi = np.full(3, -np.inf), np.full(3, np.inf)
            lo[axes] = [i * chunk, j * chunk]
            hi[axes] = lo[axes] + chunk
            g = random_arrays(rng, per_chunk, spread=0.0, log_scale=-1.0)
            means = np.zeros((per_chunk, 3))
            means[:, axes] = lo[axes] + rng.uniform(-overlap, 1 + overlap, (per_chunk, 2)) * chunk
            means[:, up_axis] = rng.uniform(0, 2, per_chunk)
            g.means[:] = means
            pairs.append((ChunkSpec((i, j), Aabb(lo, hi)), build_bvh(g)))
    return pairs


_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion: verdict(number, passed, detail)."""

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
