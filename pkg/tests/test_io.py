import json

import numpy as np
import pytest

from splatlod.build import build_bvh
from splatlod.errors import MalformedHeader, TruncatedRecord, UnsupportedShDegree
from splatlod.io import (
    CameraPath, read_cameras, read_config, read_depth, read_depth_observations, read_hierarchy, read_manifest,
    read_path, read_png, read_sfm, read_splat_file, read_splats, write_cameras, write_depth, write_hierarchy,
    write_manifest, write_path, write_png, write_sfm, write_splats,
)
from splatlod.model import SfmPointSet
from splatlod.scene import make_grid, manifest_for

from conftest import fields, random_arrays, random_camera


def assert_f32_equal(a, b):
    for x, y in zip(fields(a), fields(b)):
        assert np.allclose(x, y, rtol=2e-6, atol=1e-6)


def test_splat_round_trip(tmp_path, rng):
    g = random_arrays(rng, 1000)
    write_splats(tmp_path / "a.ply", g)
    back = read_splats(tmp_path / "a.ply")
    g.rotations /= np.linalg.norm(g.rotations, axis=1, keepdims=True)
    assert_f32_equal(back, g)


@pytest.mark.parametrize("degree", [0, 1, 2])
def test_lower_sh_degree(tmp_path, rng, degree):
    g = random_arrays(rng, 20)
    write_splats(tmp_path / "a.ply", g, sh_degree=degree)
    f = read_splat_file(tmp_path / "a.ply")
    k = (degree + 1) ** 2
    assert f.sh_degree == degree
    assert np.allclose(f.gaussians.sh[:, :k], g.sh[:, :k], atol=1e-6)
    assert np.all(f.gaussians.sh[:, k:] == 0)


def ply_bytes(props, rows, declared=None):
    names = declared if declared is not None else props
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {p}" for p in names] + ["end_header"]
    data = np.asarray(rows, dtype="<f4").tobytes()
    return ("\n".join(head) + "\n").encode() + data


CORE = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3"]


def test_opacity_logit_zero_is_half(tmp_path):
    row = [0, 0, 0, 0, 0, 0, 0.0, -1, -1, -1, 1, 0, 0, 0]
    (tmp_path / "a.ply").write_bytes(ply_bytes(CORE, [row]))
    g = read_splats(tmp_path / "a.ply")
    assert g.falloff[0] == pytest.approx(0.5)
    assert np.allclose(g.scales[0], np.exp(-1))


def test_header_short_of_data_is_truncated(tmp_path):
    rest = [f"f_rest_{i}" for i in range(45)]
    rows = np.zeros((3, len(CORE) + 45))
    (tmp_path / "a.ply").write_bytes(ply_bytes(CORE + rest, rows, declared=CORE + rest[:44]))
    with pytest.raises(TruncatedRecord):
        read_splats(tmp_path / "a.ply")


def test_short_body_is_truncated(tmp_path):
    raw = ply_bytes(CORE, np.zeros((4, len(CORE))))
    (tmp_path / "a.ply").write_bytes(raw[:-3])
    with pytest.raises(TruncatedRecord):
        read_splats(tmp_path / "a.ply")


def test_odd_rest_count_is_unsupported(tmp_path):
    rest = [f"f_rest_{i}" for i in range(12)]
    (tmp_path / "a.ply").write_bytes(ply_bytes(CORE + rest, np.zeros((2, len(CORE) + 12))))
    with pytest.raises(UnsupportedShDegree):
        read_splats(tmp_path / "a.ply")


@pytest.mark.parametrize("raw", [
    b"not a ply\n",
    b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n",
    b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n",
    b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n",
])
def test_malformed_headers(tmp_path, raw):
    (tmp_path / "a.ply").write_bytes(raw)
    with pytest.raises(MalformedHeader):
        read_splats(tmp_path / "a.ply")


def test_extras_are_preserved(tmp_path, rng):
    g = random_arrays(rng, 10)
    extras = {"nx": rng.random(10).astype(np.float32), "label": np.arange(10, dtype=np.uint8)}
    write_splats(tmp_path / "a.ply", g, extras=extras)
    f = read_splat_file(tmp_path / "a.ply")
    assert set(f.extras) == {"nx", "label"}
    assert np.array_equal(f.extras["label"], extras["label"])
    write_splats(tmp_path / "b.ply", f)
    assert np.array_equal(read_splat_file(tmp_path / "b.ply").extras["nx"], extras["nx"])


def test_ascii_ply(tmp_path):
    head = "\n".join(["ply", "format ascii 1.0", "element vertex 2"] + [f"property float {p}" for p in CORE]
                     + ["end_header"])
    rows = ["1 2 3 0 0 0 0 0 0 0 1 0 0 0", "4 5 6 0 0 0 2 0 0 0 0 0 0 1"]
    (tmp_path / "a.ply").write_text(head + "\n" + "\n".join(rows) + "\n")
    g = read_splats(tmp_path / "a.ply")
    assert np.allclose(g.means, [[1, 2, 3], [4, 5, 6]])


def test_hierarchy_round_trip(tmp_path, rng):
    h = build_bvh(random_arrays(rng, 50))
    write_hierarchy(tmp_path / "h.bin", h)
    assert (tmp_path / "h.bin").stat().st_size == 20 + 272 * len(h)
    back = read_hierarchy(tmp_path / "h.bin")
    for name in ("parent", "first_child", "child_count"):
        assert np.array_equal(getattr(back, name), getattr(h, name))
    assert np.allclose(back.bounds_min, h.bounds_min, rtol=1e-6)
    assert_f32_equal(back.gaussians, h.gaussians)


def test_hierarchy_corruption(tmp_path, rng):
    h = build_bvh(random_arrays(rng, 5))
    write_hierarchy(tmp_path / "h.bin", h)
    raw = (tmp_path / "h.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(TruncatedRecord):
        read_hierarchy(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MalformedHeader):
        read_hierarchy(tmp_path / "m.bin")


def test_cameras_round_trip(tmp_path, rng):
    cams = [random_camera(rng) for _ in range(3)]
    cams[1].exposure[0, 0] = 1.2
    write_cameras(tmp_path / "c.json", cams, images=["a.png", "b.png", "c.png"])
    d = json.loads((tmp_path / "c.json").read_text())
    assert len(d["cameras"][0]["world_to_camera"]) == 12
    back, images = read_cameras(tmp_path / "c.json")
    assert images[2] == str(tmp_path / "c.png")
    for a, b in zip(cams, back):
        assert np.allclose(a.world_to_camera, b.world_to_camera)
        assert np.allclose(a.exposure, b.exposure)
        assert a.resolution == b.resolution


def test_camera_path(tmp_path, rng):
    cams = [random_camera(rng) for _ in range(3)]
    write_path(tmp_path / "p.json", CameraPath(cams, [0.0, 0.5, 1.0]))
    back = read_path(tmp_path / "p.json")
    assert np.allclose(back.times, [0, 0.5, 1])
    assert np.allclose(back.cameras[2].world_to_camera, cams[2].world_to_camera)
    with pytest.raises(ValueError):
        CameraPath(cams, [0.0, 0.0, 1.0])


def test_manifest_round_trip(tmp_path, rng):
    cams = [random_camera(rng, target=(x, 0, 0)) for x in (0, 70)]
    chunks = make_grid(SfmPointSet(np.zeros((0, 3))), cams, 50)
    m = manifest_for(chunks, 50, refs=[f"c{i}.bin" for i in range(len(chunks))], diameter=80.0)
    write_manifest(tmp_path / "m.json", m)
    back = read_manifest(tmp_path / "m.json")
    assert back.chunk_size == 50 and back.scene_diameter == 80.0
    for a, b in zip(m.chunks, back.chunks):
        assert a.grid_coord == b.grid_coord and a.camera_ids == b.camera_ids
        assert np.array_equal(a.bounds.min, b.bounds.min) and np.array_equal(a.bounds.max, b.bounds.max)
        assert a.hierarchy_ref == b.hierarchy_ref


def test_depth_round_trip(tmp_path, rng):
    d = rng.random((7, 9))
    write_depth(tmp_path / "d.bin", d)
    assert np.allclose(read_depth(tmp_path / "d.bin"), d, atol=1e-7)
    (tmp_path / "e.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-4])
    with pytest.raises(TruncatedRecord):
        read_depth(tmp_path / "e.bin")


def test_sfm_round_trip(tmp_path, rng):
    sfm = SfmPointSet(rng.random((5, 3)), {0: [[1, 0.5, 0.2], [3, 0.1, 0.4]]})
    write_sfm(tmp_path / "s.json", sfm)
    back = read_sfm(tmp_path / "s.json")
    assert np.allclose(back.positions, sfm.positions)
    assert np.allclose(back.observations[0], sfm.observations[0])


def test_depth_observations(tmp_path):
    (tmp_path / "o.txt").write_text("3 4 0.5 0.1\n7 1 0.25 0.3\n")
    px, inv, err = read_depth_observations(tmp_path / "o.txt")
    assert px.tolist() == [[3, 4], [7, 1]]
    assert np.allclose(inv, [0.5, 0.25]) and np.allclose(err, [0.1, 0.3])


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((6, 8, 3)) * 255) / 255
    write_png(tmp_path / "i.png", img)
    assert np.allclose(read_png(tmp_path / "i.png"), img)


def test_config(tmp_path):
    (tmp_path / "c.json").write_text('{"build": {"sigma_extent": 2.5}}')
    assert read_config(tmp_path / "c.json")["build"]["sigma_extent"] == 2.5
