"""File formats: 3DGS point files (PLY), hierarchy binaries, cameras, camera
paths, manifests, depth maps, SfM data and PNG images."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedHeader, TruncatedRecord, UnsupportedShDegree
from .model import NONE, SH_COEFFS, Aabb, CameraModel, ChunkEntry, GaussianArrays, Hierarchy, SceneManifest, SfmPointSet

# ---------------------------------------------------------------------------
# PLY point files
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REST_TO_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}
_CORE = {"x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
         "f_dc_0", "f_dc_1", "f_dc_2"}


@dataclass
class SplatFile:
    gaussians: GaussianArrays
    sh_degree: int = 3
    extras: dict = field(default_factory=dict)  # name -> per-point array


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise MalformedHeader("missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        line = f.readline()
        if not line:
            raise MalformedHeader("header not terminated by end_header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) < 2:
                raise MalformedHeader("bad format line")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise MalformedHeader(f"bad element line: {line!r}")
            elements.append([words[1], int(words[2]), []])
        elif words[0] == "property":
            if not elements:
                raise MalformedHeader("property before element")
            if len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
            elif words[1] == "list":
                elements[-1][2].append((words[-1], None))
            else:
                raise MalformedHeader(f"bad property line: {line!r}")
        else:
            raise MalformedHeader(f"unexpected header line: {line!r}")
    if fmt not in ("binary_little_endian", "ascii"):
        raise MalformedHeader(f"unsupported format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise MalformedHeader("first element must be 'vertex'")
    return fmt, elements


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def read_splat_file(path) -> SplatFile:
    """Read a 3DGS point file (binary little-endian or ASCII PLY)."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        data = f.read()
    _, n, props = elements[0]
    if any(t is None for _, t in props):
        raise MalformedHeader("list properties are not supported on vertices")
    names = [p for p, _ in props]
    if len(set(names)) != len(names):
        raise MalformedHeader("duplicate property names")
    dtype = np.dtype([(p, "<" + t) for p, t in props])
    if fmt == "binary_little_endian":
        need = n * dtype.itemsize
        exact = len(elements) == 1
        if len(data) < need or (exact and len(data) != need):
            raise TruncatedRecord(f"expected {need} bytes of vertex data, found {len(data)}")
        rec = np.frombuffer(data, dtype=dtype, count=n)
    else:
        rows = [r.split() for r in data.decode("ascii").splitlines() if r.strip()]
        if len(rows) < n or any(len(r) != len(props) for r in rows[:n]):
            raise TruncatedRecord("ASCII vertex records do not match the header")
        rec = np.zeros(n, dtype=dtype)
        arr = np.array(rows[:n], dtype=np.float64)
        for k, p in enumerate(names):
            rec[p] = arr[:, k]

    missing = [c for c in sorted(_CORE) if c not in names]
    if missing:
        raise MalformedHeader(f"missing properties: {missing}")
    rest = sorted((p for p in names if p.startswith("f_rest_")), key=lambda s: int(s[7:]))
    if [int(p[7:]) for p in rest] != list(range(len(rest))) or len(rest) not in _REST_TO_DEGREE:
        raise UnsupportedShDegree(f"{len(rest)} f_rest fields")
    degree = _REST_TO_DEGREE[len(rest)]
    n_rest = len(rest) // 3

    col = lambda p: rec[p].astype(np.float64)  # noqa: E731
    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
    rot = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norm > 0, rot / np.where(norm > 0, norm, 1), [1.0, 0, 0, 0])
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = np.stack([col(f"f_dc_{c}") for c in range(3)], axis=1)
    for c in range(3):
        for k in range(n_rest):
            sh[:, 1 + k, c] = col(f"f_rest_{c * n_rest + k}")
    g = GaussianArrays(means, scales, rot, _sigmoid(col("opacity")), sh)
    extras = {p: np.array(rec[p]) for p in names if p not in _CORE and not p.startswith("f_rest_")}
    return SplatFile(g, degree, extras)


def read_splats(path) -> GaussianArrays:
    return read_splat_file(path).gaussians


def write_splats(path, splats, sh_degree: int = 3, extras: dict | None = None) -> None:
    """Write a binary little-endian 3DGS point file.  Opacity is stored as a
    logit (falloff clipped into (0, 1)) and scales as logs."""
    if sh_degree not in (0, 1, 2, 3):
        raise UnsupportedShDegree(f"SH degree {sh_degree}")
    g = splats.gaussians if isinstance(splats, SplatFile) else splats
    if isinstance(splats, SplatFile) and extras is None:
        extras = splats.extras
    if not isinstance(g, GaussianArrays):
        g = GaussianArrays.from_list(g)
    extras = extras or {}
    n = len(g)
    n_rest = (sh_degree + 1) ** 2 - 1
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    fields += [(name, np.asarray(v).dtype.newbyteorder("<").str) for name, v in extras.items()]
    fields += [(f"f_dc_{c}", "f4") for c in range(3)]
    fields += [(f"f_rest_{i}", "f4") for i in range(3 * n_rest)]
    fields += [("opacity", "f4")] + [(f"scale_{i}", "f4") for i in range(3)] + [(f"rot_{i}", "f4") for i in range(4)]
    rec = np.zeros(n, dtype=[(k, "<" + t.lstrip("<>|=")) for k, t in fields])
    for k, axis in zip("xyz", range(3)):
        rec[k] = g.means[:, axis]
    for name, v in extras.items():
        v = np.asarray(v)
        if v.shape != (n,):
            raise ValueError(f"extra field {name!r} must have one value per point")
        rec[name] = v
    for c in range(3):
        rec[f"f_dc_{c}"] = g.sh[:, 0, c]
        for k in range(n_rest):
            rec[f"f_rest_{c * n_rest + k}"] = g.sh[:, 1 + k, c]
    f = np.clip(g.falloff, 1e-7, 1 - 1e-7)
    rec["opacity"] = np.log(f / (1 - f))
    for i in range(3):
        rec[f"scale_{i}"] = np.log(g.scales[:, i])
    for i in range(4):
        rec[f"rot_{i}"] = g.rotations[:, i]
    inv = {v: k for k, v in _PLY_TYPES.items() if k in ("char", "uchar", "short", "ushort", "int", "uint", "float", "double")}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for k in rec.dtype.names:
        header.append(f"property {inv[rec.dtype[k].str[1:]]} {k}")
    header.append("end_header")
    with open(path, "wb") as out:
        out.write(("\n".join(header) + "\n").encode("ascii"))
        out.write(rec.tobytes())


# ---------------------------------------------------------------------------
# hierarchy binary
# ---------------------------------------------------------------------------

MAGIC = b"H3DG"
VERSION = 1
_U32_NONE = 0xFFFFFFFF
NODE_DTYPE = np.dtype([
    ("parent", "<u4"), ("first_child", "<u4"), ("child_count", "<u4"),
    ("bounds", "<f4", (6,)), ("mean", "<f4", (3,)), ("scale", "<f4", (3,)),
    ("rotation", "<f4", (4,)), ("falloff", "<f4"), ("sh", "<f4", (48,)),
])
_HEADER = struct.Struct("<4sIQI")


def write_hierarchy(path, h: Hierarchy) -> None:
    """Little-endian: magic, version u32, node count u64, SH degree u32, then
    fixed 272-byte node records (SH as 16 coefficients x RGB)."""
    n = len(h)
    rec = np.zeros(n, dtype=NODE_DTYPE)
    to_u32 = lambda a: np.where(a < 0, _U32_NONE, a).astype(np.uint32)  # noqa: E731
    rec["parent"] = to_u32(h.parent)
    rec["first_child"] = to_u32(h.first_child)
    rec["child_count"] = h.child_count
    rec["bounds"] = np.hstack([h.bounds_min, h.bounds_max])
    g = h.gaussians
    rec["mean"] = g.means
    rec["scale"] = g.scales
    rec["rotation"] = g.rotations
    rec["falloff"] = g.falloff
    rec["sh"] = g.sh.reshape(n, 48)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, h.sh_degree))
        f.write(rec.tobytes())


def read_hierarchy(path) -> Hierarchy:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MalformedHeader("file shorter than the header")
    magic, version, n, degree = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeader(f"unsupported version {version}")
    if degree > 3:
        raise UnsupportedShDegree(f"SH degree {degree}")
    body = raw[_HEADER.size:]
    if len(body) != n * NODE_DTYPE.itemsize:
        raise TruncatedRecord(f"expected {n} node records, found {len(body) / NODE_DTYPE.itemsize:.2f}")
    rec = np.frombuffer(body, dtype=NODE_DTYPE, count=n)
    from_u32 = lambda a: np.where(a == _U32_NONE, NONE, a.astype(np.int64))  # noqa: E731
    b = rec["bounds"].astype(np.float64)
    g = GaussianArrays(
        rec["mean"].astype(np.float64), rec["scale"].astype(np.float64), rec["rotation"].astype(np.float64),
        rec["falloff"].astype(np.float64), rec["sh"].astype(np.float64).reshape(n, SH_COEFFS, 3),
    )
    h = Hierarchy(g, b[:, :3].copy(), b[:, 3:].copy(), from_u32(rec["parent"]), from_u32(rec["first_child"]),
                  rec["child_count"].astype(np.int64), int(degree))
    h.validate()
    return h


# ---------------------------------------------------------------------------
# cameras, paths, manifests, config
# ---------------------------------------------------------------------------

def camera_to_json(cam: CameraModel, **extra) -> dict:
    d = {
        "resolution": list(cam.resolution),
        "focal": cam.focal.tolist(),
        "principal": cam.principal.tolist(),
        "world_to_camera": cam.world_to_camera.reshape(-1).tolist(),
    }
    if not np.array_equal(cam.exposure, np.hstack([np.eye(3), np.zeros((3, 1))])):
        d["exposure"] = cam.exposure.reshape(-1).tolist()
    d.update(extra)
    return d


def camera_from_json(d: dict) -> CameraModel:
    kw = dict(focal=d["focal"], principal=d["principal"], resolution=tuple(d["resolution"]),
              world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(3, 4))
    if "exposure" in d:
        kw["exposure"] = np.asarray(d["exposure"], dtype=np.float64).reshape(3, 4)
    return CameraModel(**kw)


def write_cameras(path, cams, images=None) -> None:
    """JSON list of cameras; ``images`` optionally adds an image path per camera."""
    items = []
    for i, c in enumerate(cams):
        extra = {"id": i}
        if images is not None:
            extra["image"] = str(images[i])
        items.append(camera_to_json(c, **extra))
    Path(path).write_text(json.dumps({"cameras": items}, indent=1))


def read_cameras(path):
    """Return (list of CameraModel, list of image paths or None)."""
    d = json.loads(Path(path).read_text())
    items = d["cameras"] if isinstance(d, dict) else d
    base = Path(path).parent
    cams = [camera_from_json(c) for c in items]
    images = [str(base / c["image"]) if "image" in c else None for c in items]
    return cams, images


@dataclass
class CameraPath:
    cameras: list
    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(self.times) != len(self.cameras):
            raise ValueError("need one timestamp per camera")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.cameras)


def write_path(path, cp: CameraPath) -> None:
    frames = [camera_to_json(c, time=float(t)) for c, t in zip(cp.cameras, cp.times)]
    Path(path).write_text(json.dumps({"frames": frames}, indent=1))


def read_path(path) -> CameraPath:
    d = json.loads(Path(path).read_text())
    frames = d["frames"]
    return CameraPath([camera_from_json(f) for f in frames], [f["time"] for f in frames])


def _bound(v):
    return None if not np.isfinite(v) else float(v)


def _unbound(v, inf):
    return inf if v is None else float(v)


def write_manifest(path, m: SceneManifest) -> None:
    chunks = [{
        "grid": list(c.grid_coord),
        "min": [_bound(v) for v in c.bounds.min],
        "max": [_bound(v) for v in c.bounds.max],
        "cameras": [int(i) if isinstance(i, (int, np.integer)) else i for i in c.camera_ids],
        "hierarchy": c.hierarchy_ref,
    } for c in m.chunks]
    d = {"chunk_size": m.chunk_size, "scene_diameter": m.scene_diameter, "up_axis": m.up_axis,
         "scaffold": m.scaffold_ref, "skybox": m.skybox_ref, "chunks": chunks}
    Path(path).write_text(json.dumps(d, indent=1))


def read_manifest(path) -> SceneManifest:
    d = json.loads(Path(path).read_text())
    chunks = [ChunkEntry(
        tuple(c["grid"]),
        Aabb([_unbound(v, -np.inf) for v in c["min"]], [_unbound(v, np.inf) for v in c["max"]]),
        list(c["cameras"]),
        c.get("hierarchy"),
    ) for c in d["chunks"]]
    return SceneManifest(d["chunk_size"], chunks, d.get("scaffold"), d.get("skybox"),
                         d.get("scene_diameter", 0.0), d.get("up_axis", 2))


def read_config(path) -> dict:
    """JSON object with optional "build" and "refine" sections."""
    d = json.loads(Path(path).read_text())
    if not isinstance(d, dict):
        raise ValueError("config must be a JSON object")
    return d


# ---------------------------------------------------------------------------
# depth maps, SfM, images
# ---------------------------------------------------------------------------

def write_depth(path, depth) -> None:
    """u32 width, u32 height, then row-major f32 values."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MalformedHeader("depth file shorter than its header")
    w, h = struct.unpack_from("<II", raw)
    if len(raw) - 8 != 4 * w * h:
        raise TruncatedRecord(f"expected {w}x{h} floats")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


def write_sfm(path, sfm: SfmPointSet) -> None:
    d = {"points": sfm.positions.tolist(),
         "observations": {str(k): v.tolist() for k, v in sfm.observations.items()}}
    Path(path).write_text(json.dumps(d))


def read_sfm(path) -> SfmPointSet:
    """JSON with "points" (x, y, z rows) and "observations" mapping image id
    to rows of (point index, reprojection error, inverse depth)."""
    d = json.loads(Path(path).read_text())
    obs = {}
    for k, v in d.get("observations", {}).items():
        obs[int(k) if str(k).lstrip("-").isdigit() else k] = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    return SfmPointSet(np.asarray(d["points"], dtype=np.float64).reshape(-1, 3), obs)


def read_depth_observations(path):
    """Text rows "u v inverse_depth reprojection_error"; returns (pixels, inv_depth, error)."""
    a = np.loadtxt(path, ndmin=2)
    if a.shape[1] != 4:
        raise MalformedHeader("expected 4 columns: u v inverse_depth error")
    return a[:, :2].astype(np.int64), a[:, 2], a[:, 3]


def write_png(path, img) -> None:
    from PIL import Image

    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
