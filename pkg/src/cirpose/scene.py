"""Object models, depth-only rendering and synthetic scenes.

Depth maps are plain ``(H, W)`` float arrays in metres with ``0`` meaning
"no surface"; their validity mask is ``depth > 0``.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import EPS_Z, Intrinsics, RigidTransform, rotation_about_axis, so3_exp

logger = logging.getLogger(__name__)


class PlyError(ValueError):
    """Malformed or unsupported PLY input."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def max_pairwise_distance(points, chunk=2048):
    """Brute-force maximum distance between any two points."""
    P = np.asarray(points, dtype=float)
    best = 0.0
    for i in range(0, len(P), chunk):
        A = P[i : i + chunk]
        d2 = np.sum((A[:, None, :] - P[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def compute_diameter(vertices):
    V = np.asarray(vertices, dtype=float)
    if len(V) > 64:
        try:
            V = V[ConvexHull(V).vertices]
        except (QhullError, ValueError):
            pass
    return max_pairwise_distance(V)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Vertices in metres, optional triangles and a discrete symmetry set."""

    vertices: np.ndarray
    faces: np.ndarray | None = None
    symmetries: tuple = ()
    closed: bool = False
    diameter: float = field(default=0.0)

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(V) == 0:
            raise ValueError("model has no vertices")
        F = None if self.faces is None else np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if F is not None and len(F) == 0:
            F = None
        if F is not None and (F.min() < 0 or F.max() >= len(V)):
            raise ValueError("face index out of range")
        syms = [s for s in self.symmetries]
        if not any(s.allclose(RigidTransform.identity(), atol=1e-12) for s in syms):
            syms.insert(0, RigidTransform.identity())
        for s in syms:
            if not s.is_valid(1e-6):
                raise ValueError("symmetry is not a rigid transform")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)
        object.__setattr__(self, "symmetries", tuple(syms))
        if not self.diameter:
            object.__setattr__(self, "diameter", compute_diameter(V))
        if not self.diameter > 0:
            raise ValueError("model diameter must be positive")


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


def _parse_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("missing PLY magic or end_header", 0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("unterminated header", end)
    body_offset = nl + 1
    fmt = None
    elements = []
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown property type {parts[1]!r}")
                elements[-1]["props"].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
        else:
            raise PlyError(f"unexpected header line {raw!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_offset


def _read_binary_element(data, off, el):
    props = el["props"]
    n = el["count"]
    if all(kind == "scalar" for _, kind, _, _ in props):
        dt = np.dtype([(name, "<" + t) for name, _, t, _ in props])
        need = dt.itemsize * n
        if off + need > len(data):
            raise PlyError(f"truncated {el['name']} data: need {need} bytes, have {len(data) - off}", len(data))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=off)
        return {name: arr[name].astype(float) for name, *_ in props}, off + need
    out = {name: [] for name, *_ in props}
    for _ in range(n):
        for name, kind, t, it in props:
            if kind == "scalar":
                size = np.dtype(t).itemsize
                if off + size > len(data):
                    raise PlyError(f"truncated {el['name']} data", off)
                out[name].append(np.frombuffer(data, dtype="<" + t, count=1, offset=off)[0])
                off += size
            else:
                csize = np.dtype(t).itemsize
                if off + csize > len(data):
                    raise PlyError(f"truncated {el['name']} list count", off)
                cnt = int(np.frombuffer(data, dtype="<" + t, count=1, offset=off)[0])
                off += csize
                isize = np.dtype(it).itemsize
                if off + cnt * isize > len(data):
                    raise PlyError(f"truncated {el['name']} list", off)
                out[name].append(np.frombuffer(data, dtype="<" + it, count=cnt, offset=off).astype(np.int64))
                off += cnt * isize
    return out, off


def _read_ascii(data, body_offset, elements):
    lines = data[body_offset:].split(b"\n")
    # byte offset of each line start, for error messages
    starts = np.cumsum([body_offset] + [len(ln) + 1 for ln in lines[:-1]])
    i = 0
    result = {}
    for el in elements:
        out = {name: [] for name, *_ in el["props"]}
        for _ in range(el["count"]):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                raise PlyError(f"truncated {el['name']} data", len(data))
            toks = lines[i].split()
            k = 0
            try:
                for name, kind, t, _ in el["props"]:
                    if kind == "scalar":
                        out[name].append(float(toks[k]))
                        k += 1
                    else:
                        cnt = int(toks[k])
                        out[name].append(np.array([int(v) for v in toks[k + 1 : k + 1 + cnt]], dtype=np.int64))
                        if len(out[name][-1]) != cnt:
                            raise IndexError
                        k += 1 + cnt
            except (IndexError, ValueError) as exc:
                raise PlyError(f"bad {el['name']} line {lines[i][:60]!r}", int(starts[i])) from exc
            i += 1
        result[el["name"]] = out
    return result


def read_ply(path_or_bytes):
    """Parse a PLY file into ``(vertices, faces_or_None)``."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            data = f.read()
    fmt, elements, off = _parse_header(data)
    names = [el["name"] for el in elements]
    if "vertex" not in names:
        raise PlyError("no vertex element")
    vel = elements[names.index("vertex")]
    pos = {name: t for name, kind, t, _ in vel["props"] if kind == "scalar"}
    for axis in "xyz":
        if axis not in pos:
            raise PlyError(f"vertex property {axis!r} missing")
        if not pos[axis].startswith("f"):
            raise PlyError(f"vertex position {axis!r} must be float or double, got {pos[axis]}")
    if fmt == "ascii":
        parsed = _read_ascii(data, off, elements)
    else:
        parsed = {}
        for el in elements:
            parsed[el["name"]], off = _read_binary_element(data, off, el)
    v = parsed["vertex"]
    V = np.stack([np.asarray(v[a], dtype=float) for a in "xyz"], axis=-1).reshape(-1, 3)
    if len(V) == 0:
        raise PlyError("empty mesh: no vertices")
    if not np.all(np.isfinite(V)):
        raise PlyError("non-finite vertex positions")
    faces = None
    if "face" in parsed:
        f = parsed["face"]
        key = "vertex_indices" if "vertex_indices" in f else ("vertex_index" if "vertex_index" in f else None)
        if key is not None and len(f[key]):
            tris = []
            for poly in f[key]:
                poly = np.asarray(poly, dtype=np.int64)
                for j in range(1, len(poly) - 1):  # fan-triangulate polygons
                    tris.append((poly[0], poly[j], poly[j + 1]))
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return V, faces


def write_ply(path, vertices, faces=None, binary=True):
    V = np.asarray(vertices, dtype=float)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(V)}"]
    header += ["property double x", "property double y", "property double z"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(V.astype("<f8").tobytes())
            if faces is not None:
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = faces
                f.write(rec.tobytes())
        else:
            for p in V:
                f.write(("%r %r %r\n" % tuple(float(c) for c in p)).encode("ascii"))
            if faces is not None:
                for t in faces:
                    f.write(("3 %d %d %d\n" % tuple(t)).encode("ascii"))


def load_symmetries(path, scale=1.0):
    with open(path) as f:
        mats = json.load(f)
    out = []
    for m in mats:
        m = np.array(m, dtype=float)
        out.append(RigidTransform(m[:3, :3], m[:3, 3] * scale))
    return out


def load_model(path, scale=1.0, symmetries=None, closed=False):
    """Read a PLY model; ``scale`` converts file units to metres (BOP: 1e-3).

    ``symmetries`` is a path to the sidecar JSON (list of 4x4 row-major
    matrices in file units), or ``None`` to look for ``symmetries.json`` next
    to the model.
    """
    V, F = read_ply(path)
    syms = []
    if symmetries is None:
        cand = os.path.join(os.path.dirname(os.fspath(path)), "symmetries.json")
        if os.path.exists(cand):
            symmetries = cand
    if symmetries is not None:
        syms = load_symmetries(symmetries, scale)
    return ObjectModel(V * scale, F, tuple(syms), closed=closed)


# --------------------------------------------------------------------- rendering


def _rasterize(Vc, faces, K, depth, cull_backfaces):
    H, W = depth.shape
    z = Vc[:, 2]
    tri = Vc[faces]  # (T, 3, 3)
    front = np.all(tri[:, :, 2] > EPS_Z, axis=1)
    if cull_backfaces:
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        front &= np.einsum("ij,ij->i", n, tri[:, 0]) < 0.0
    zs = np.where(z > EPS_Z, z, 1.0)
    u = K.fx * Vc[:, 0] / zs + K.cx
    v = K.fy * Vc[:, 1] / zs + K.cy
    for a, b, c in faces[front]:
        ua, ub, uc = u[a], u[b], u[c]
        va, vb, vc = v[a], v[b], v[c]
        x0 = max(int(np.ceil(min(ua, ub, uc))), 0)
        x1 = min(int(np.floor(max(ua, ub, uc))), W - 1)
        y0 = max(int(np.ceil(min(va, vb, vc))), 0)
        y1 = min(int(np.floor(max(va, vb, vc))), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
        if abs(area) < 1e-14:
            continue
        py, px = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(float)
        w0 = ((ub - px) * (vc - py) - (uc - px) * (vb - py)) / area
        w1 = ((uc - px) * (va - py) - (ua - px) * (vc - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        # inverse depth is affine in screen space; anchored at a so flat triangles are exact
        ia = 1.0 / z[a]
        zinv = ia + w1 * (1.0 / z[b] - ia) + w2 * (1.0 / z[c] - ia)
        zz = np.where(inside & (zinv > 0), 1.0 / np.where(zinv > 0, zinv, 1.0), np.inf)
        sub = depth[y0 : y1 + 1, x0 : x1 + 1]
        np.minimum(sub, zz, out=sub)


def _splat(Vc, K, depth, radius):
    H, W = depth.shape
    ok = Vc[:, 2] > EPS_Z
    P = Vc[ok]
    u = K.fx * P[:, 0] / P[:, 2] + K.cx
    v = K.fy * P[:, 1] / P[:, 2] + K.cy
    r = int(np.ceil(radius))
    for oy in range(-r, r + 1):
        for ox in range(-r, r + 1):
            px = np.round(u).astype(np.int64) + ox
            py = np.round(v).astype(np.int64) + oy
            sel = (px >= 0) & (px < W) & (py >= 0) & (py < H) & ((px - u) ** 2 + (py - v) ** 2 <= radius**2)
            np.minimum.at(depth, (py[sel], px[sel]), P[sel, 2])


def render_depth(model, G, K, point_radius=1.0):
    """Z-buffer depth of ``model`` at pose ``G`` seen through ``K``.

    Pixel ``(u, v)`` samples the ray through its integer coordinates.  Meshes
    are rasterized with perspective-correct depth; triangles reaching behind
    the near plane are skipped.  Point-cloud models are splatted as discs of
    ``point_radius`` pixels.  Back faces are culled only for closed models.
    """
    depth = np.full((K.height, K.width), np.inf)
    Vc = G.apply(model.vertices)
    if model.faces is not None:
        _rasterize(Vc, model.faces, K, depth, model.closed)
    else:
        _splat(Vc, K, depth, point_radius)
    depth[~np.isfinite(depth)] = 0.0
    return depth


# ------------------------------------------------------------------ perturbation


def sample_perturbation(sigma_rot, sigma_trans, rng=None):
    """Random pose perturbation ``(dt, w)`` as a length-6 array.

    ``w`` is a rotation vector with axis uniform on the sphere and angle
    ``|N(0, sigma_rot)|`` (degrees in, radians out); ``dt ~ N(0, sigma_trans^2 I)``.
    Apply it with :func:`apply_perturbation`.
    """
    rng = np.random.default_rng(rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, 1.0)) * np.deg2rad(sigma_rot)
    dt = rng.normal(size=3) * sigma_trans
    return np.concatenate([dt, axis * angle])


def apply_perturbation(G, delta):
    """Rotate the object about its own origin and shift it: ``(exp(w) R, t + dt)``."""
    delta = np.asarray(delta, dtype=float)
    return RigidTransform(so3_exp(delta[3:]) @ G.rotation, G.translation + delta[:3])


def perturb_pose(G, angle_deg, trans, rng=None):
    """Perturb by exactly ``angle_deg`` about a random axis and ``trans`` metres in a random direction."""
    rng = np.random.default_rng(rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d *= trans / np.linalg.norm(d)
    return RigidTransform(rotation_about_axis(axis, np.deg2rad(angle_deg)) @ G.rotation, G.translation + d)


# ------------------------------------------------------------------------ scenes


@dataclass(frozen=True, eq=False)
class Scene:
    """One object at a known pose with its rendered ("sensor") depth."""

    model: ObjectModel
    pose: RigidTransform
    K: Intrinsics
    depth: np.ndarray
    empty: bool = False

    @property
    def mask(self):
        return self.depth > 0


def make_scene(model, G_true, K):
    # the sensor is float32, like the on-disk format
    depth = render_depth(model, G_true, K).astype(np.float32).astype(float)
    empty = not np.any(depth > 0)
    if empty:
        warnings.warn("scene render is empty; object outside the frustum", RuntimeWarning, stacklevel=2)
    depth.flags.writeable = False
    return Scene(model, G_true, K, depth, empty)


def save_scene(scene, directory):
    os.makedirs(directory, exist_ok=True)
    write_ply(os.path.join(directory, "model.ply"), scene.model.vertices, scene.model.faces)
    with open(os.path.join(directory, "symmetries.json"), "w") as f:
        json.dump([s.to_list() for s in scene.model.symmetries], f)
    with open(os.path.join(directory, "camera.json"), "w") as f:
        json.dump(scene.K.to_dict(), f)
    with open(os.path.join(directory, "gt_poses.json"), "w") as f:
        json.dump([scene.pose.to_list()], f)
    with open(os.path.join(directory, "depth.f32"), "wb") as f:
        f.write(np.ascontiguousarray(scene.depth, dtype="<f4").tobytes())
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump({"schema": "cirpose/scene/v1", "closed": bool(scene.model.closed)}, f)


def load_scene(directory):
    meta = {}
    if os.path.exists(os.path.join(directory, "meta.json")):
        with open(os.path.join(directory, "meta.json")) as f:
            meta = json.load(f)
    model = load_model(
        os.path.join(directory, "model.ply"),
        symmetries=os.path.join(directory, "symmetries.json"),
        closed=meta.get("closed", False),
    )
    with open(os.path.join(directory, "camera.json")) as f:
        K = Intrinsics.from_dict(json.load(f))
    with open(os.path.join(directory, "gt_poses.json")) as f:
        poses = [RigidTransform.from_list(m) for m in json.load(f)]
    raw = np.fromfile(os.path.join(directory, "depth.f32"), dtype="<f4")
    if raw.size != K.width * K.height:
        raise ValueError(f"depth.f32 has {raw.size} values, expected {K.width * K.height}")
    depth = raw.reshape(K.height, K.width).astype(float)
    depth.flags.writeable = False
    return Scene(model, poses[0], K, depth, not np.any(depth > 0))


# -------------------------------------------------------------- synthetic models


def icosphere(subdivisions=2):
    t = (1.0 + 5**0.5) / 2.0
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]  # fmt: skip
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]  # fmt: skip
    V = [np.array(v, dtype=float) / np.linalg.norm(v) for v in V]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = V[i] + V[j]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        newF = []
        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            newF += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = newF
    return np.array(V), np.array(F, dtype=np.int64)


def make_blob(rng=None, radius=0.08, bump=0.3, subdivisions=2):
    """Closed, asymmetric star-shaped mesh (an icosphere with smooth radial bumps)."""
    rng = np.random.default_rng(rng)
    V, F = icosphere(subdivisions)
    dirs = rng.normal(size=(4, 3))
    phases = rng.uniform(0, 2 * np.pi, size=4)
    freqs = rng.uniform(1.0, 3.0, size=4)
    r = 1.0 + bump * np.mean(np.sin(freqs * (V @ dirs.T) + phases), axis=1)
    # elongate along one axis so the shape has no near-symmetry
    stretch = np.array([1.4, 1.0, 0.75])
    return ObjectModel(V * r[:, None] * stretch * radius, F, closed=True)


def make_box(size=(0.1, 0.06, 0.04), with_symmetries=False):
    sx, sy, sz = np.asarray(size, dtype=float) / 2.0
    V = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # outward counter-clockwise winding
    F = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])  # fmt: skip
    syms = ()
    if with_symmetries:
        syms = tuple(RigidTransform(rotation_about_axis(ax, np.pi), np.zeros(3)) for ax in np.eye(3))
    return ObjectModel(V, F, syms, closed=True)


def default_camera(width=160, height=120, fov_x_deg=32.0):
    f = width / 2.0 / np.tan(np.deg2rad(fov_x_deg) / 2.0)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def random_object_pose(rng=None, distance=(0.45, 0.6), lateral=0.02):
    """Object in front of the camera with a uniformly random orientation."""
    rng = np.random.default_rng(rng)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    t = np.array([rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), rng.uniform(*distance)])
    return RigidTransform(R, t)


def synthetic_scene(seed, K=None, model=None):
    """Deterministic blob scene for a given seed."""
    rng = np.random.default_rng(seed)
    if model is None:
        model = make_blob(rng)
    if K is None:
        K = default_camera()
    return make_scene(model, random_object_pose(rng), K)
