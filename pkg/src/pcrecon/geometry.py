"""Point-cloud and mesh primitives.

Canonical object frame: up is +z, front is -y, shapes are centered at the
origin with their longest bounding-box side scaled to 1. Azimuth 0 views the
front; azimuth 180 is the fully occluded back view. All operations are pure
functions of their inputs plus explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VIEW_RESOLUTION = 128
_ORTHO_HALF_WIDTH = 0.9     # screen window covers the unit-box diagonal
_DEPTH_NEAR = 1.0
_DEPTH_FAR = 3.0
_CAMERA_DISTANCE = 2.0

PRIMITIVE_KINDS = ("sphere", "box", "cylinder", "chairlike", "tablelike")


@dataclass(eq=False)
class PointCloud:
    """Ordered array of N finite 3-d points; order carries no meaning."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"PointCloud: expected (N,3) with N>=1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("PointCloud: non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"TriangleMesh: bad vertex array {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"TriangleMesh: bad face array {self.faces.shape}")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= len(self.vertices):
            raise ValueError("TriangleMesh: face index out of range")
        areas = triangle_areas(self.vertices, self.faces)
        if np.any(areas <= 1e-12):
            raise ValueError("TriangleMesh: degenerate triangle (area <= 1e-12)")


@dataclass(eq=False)
class RigidTransform:
    """Rotation (orthonormal, det +1) plus translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("RigidTransform: rotation must be 3x3, translation length 3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("RigidTransform: rotation not orthonormal with det +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


@dataclass(eq=False)
class RenderedView:
    """128x128 single-channel image in [0,1] plus its view angles."""
    pixels: np.ndarray
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (VIEW_RESOLUTION, VIEW_RESOLUTION):
            raise ValueError(f"RenderedView: expected {VIEW_RESOLUTION}x{VIEW_RESOLUTION}, "
                             f"got {self.pixels.shape}")
        if not (0.0 <= self.azimuth_deg < 360.0):
            raise ValueError(f"RenderedView: azimuth {self.azimuth_deg} outside [0, 360)")


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # |a|^2 + |b|^2 - 2ab via BLAS; clip tiny negative rounding
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def nearest_neighbor(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of a, the index of and squared distance to its nearest row of b."""
    d2 = _sq_dists(a, b)
    idx = d2.argmin(axis=1)
    return idx, d2[np.arange(len(a)), idx]


# ---------------------------------------------------------------------------
# sampling

def farthest_point_sample(source, k: int, seed: int = 0) -> PointCloud:
    """Greedy farthest point sampling, seeded at candidate index 0.

    A mesh source is first densely sampled with 100*k area-uniform candidate
    points (deterministic per seed); a cloud source is its own candidate set.
    """
    if k < 1:
        raise ValueError(f"farthest_point_sample: k must be >= 1, got {k}")
    if isinstance(source, TriangleMesh):
        candidates = sample_mesh_uniform(source, 100 * k, seed).points
    else:
        candidates = source.points
    n = len(candidates)
    if k > n:
        raise ValueError(f"farthest_point_sample: k={k} exceeds {n} candidates")

    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = 0
    min_d2 = ((candidates - candidates[0]) ** 2).sum(1)
    for i in range(1, k):
        nxt = int(min_d2.argmax())
        chosen[i] = nxt
        d2 = ((candidates - candidates[nxt]) ** 2).sum(1)
        np.minimum(min_d2, d2, out=min_d2)
    return PointCloud(candidates[chosen].copy())


def sample_mesh_uniform(mesh: TriangleMesh, m: int, seed: int) -> PointCloud:
    """m points with density proportional to triangle area, uniform per triangle."""
    if m < 1:
        raise ValueError(f"sample_mesh_uniform: m must be >= 1, got {m}")
    areas = triangle_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if not np.isfinite(total) or total <= 1e-12:
        raise ValueError("sample_mesh_uniform: degenerate mesh (no surface area)")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(mesh.faces), size=m, p=areas / total)
    u = rng.random(m)
    v = rng.random(m)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    return PointCloud(a + u[:, None] * (b - a) + v[:, None] * (c - a))


def renormalize_unit_box(cloud: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale its longest side to 1."""
    pts = cloud.points
    if len(pts) < 2:
        raise ValueError("renormalize_unit_box: need at least 2 points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("renormalize_unit_box: zero extent on all axes")
    center = (lo + hi) / 2.0
    return PointCloud((pts - center) / extent)


# ---------------------------------------------------------------------------
# rigid alignment

def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing sum |R s + t - d|^2 over paired rows."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, dc - r @ sc


def icp_align(source: PointCloud, target: PointCloud, max_iters: int = 50,
              tol: float = 1e-9) -> tuple[RigidTransform, PointCloud]:
    """Point-to-point ICP of source onto target.

    Alternates brute-force nearest-neighbor correspondence with the optimal
    rigid transform for those correspondences. An iteration is accepted only
    if it lowers the mean correspondence distance, so accepted error is
    monotone by construction; stops when the improvement drops below tol.
    Returns the cumulative transform and the transformed source cloud.
    """
    src = source.points.copy()
    tgt = target.points
    r_tot = np.eye(3)
    t_tot = np.zeros(3)

    idx, d2 = nearest_neighbor(src, tgt)
    err = float(np.sqrt(d2).mean())
    for _ in range(max_iters):
        r, t = _kabsch(src, tgt[idx])
        cand = src @ r.T + t
        idx2, d2 = nearest_neighbor(cand, tgt)
        err2 = float(np.sqrt(d2).mean())
        if err2 > err:
            break
        src = cand
        idx = idx2
        r_tot = r @ r_tot
        t_tot = r @ t_tot + t
        improved = err - err2
        err = err2
        if improved < tol:
            break
    # re-orthonormalize accumulated rotation against fp drift
    u, _, vt = np.linalg.svd(r_tot)
    r_tot = u @ vt
    if np.linalg.det(r_tot) < 0:
        u[:, -1] = -u[:, -1]
        r_tot = u @ vt
    return RigidTransform(r_tot, t_tot), PointCloud(src)


# ---------------------------------------------------------------------------
# procedural primitives

def _box_mesh(center, extents) -> tuple[np.ndarray, np.ndarray]:
    cx, cy, cz = center
    ex, ey, ez = np.asarray(extents) / 2.0
    verts = np.array([
        [cx - ex, cy - ey, cz - ez], [cx + ex, cy - ey, cz - ez],
        [cx + ex, cy + ey, cz - ez], [cx - ex, cy + ey, cz - ez],
        [cx - ex, cy - ey, cz + ez], [cx + ex, cy - ey, cz + ez],
        [cx + ex, cy + ey, cz + ez], [cx - ex, cy + ey, cz + ez],
    ])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ])
    return verts, faces


def _merge(parts) -> tuple[np.ndarray, np.ndarray]:
    verts, faces, base = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + base)
        base += len(v)
    return np.vstack(verts), np.vstack(faces)


def _icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        vlist = list(verts)
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = vlist[i] + vlist[j]
                vlist.append(m / np.linalg.norm(m))
                cache[key] = len(vlist) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces)
    return verts, faces


def _cylinder(radius, height, segments) -> tuple[np.ndarray, np.ndarray]:
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bot = np.hstack([ring, np.full((segments, 1), -height / 2.0)])
    top = np.hstack([ring, np.full((segments, 1), height / 2.0)])
    verts = np.vstack([bot, top, [[0, 0, -height / 2.0]], [[0, 0, height / 2.0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + i], [j, segments + j, segments + i]]   # side
        faces += [[cb, j, i], [ct, segments + i, segments + j]]            # caps
    return verts, np.array(faces)


def _legs(params, rng_unused=None):
    """Leg boxes under a slab: 4 corner legs or 3 (two front, one back-center)."""
    w, d = params["top_width"], params["top_depth"]
    lt = params["leg_thickness"]
    lh = params["leg_height"]
    inset_x = w / 2.0 - lt / 2.0
    inset_y = d / 2.0 - lt / 2.0
    if params["leg_count"] == 4:
        xy = [(-inset_x, -inset_y), (inset_x, -inset_y),
              (-inset_x, inset_y), (inset_x, inset_y)]
    elif params["leg_count"] == 3:
        xy = [(-inset_x, -inset_y), (inset_x, -inset_y), (0.0, inset_y)]
    else:
        raise ValueError(f"leg_count must be 3 or 4, got {params['leg_count']}")
    return [_box_mesh((x, y, lh / 2.0), (lt, lt, lh)) for x, y in xy]


_PARAM_RANGES = {
    "box": {"dx": (0.5, 1.0), "dy": (0.3, 1.0), "dz": (0.3, 1.0)},
    "sphere": {"triangles": (80, 20480)},
    "cylinder": {"radius": (0.15, 0.5), "height": (0.4, 1.0), "segments": (24, 48)},
    "chairlike": {
        "top_width": (0.38, 0.55), "top_depth": (0.34, 0.5),
        "top_thickness": (0.04, 0.08), "leg_height": (0.28, 0.45),
        "leg_thickness": (0.03, 0.06), "leg_count": (3, 4),
        "back_height": (0.35, 0.55), "back_thickness": (0.04, 0.07),
        "has_backrest": (0, 1), "has_armrests": (0, 1),
        "armrest_height": (0.12, 0.2), "armrest_thickness": (0.03, 0.05),
    },
    "tablelike": {
        "top_width": (0.6, 1.0), "top_depth": (0.4, 0.8),
        "top_thickness": (0.04, 0.08), "leg_height": (0.35, 0.6),
        "leg_thickness": (0.04, 0.07), "leg_count": (3, 4),
        "has_shelf": (0, 1),
    },
}

_INT_PARAMS = {"triangles", "segments", "leg_count", "has_backrest",
               "has_armrests", "has_shelf"}

# narrower draw ranges where the accepted range is a budget, not a sweet spot
_SAMPLE_RANGES = {"sphere": {"triangles": (320, 1280)}}


def sample_primitive_params(kind: str, seed: int) -> dict:
    """Draw a full parameter dict for a primitive from its documented ranges."""
    if kind not in _PARAM_RANGES:
        raise ValueError(f"unknown primitive kind {kind!r}; expected one of {PRIMITIVE_KINDS}")
    rng = np.random.default_rng(seed)
    params = {}
    for key, (lo, hi) in _PARAM_RANGES[kind].items():
        lo, hi = _SAMPLE_RANGES.get(kind, {}).get(key, (lo, hi))
        if key in _INT_PARAMS:
            params[key] = int(rng.integers(lo, hi + 1))
        else:
            params[key] = float(rng.uniform(lo, hi))
    return params


def _validate_params(kind: str, params: dict) -> dict:
    ranges = _PARAM_RANGES[kind]
    unknown = set(params) - set(ranges)
    if unknown:
        raise ValueError(f"{kind}: unknown parameters {sorted(unknown)}")
    full = dict(params)
    for key, (lo, hi) in ranges.items():
        if key not in full:
            raise ValueError(f"{kind}: missing parameter {key!r}")
        v = full[key]
        if not (lo <= v <= hi):
            raise ValueError(f"{kind}: parameter {key}={v} outside [{lo}, {hi}]")
    return full


def generate_primitive(kind: str, params: dict | None = None, seed: int = 0) -> TriangleMesh:
    """Build a canonical-pose primitive mesh; omitted params are drawn per seed.

    The result is centered at the origin with longest bounding-box extent 1,
    up +z and front -y. chairlike/tablelike expose the categorical structure
    (leg count, backrest, armrests, shelf) used by the diversity experiments.
    """
    if kind not in _PARAM_RANGES:
        raise ValueError(f"unknown primitive kind {kind!r}; expected one of {PRIMITIVE_KINDS}")
    full = dict(sample_primitive_params(kind, seed))
    full.update(params or {})
    p = _validate_params(kind, full)

    if kind == "box":
        verts, faces = _box_mesh((0, 0, 0), (p["dx"], p["dy"], p["dz"]))
    elif kind == "sphere":
        subs = 0
        while 20 * 4 ** (subs + 1) <= p["triangles"]:
            subs += 1
        verts, faces = _icosphere(subs)
    elif kind == "cylinder":
        verts, faces = _cylinder(p["radius"], p["height"], int(p["segments"]))
    elif kind == "chairlike":
        w, d, t = p["top_width"], p["top_depth"], p["top_thickness"]
        lh = p["leg_height"]
        parts = [_box_mesh((0, 0, lh + t / 2.0), (w, d, t))]
        parts += _legs(p)
        seat_top = lh + t
        if p["has_backrest"]:
            bt = p["back_thickness"]
            parts.append(_box_mesh((0, d / 2.0 - bt / 2.0, seat_top + p["back_height"] / 2.0),
                                   (w, bt, p["back_height"])))
        if p["has_armrests"]:
            at = p["armrest_thickness"]
            ah = p["armrest_height"]
            for sx in (-1.0, 1.0):
                x = sx * (w / 2.0 - at / 2.0)
                parts.append(_box_mesh((x, 0, seat_top + ah - at / 2.0), (at, d * 0.9, at)))
                parts.append(_box_mesh((x, -d * 0.35, seat_top + (ah - at) / 2.0),
                                       (at, at, ah - at)))
        verts, faces = _merge(parts)
    elif kind == "tablelike":
        w, d, t = p["top_width"], p["top_depth"], p["top_thickness"]
        lh = p["leg_height"]
        parts = [_box_mesh((0, 0, lh + t / 2.0), (w, d, t))]
        parts += _legs(p)
        if p["has_shelf"]:
            parts.append(_box_mesh((0, 0, lh * 0.35), (w * 0.8, d * 0.8, t * 0.8)))
        verts, faces = _merge(parts)

    # canonicalize: bbox centered at origin, longest side exactly 1
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    verts = (verts - (lo + hi) / 2.0) / float((hi - lo).max())
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# orthographic depth rendering

def _camera_basis(azimuth_deg: float, elevation_deg: float):
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    # camera sits at -y for azimuth 0 and looks at the origin
    forward = np.array([np.sin(az) * np.cos(el), np.cos(az) * np.cos(el), -np.sin(el)])
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ world_up) > 0.999:
        world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return right, up, forward


def render_view(mesh: TriangleMesh, azimuth_deg: float, elevation_deg: float) -> RenderedView:
    """Orthographic depth-buffer rasterization to 128x128.

    Pixel value is the normalized inverse depth of the nearest surface
    (larger = closer); background pixels are exactly 0. Deterministic.
    """
    if not (0.0 <= azimuth_deg < 360.0):
        raise ValueError(f"render_view: azimuth {azimuth_deg} outside [0, 360)")
    if not (-90.0 <= elevation_deg <= 90.0):
        raise ValueError(f"render_view: elevation {elevation_deg} outside [-90, 90]")
    right, up, forward = _camera_basis(azimuth_deg, elevation_deg)

    res = VIEW_RESOLUTION
    half = _ORTHO_HALF_WIDTH
    px = mesh.vertices @ right
    py = mesh.vertices @ up
    depth = mesh.vertices @ forward + _CAMERA_DISTANCE

    # pixel centers; row 0 is the top of the image
    scale = res / (2.0 * half)
    col = (px + half) * scale - 0.5
    row = (half - py) * scale - 0.5

    inv_near, inv_far = 1.0 / _DEPTH_NEAR, 1.0 / _DEPTH_FAR
    buf = np.zeros((res, res))

    tri_cols = col[mesh.faces]          # [F,3]
    tri_rows = row[mesh.faces]
    tri_depth = depth[mesh.faces]
    for f in range(len(mesh.faces)):
        c0, c1, c2 = tri_cols[f]
        r0, r1, r2 = tri_rows[f]
        det = (c1 - c0) * (r2 - r0) - (c2 - c0) * (r1 - r0)
        if abs(det) < 1e-12:
            continue
        j0 = max(int(np.ceil(min(c0, c1, c2))), 0)
        j1 = min(int(np.floor(max(c0, c1, c2))), res - 1)
        i0 = max(int(np.ceil(min(r0, r1, r2))), 0)
        i1 = min(int(np.floor(max(r0, r1, r2))), res - 1)
        if j0 > j1 or i0 > i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        l1 = ((jj - c0) * (r2 - r0) - (ii - r0) * (c2 - c0)) / det
        l2 = ((ii - r0) * (c1 - c0) - (jj - c0) * (r1 - r0)) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        d = l0 * tri_depth[f, 0] + l1 * tri_depth[f, 1] + l2 * tri_depth[f, 2]
        val = (1.0 / np.maximum(d, _DEPTH_NEAR) - inv_far) / (inv_near - inv_far)
        patch = buf[i0:i1 + 1, j0:j1 + 1]
        np.maximum(patch, np.where(inside, val, 0.0), out=patch)

    return RenderedView(np.clip(buf, 0.0, 1.0), float(azimuth_deg), float(elevation_deg))
