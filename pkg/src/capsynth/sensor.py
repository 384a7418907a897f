"""Simulated structured-light sensor.

Each pixel casts one ray; the nearest primitive hit gives the registered
3D point (world frame), the instance id, and a Lambertian gray value. The
point/pixel correspondence is one-to-one by construction, which is the
property the segmentation stage relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import ConvexHull

from .geomcore import RigidTransform

POINTS_MAGIC = b"CSPTS001"
_HEADER = struct.Struct("<8sII")

# direction the light travels, world frame
LIGHT_DIR = np.array([0.2, -0.3, -1.0]) / np.linalg.norm([0.2, -0.3, -1.0])

_RAY_CHUNK = 65536


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``extrinsics`` maps camera coordinates to world.

    Camera axes follow the usual vision convention: +Z forward, +X right,
    +Y down. Pixel ``(row, col)`` has its centre at ``u = col``, ``v = row``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.extrinsics.translation)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points):
        """World points ``(..., 3)`` -> ``(u, v, depth)`` arrays."""
        pc = self.extrinsics.inverse().apply(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z

    def backproject(self, u, v, depth) -> np.ndarray:
        """Pixel coordinates plus camera-frame depth -> world points."""
        u, v, depth = (np.asarray(a, dtype=float) for a in (u, v, depth))
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        return self.extrinsics.apply(np.stack([x, y, depth], axis=-1))

    def in_frustum(self, points) -> np.ndarray:
        u, v, z = self.project(points)
        return (z > 0) & (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in the world frame, shape ``(H, W, 3)``."""
        vv, uu = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.extrinsics.apply_vector(d)

    def resized(self, width: int, height: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class ScenePrimitive:
    """A renderable solid.

    ``dimensions`` is ``(radius, height)`` for a cylinder (axis along local
    Z, centred on the origin), ``(sx, sy, sz)`` for a centred box, and is
    ignored for a convex mesh, which takes its ``vertices`` instead.
    """

    kind: str
    dimensions: tuple = ()
    pose: RigidTransform = field(default_factory=RigidTransform)
    instance_id: int = 1
    albedo: float = 0.5
    vertices: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("cylinder", "box", "convex"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not (1 <= self.instance_id <= 65535):
            raise ValueError("instance_id must be in [1, 65535]")
        if not (0.0 <= self.albedo <= 1.0):
            raise ValueError("albedo must be in [0, 1]")
        dims = tuple(float(x) for x in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if self.kind == "cylinder" and (len(dims) != 2 or min(dims) <= 0):
            raise ValueError("cylinder needs positive (radius, height)")
        if self.kind == "box" and (len(dims) != 3 or min(dims) <= 0):
            raise ValueError("box needs positive (sx, sy, sz)")
        if self.kind == "convex":
            V = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
            if len(V) < 4:
                raise ValueError("convex mesh needs at least 4 vertices")
            hull = ConvexHull(V)
            object.__setattr__(self, "vertices", V)
            object.__setattr__(self, "_planes", hull.equations.copy())

    def bounding_radius(self) -> float:
        if self.kind == "cylinder":
            r, h = self.dimensions
            return float(np.hypot(r, h / 2))
        if self.kind == "box":
            return float(np.linalg.norm(self.dimensions) / 2)
        return float(np.linalg.norm(self.vertices, axis=1).max())


def _hit_box(half, o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = d == 0
    inside = np.abs(o) <= half
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    axis = np.argmax(tlo, axis=1)
    tin = tlo[np.arange(len(d)), axis]
    tout = thi.min(axis=1)
    hit = (tin <= tout) & (tin > 0)
    t = np.where(hit, tin, np.inf)
    n = np.zeros_like(d)
    rows = np.arange(len(d))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(r, h, o, d):
    n_out = np.zeros_like(d)
    t_best = np.full(len(d), np.inf)
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sgn in (-1.0, 1.0):
            t = (-b + sgn * sq) / (2 * a)
            z = o[:, 2] + t * d[:, 2]
            good = ok & (t > 0) & (np.abs(z) <= h / 2) & (t < t_best)
            t_best = np.where(good, t, t_best)
            p = o + t[:, None] * d
            n_side = np.column_stack([p[:, 0], p[:, 1], np.zeros(len(d))]) / r
            n_out = np.where(good[:, None], n_side, n_out)
        for zc in (-h / 2, h / 2):
            t = (zc - o[:, 2]) / d[:, 2]
            p = o + t[:, None] * d
            good = (d[:, 2] != 0) & (t > 0) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= r * r) & (t < t_best)
            t_best = np.where(good, t, t_best)
            n_cap = np.zeros_like(d)
            n_cap[:, 2] = np.sign(zc)
            n_out = np.where(good[:, None], n_cap, n_out)
    return t_best, n_out


def _hit_convex(planes, o, d):
    N, off = planes[:, :3], planes[:, 3]
    denom = d @ N.T
    num = -(o @ N.T + off)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / denom
    enter = np.where(denom < 0, ratio, -np.inf)
    leave = np.where(denom > 0, ratio, np.inf)
    blocked = np.any((denom == 0) & (num < 0), axis=1)
    j = np.argmax(enter, axis=1)
    tin = enter[np.arange(len(d)), j]
    tout = leave.min(axis=1)
    hit = (tin <= tout) & (tin > 0) & ~blocked
    return np.where(hit, tin, np.inf), N[j]


def intersect(prim: ScenePrimitive, origin, dirs):
    """Ray distances (``inf`` on a miss) and world-frame normals."""
    inv = prim.pose.inverse()
    o = inv.apply(np.broadcast_to(origin, dirs.shape))
    d = inv.apply_vector(dirs)
    if prim.kind == "box":
        t, n = _hit_box(np.asarray(prim.dimensions) / 2, o, d)
    elif prim.kind == "cylinder":
        t, n = _hit_cylinder(prim.dimensions[0], prim.dimensions[1], o, d)
    else:
        t, n = _hit_convex(prim._planes, o, d)
    return t, prim.pose.apply_vector(n)


@dataclass
class PointFrame:
    """Gray image with a registered per-pixel point map and instance ids.

    ``points`` holds NaN wherever no point was measured and ``ids`` holds 0
    there; ``valid`` is the authoritative per-pixel presence mask.
    """

    gray: np.ndarray
    points: np.ndarray
    ids: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.ids > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.gray.shape

    def check(self) -> None:
        finite = np.all(np.isfinite(self.points), axis=-1)
        if not np.array_equal(finite, self.valid):
            raise ValueError("point channel and id channel disagree")

    def copy(self) -> "PointFrame":
        return PointFrame(self.gray.copy(), self.points.copy(), self.ids.copy())


def render_frame(scene, camera: CameraModel, light_dir=LIGHT_DIR) -> PointFrame:
    H, W = camera.height, camera.width
    dirs = camera.pixel_rays().reshape(-1, 3)
    origin = camera.origin
    n_rays = len(dirs)
    t_best = np.full(n_rays, np.inf)
    ids = np.zeros(n_rays, dtype=np.int32)
    normals = np.zeros((n_rays, 3))
    albedo = np.zeros(n_rays)

    for prim in scene:
        # bounding-sphere cull before the exact test
        c = prim.pose.translation - origin
        along = dirs @ c
        perp2 = float(c @ c) - along**2
        rad = prim.bounding_radius()
        cand = np.flatnonzero((perp2 <= rad * rad * (1 + 1e-9)) & (along + rad > 0))
        for start in range(0, len(cand), _RAY_CHUNK):
            idx = cand[start : start + _RAY_CHUNK]
            t, n = intersect(prim, origin, dirs[idx])
            closer = t < t_best[idx]
            sel = idx[closer]
            t_best[sel] = t[closer]
            ids[sel] = prim.instance_id
            normals[sel] = n[closer]
            albedo[sel] = prim.albedo

    hit = np.isfinite(t_best)
    points = np.full((n_rays, 3), np.nan)
    points[hit] = origin + t_best[hit, None] * dirs[hit]
    # face normals toward the viewer before shading
    flip = np.sum(normals * dirs, axis=1) > 0
    normals[flip] *= -1
    shade = np.clip(-(normals @ np.asarray(light_dir, dtype=float)), 0.0, 1.0)
    gray = np.where(hit, albedo * shade, 0.0)
    return PointFrame(
        gray=gray.reshape(H, W),
        points=points.reshape(H, W, 3),
        ids=ids.reshape(H, W),
    )


def apply_dropout(frame: PointFrame, p: float, rng: np.random.Generator) -> PointFrame:
    """Invalidate each measured point independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    out = frame.copy()
    if p == 0.0:
        return out
    drop = out.valid & (rng.random(out.ids.shape) < p)
    out.ids[drop] = 0
    out.points[drop] = np.nan
    return out


# ---------------------------------------------------------------------------
# serialization


def save_points(path, points: np.ndarray) -> None:
    H, W, _ = points.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(POINTS_MAGIC, W, H))
        fh.write(np.ascontiguousarray(points, dtype="<f4").tobytes())


def load_points(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, W, H = _HEADER.unpack_from(raw)
    if magic != POINTS_MAGIC:
        raise ValueError(f"{path}: not a point grid file")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != W * H * 3:
        raise ValueError(f"{path}: truncated point grid")
    return data.reshape(H, W, 3).astype(np.float64)


def to_uint8(gray: np.ndarray) -> np.ndarray:
    return np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame(stem, frame: PointFrame) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(f"{stem}_gray.png", to_uint8(frame.gray))
    cv2.imwrite(f"{stem}_ids.png", frame.ids.astype(np.uint16))
    save_points(f"{stem}_points.bin", frame.points)


def load_frame(stem) -> PointFrame:
    stem = Path(stem)
    gray = cv2.imread(f"{stem}_gray.png", cv2.IMREAD_UNCHANGED)
    ids = cv2.imread(f"{stem}_ids.png", cv2.IMREAD_UNCHANGED)
    if gray is None or ids is None:
        raise FileNotFoundError(f"frame files missing for {stem}")
    points = load_points(f"{stem}_points.bin")
    ids = ids.astype(np.int32)
    points[ids == 0] = np.nan
    return PointFrame(gray.astype(np.float64) / 255.0, points, ids)
