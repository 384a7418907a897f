"""Geometry primitives shared across the pipeline.

Icosphere construction, 2D convex hulls and their rasterization, rigid
transforms, and a GJK-style collision test for convex point sets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
GJK_TOL = 1e-9
GJK_MAX_ITER = 64


def _as_vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(3)
    return arr


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix for a right-handed turn about ``axis``."""
    axis = _as_vec3(axis)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = axis / n
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def rotation_from_z(direction) -> np.ndarray:
    """Smallest rotation taking +Z onto ``direction``."""
    d = _as_vec3(direction)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, d))
    if c > 1.0 - 1e-15:
        return np.eye(3)
    if c < -1.0 + 1e-15:
        # antipodal: any half turn about a horizontal axis
        return np.diag([1.0, -1.0, -1.0])
    axis = np.cross(z, d)
    angle = np.arctan2(np.linalg.norm(axis), c)
    return rotation_about_axis(axis, angle)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float, translation=(0, 0, 0)) -> "RigidTransform":
        return cls(rotation_about_axis(axis, np.radians(angle_deg)), translation)

    @classmethod
    def from_rpy(cls, rpy_deg, translation=(0, 0, 0)) -> "RigidTransform":
        """Fixed-axis roll/pitch/yaw in degrees, applied X then Y then Z."""
        r, p, y = np.radians(np.asarray(rpy_deg, dtype=float))
        R = (
            rotation_about_axis((0, 0, 1), y)
            @ rotation_about_axis((0, 1, 0), p)
            @ rotation_about_axis((1, 0, 0), r)
        )
        return cls(R, translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform a single point ``(3,)`` or an array of points ``(..., 3)``."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T


# ---------------------------------------------------------------------------
# icosphere


@dataclass(frozen=True)
class Icosphere:
    level: int
    vertices: np.ndarray
    faces: np.ndarray

    @staticmethod
    def vertex_count(level: int) -> int:
        return 10 * 4 ** (level - 1) + 2


def _base_icosahedron():
    # poles on +/-Z, two rings of five offset by 36 degrees
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        a = 2.0 * np.pi * k / 5.0
        verts.append((r * np.cos(a), r * np.sin(a), z))
    for k in range(5):
        a = 2.0 * np.pi * k / 5.0 + np.pi / 5.0
        verts.append((r * np.cos(a), r * np.sin(a), -z))
    verts.append((0.0, 0.0, -1.0))

    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces.append((0, u0, u1))
        faces.append((u0, l0, u1))
        faces.append((u1, l0, l1))
        faces.append((11, l1, l0))
    return np.array(verts, dtype=float), faces


def build_icosphere(level: int) -> Icosphere:
    """Icosphere where level ``k`` means ``k - 1`` midpoint subdivisions.

    Level 1 is the bare icosahedron (12 vertices); level 4 has 642.
    Vertex order is deterministic: base vertices first, then new midpoints
    in the order their edges are first met while walking the faces.
    """
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool) or level < 1:
        raise ValueError(f"icosphere level must be a positive integer, got {level!r}")

    base, faces = _base_icosahedron()
    verts = [v for v in base]
    for _ in range(level - 1):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = cache.get(key)
            if idx is None:
                m = (verts[i] + verts[j]) / 2.0
                verts.append(m / np.linalg.norm(m))
                idx = len(verts) - 1
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = new_faces

    V = np.array(verts, dtype=float)
    F = np.array(faces, dtype=np.int64)
    V.setflags(write=False)
    F.setflags(write=False)
    return Icosphere(level=int(level), vertices=V, faces=F)


# ---------------------------------------------------------------------------
# 2D hulls


@dataclass(frozen=True)
class Hull2D:
    """Counter-clockwise hull polygon; fewer than 3 vertices means degenerate."""

    vertices: np.ndarray

    @property
    def degenerate(self) -> bool:
        return len(self.vertices) < 3

    def __len__(self):
        return len(self.vertices)

    def area(self) -> float:
        if self.degenerate:
            return 0.0
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> Hull2D:
    """Monotone-chain hull. Collinear points are dropped from the boundary."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("convex hull of an empty point set")
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) <= 2:
        return Hull2D(np.array(uniq, dtype=float))

    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        # all collinear: the two extreme points
        hull = [uniq[0], uniq[-1]]
    return Hull2D(np.array(hull, dtype=float))


def polygon_contains(vertices, points, tol: float = 1e-9) -> np.ndarray:
    """Inclusive membership of ``points`` (N, 2) in a CCW convex polygon.

    Degenerate polygons (a point or a segment) contain exactly the points
    lying on them, within ``tol``.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 2)
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(V) == 1:
        return np.all(np.abs(P - V[0]) <= tol, axis=1)
    if len(V) == 2:
        a, b = V
        ab = b - a
        ap = P - a
        cross = ab[0] * ap[:, 1] - ab[1] * ap[:, 0]
        s = ap @ ab / float(ab @ ab)
        seg_len = float(np.linalg.norm(ab))
        return (np.abs(cross) <= tol * seg_len) & (s >= -tol) & (s <= 1 + tol)
    inside = np.ones(len(P), dtype=bool)
    for i in range(len(V)):
        a, b = V[i], V[(i + 1) % len(V)]
        edge = b - a
        c = edge[0] * (P[:, 1] - a[1]) - edge[1] * (P[:, 0] - a[0])
        inside &= c >= -tol * np.linalg.norm(edge)
    return inside


def rasterize_polygon(vertices, shape, offset=(0, 0)) -> np.ndarray:
    """Boolean mask of pixels whose centres lie inside or on the polygon.

    Pixel ``(row, col)`` has its centre at ``x = col + offset[0]``,
    ``y = row + offset[1]``; ``shape`` is ``(rows, cols)``.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 2)
    rows, cols = shape
    mask = np.zeros((rows, cols), dtype=bool)
    if len(V) == 0 or rows == 0 or cols == 0:
        return mask
    ox, oy = offset
    x0 = max(int(np.floor(V[:, 0].min() - ox)), 0)
    x1 = min(int(np.ceil(V[:, 0].max() - ox)), cols - 1)
    y0 = max(int(np.floor(V[:, 1].min() - oy)), 0)
    y1 = min(int(np.ceil(V[:, 1].max() - oy)), rows - 1)
    if x1 < x0 or y1 < y0:
        return mask
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    pts = np.column_stack([xx.ravel() + ox, yy.ravel() + oy])
    inside = polygon_contains(V, pts).reshape(yy.shape)
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return mask


# ---------------------------------------------------------------------------
# convex shapes and collision


@dataclass(frozen=True)
class ConvexShape:
    """Convex hull of ``vertices`` (local frame) placed by ``pose``."""

    vertices: np.ndarray
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(V) == 0:
            raise ValueError("convex shape needs at least one vertex")
        V.setflags(write=False)
        object.__setattr__(self, "vertices", V)

    @classmethod
    def box(cls, size, pose: RigidTransform | None = None) -> "ConvexShape":
        hx, hy, hz = np.asarray(size, dtype=float) / 2.0
        corners = np.array(list(itertools.product((-hx, hx), (-hy, hy), (-hz, hz))))
        return cls(corners, pose or RigidTransform())

    @property
    def world_vertices(self) -> np.ndarray:
        return self.pose.apply(self.vertices)

    def placed(self, pose: RigidTransform) -> "ConvexShape":
        """Same shape with ``pose`` composed in front of the current pose."""
        return ConvexShape(self.vertices, pose @ self.pose)

    def is_flat(self, tol: float = 1e-9) -> bool:
        V = self.vertices - self.vertices.mean(axis=0)
        if len(V) < 4:
            return True
        s = np.linalg.svd(V, compute_uv=False)
        return bool(s[2] <= tol * max(s[0], 1.0))


def _support(V: np.ndarray, d: np.ndarray) -> np.ndarray:
    return V[int(np.argmax(V @ d))]


def _closest_on_simplex(S: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Closest point to the origin of conv(S), |S| <= 4, and its support set.

    Brute force over the (at most 15) faces of the simplex: each face's
    affine projection is accepted when its barycentric weights are all
    non-negative. Robust to degenerate (flat or collinear) simplices.
    """
    best = None
    n = len(S)
    for k in range(n, 0, -1):
        for idx in itertools.combinations(range(n), k):
            P = np.array([S[i] for i in idx])
            if k == 1:
                lam = np.array([1.0])
            else:
                E = (P[1:] - P[0]).T
                sv = np.linalg.svd(E, compute_uv=False)
                if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
                    # flat face: its closest point lies on a sub-face
                    continue
                mu, *_ = np.linalg.lstsq(E, -P[0], rcond=None)
                lam = np.concatenate([[1.0 - mu.sum()], mu])
                if np.any(lam < -1e-12):
                    continue
            point = lam @ P
            dist = float(point @ point)
            keep = [S[i] for i, w in zip(idx, lam) if w > 1e-12] or [S[idx[0]]]
            if best is None or dist < best[0] - 1e-18 or (
                abs(dist - best[0]) <= 1e-18 and len(keep) < len(best[2])
            ):
                best = (dist, point, keep)
    return best[1], best[2]


def convex_collide(a: ConvexShape, b: ConvexShape, tol: float = GJK_TOL,
                   max_iter: int = GJK_MAX_ITER) -> bool:
    """True when the posed hulls of ``a`` and ``b`` share a point.

    GJK distance iteration on the Minkowski difference ``A - B``. The test
    only answers ``False`` once it has a separating direction certifying a
    gap larger than ``tol``; touching or unresolved pairs count as colliding.
    """
    A = a.world_vertices
    B = b.world_vertices

    def support(d):
        return _support(A, d) - _support(B, -d)

    d = A.mean(axis=0) - B.mean(axis=0)
    if float(d @ d) < tol * tol:
        d = np.array([1.0, 0.0, 0.0])
    v = support(d)
    simplex = [v]
    for _ in range(max_iter):
        vv = float(v @ v)
        if vv <= tol * tol:
            return True
        w = support(-v)
        vw = float(v @ w)
        # every point x of A - B satisfies v.x >= v.w
        if vw > tol * np.sqrt(vv):
            return False
        if vv - vw <= 1e-12 * vv + 1e-30:
            # no progress; the gap lower bound is already below tol
            return True
        simplex.append(w)
        v, simplex = _closest_on_simplex(simplex)
        if len(simplex) == 4:
            return True
    return True


def point_shape(p) -> ConvexShape:
    return ConvexShape(np.asarray(p, dtype=float).reshape(1, 3))


def contains_point(shape: ConvexShape, p, tol: float = GJK_TOL) -> bool:
    return convex_collide(shape, point_shape(p), tol=tol)


def convex_hull_shape(points) -> ConvexShape:
    """ConvexShape whose vertex set is ``points`` in the world frame."""
    return ConvexShape(np.asarray(points, dtype=float).reshape(-1, 3))
