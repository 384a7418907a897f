"""In-hand observation pose planning.

Positions come from a regular grid over the workspace, tube directions
from icosphere vertices near the table normal, and the roll of the hand
about the tube axis from an even SO(2) discretisation. A grasp is usable
when the hull spanned by the camera origin and the posed hand model stays
clear of every arm link.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geomcore import (
    ConvexShape,
    RigidTransform,
    build_icosphere,
    contains_point,
    convex_collide,
    rotation_about_axis,
    rotation_from_z,
)


@dataclass(frozen=True)
class ViewPlanConfig:
    theta_max: float = 60.0
    omega: float = 60.0
    icosphere_level: int = 4
    workspace_min: tuple = (-0.1, -0.1, 0.25)
    workspace_max: tuple = (0.1, 0.1, 0.25)
    granularity: float = 0.1
    surface_normal: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not 0 < self.theta_max <= 180:
            raise ValueError("theta_max must be in (0, 180]")
        if not 0 < self.omega <= 360:
            raise ValueError("omega must be in (0, 360]")
        if self.granularity <= 0:
            raise ValueError("granularity must be positive")
        lo, hi = np.asarray(self.workspace_min, float), np.asarray(self.workspace_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
            raise ValueError("workspace must be an axis-aligned box with min <= max")
        if np.linalg.norm(self.surface_normal) == 0:
            raise ValueError("surface normal must be non-zero")


@dataclass(frozen=True)
class ObservationPose:
    position: tuple
    tube_axis: tuple
    grasp_angle: float
    feasible: bool

    def hand_pose(self) -> RigidTransform:
        return hand_pose(self.position, self.tube_axis, self.grasp_angle)

    def to_record(self) -> str:
        x, y, z = self.position
        ax, ay, az = self.tube_axis
        return (
            f"{x:.6f} {y:.6f} {z:.6f} {ax:.9f} {ay:.9f} {az:.9f} "
            f"{self.grasp_angle:.6f} {int(self.feasible)}"
        )

    @classmethod
    def from_record(cls, line: str) -> "ObservationPose":
        f = line.split()
        if len(f) != 8:
            raise ValueError(f"pose record needs 8 fields, got {len(f)}")
        return cls(
            position=tuple(float(v) for v in f[0:3]),
            tube_axis=tuple(float(v) for v in f[3:6]),
            grasp_angle=float(f[6]),
            feasible=bool(int(f[7])),
        )


@dataclass
class SceneGeometry:
    camera_origin: np.ndarray
    hand_model: ConvexShape
    arm_links: list[ConvexShape] = field(default_factory=list)

    def __post_init__(self):
        self.camera_origin = np.asarray(self.camera_origin, dtype=float).reshape(3)
        for i, link in enumerate(self.arm_links):
            if contains_point(link, self.camera_origin):
                raise ValueError(f"camera origin lies inside arm link {i}")


def hand_pose(position, tube_axis, grasp_angle: float) -> RigidTransform:
    """Hand frame: origin at the finger centre, +Z along the held tube."""
    R = rotation_from_z(tube_axis) @ rotation_about_axis((0, 0, 1), math.radians(grasp_angle))
    return RigidTransform(R, position)


def _axis_count(lo: float, hi: float, step: float) -> int:
    return int(math.floor((hi - lo) / step + 1e-9)) + 1


def sample_positions(config: ViewPlanConfig, camera=None) -> np.ndarray:
    """Grid points in x-major order, optionally kept only if ``camera`` sees them.

    An axis shorter than one grid cell contributes its midpoint.
    """
    lo = np.asarray(config.workspace_min, dtype=float)
    hi = np.asarray(config.workspace_max, dtype=float)
    g = config.granularity
    axes = []
    for a, b in zip(lo, hi):
        if b - a < g - 1e-12:
            axes.append(np.array([(a + b) / 2.0]))
        else:
            axes.append(a + g * np.arange(_axis_count(a, b, g)))
    xs, ys, zs = axes
    pts = np.array([(x, y, z) for x in xs for y in ys for z in zs], dtype=float)
    if camera is not None:
        pts = pts[camera.in_frustum(pts)]
    return pts


def _angle_deg(vectors: np.ndarray, normal) -> np.ndarray:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    dots = vectors @ n
    crosses = np.linalg.norm(np.cross(vectors, n), axis=1)
    return np.degrees(np.arctan2(crosses, dots))


def sample_rotations(config: ViewPlanConfig) -> np.ndarray:
    """Icosphere directions strictly within ``theta_max`` of the normal."""
    verts = build_icosphere(config.icosphere_level).vertices
    if config.theta_max >= 180:
        return verts.copy()
    keep = _angle_deg(verts, config.surface_normal) < config.theta_max
    return verts[keep]


def enumerate_grasps(omega: float) -> list[float]:
    if not 0 < omega <= 360:
        raise ValueError(f"grasp interval must be in (0, 360], got {omega}")
    n = math.ceil(360.0 / omega - 1e-9)
    return [k * omega for k in range(n)]


def visual_polyhedron(scene: SceneGeometry, pose: RigidTransform) -> ConvexShape:
    """Hull of the camera origin and the hand model placed at ``pose``."""
    hand = scene.hand_model.placed(pose).world_vertices
    return ConvexShape(np.vstack([scene.camera_origin[None, :], hand]))


def grasp_is_clear(scene: SceneGeometry, pose: RigidTransform) -> bool:
    if not scene.arm_links:
        return True
    poly = visual_polyhedron(scene, pose)
    return not any(convex_collide(poly, link) for link in scene.arm_links)


def _plan_one(scene: SceneGeometry, position, axis, grasps: list[float]) -> ObservationPose:
    pos = tuple(float(v) for v in position)
    ax = tuple(float(v) for v in axis)
    for g in grasps:
        if grasp_is_clear(scene, hand_pose(pos, ax, g)):
            return ObservationPose(pos, ax, float(g), True)
    return ObservationPose(pos, ax, float(grasps[0]), False)


def plan_observations(config: ViewPlanConfig, scene: SceneGeometry, camera=None,
                      workers: int = 1) -> list[ObservationPose]:
    """All position x direction pairs with their lowest clear grasp angle.

    Pairs without any clear grasp are kept with ``feasible=False`` so the
    output length is always ``positions * directions``.
    """
    positions = sample_positions(config, camera)
    rotations = sample_rotations(config)
    grasps = enumerate_grasps(config.omega)
    jobs = [(p, r) for p in positions for r in rotations]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda pr: _plan_one(scene, pr[0], pr[1], grasps), jobs))
    return [_plan_one(scene, p, r, grasps) for p, r in jobs]


def write_poses(path, poses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z axis_x axis_y axis_z grasp_deg feasible\n")
        for p in poses:
            fh.write(p.to_record() + "\n")


def read_poses(path) -> list[ObservationPose]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(ObservationPose.from_record(line))
    return out
