"""Simulated robot cell: overhead sensor, table, gripper, tubes and racks.

Stands in for the physical setup so every pipeline stage can run end to
end. All geometry is in meters; the table top is the plane z = 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geomcore import ConvexShape, RigidTransform
from .scenefile import SceneFile
from .sensor import CameraModel, ScenePrimitive

TABLE_ID = 1
CAP_ID = 2
BODY_ID = 3
HAND_ID0 = 4
LINK_ID0 = 10
RACK_ID0 = 20

FINGER_TOP_HEIGHT = 0.0


@dataclass(frozen=True)
class TubeType:
    name: str
    class_id: int
    cap_radius: float
    cap_height: float
    cap_albedo: float
    body_radius: float
    body_length: float
    body_albedo: float = 0.85

    @property
    def height(self) -> float:
        """Overall tube height, used to tell same-cap tubes apart in a rack."""
        return self.body_length + self.cap_height


DEFAULT_TUBES = (
    TubeType("blue", 0, 0.0085, 0.012, 0.30, 0.0065, 0.055),
    TubeType("purple", 1, 0.0075, 0.018, 0.50, 0.0060, 0.085),
    TubeType("white", 2, 0.0080, 0.015, 0.92, 0.0065, 0.095),
    TubeType("green", 3, 0.0090, 0.014, 0.68, 0.0070, 0.090),
)


def default_camera(width: int = 688, height: int = 688, focal: float = 1000.0,
                   mount_height: float = 0.9) -> CameraModel:
    # looking straight down: camera +Z -> world -Z, camera +Y -> world -Y
    ext = RigidTransform(np.diag([1.0, -1.0, -1.0]), (0.0, 0.0, mount_height))
    return CameraModel(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height, ext)


def hand_parts(grip_radius: float = 0.0065):
    """Gripper boxes in the hand frame as ``(size, centre)`` pairs.

    The fingers close along Y around the tube and end at the fingertip
    plane; the palm and wrist extend toward -X.
    """
    fw = 0.008
    return [
        ((0.018, fw, 0.030), (0.0, grip_radius + fw / 2, FINGER_TOP_HEIGHT - 0.015)),
        ((0.018, fw, 0.030), (0.0, -grip_radius - fw / 2, FINGER_TOP_HEIGHT - 0.015)),
        ((0.030, 0.060, 0.030), (-0.024, 0.0, FINGER_TOP_HEIGHT - 0.018)),
        ((0.060, 0.050, 0.030), (-0.069, 0.0, FINGER_TOP_HEIGHT - 0.020)),
    ]


def hand_model(grip_radius: float = 0.0065) -> ConvexShape:
    corners = []
    for size, centre in hand_parts(grip_radius):
        half = np.asarray(size) / 2
        for s in itertools.product((-1, 1), repeat=3):
            corners.append(np.asarray(centre) + half * s)
    return ConvexShape(np.array(corners))


def default_arm_links() -> list[ConvexShape]:
    """Static robot links near the workspace that can block the view."""
    return [
        ConvexShape.box((0.06, 0.06, 0.30), RigidTransform(translation=(-0.26, 0.0, 0.42))),
        ConvexShape.box((0.05, 0.30, 0.05), RigidTransform(translation=(0.0, 0.33, 0.50))),
    ]


def table_primitive() -> ScenePrimitive:
    return ScenePrimitive("box", (1.6, 1.6, 0.02), RigidTransform(translation=(0, 0, -0.01)),
                          TABLE_ID, 0.35, name="table")


def held_tube_primitives(tube: TubeType, pose: RigidTransform) -> list[ScenePrimitive]:
    """Cap sitting on the fingertip plane, body running down through the fingers."""
    cap = RigidTransform(translation=(0, 0, FINGER_TOP_HEIGHT + tube.cap_height / 2))
    body = RigidTransform(translation=(0, 0, FINGER_TOP_HEIGHT - tube.body_length / 2))
    return [
        ScenePrimitive("cylinder", (tube.cap_radius, tube.cap_height), pose @ cap, CAP_ID,
                       tube.cap_albedo, name="cap"),
        ScenePrimitive("cylinder", (tube.body_radius, tube.body_length), pose @ body, BODY_ID,
                       tube.body_albedo, name="body"),
    ]


def hand_primitives(pose: RigidTransform, grip_radius: float = 0.0065) -> list[ScenePrimitive]:
    out = []
    for k, (size, centre) in enumerate(hand_parts(grip_radius)):
        out.append(ScenePrimitive("box", size, pose @ RigidTransform(translation=centre),
                                  HAND_ID0 + k, 0.55, name=f"hand{k}"))
    return out


def link_primitives(links) -> list[ScenePrimitive]:
    return [
        ScenePrimitive("convex", (), link.pose, LINK_ID0 + k, 0.6,
                       vertices=link.vertices, name=f"link{k}")
        for k, link in enumerate(links)
    ]


def observation_scene(tube: TubeType, pose: RigidTransform, links=(), table: bool = True):
    prims = held_tube_primitives(tube, pose) + hand_primitives(pose, tube.body_radius)
    prims += link_primitives(links)
    if table:
        prims.append(table_primitive())
    return prims


def rack_primitives(pose: RigidTransform, first_id: int = RACK_ID0, size=(0.10, 0.20, 0.05),
                    holes=(5, 10), hole_radius=0.0065, albedo=0.78) -> list[ScenePrimitive]:
    """Rack block on the table with dark discs marking the holes."""
    sx, sy, sz = size
    prims = [ScenePrimitive("box", size, pose @ RigidTransform(translation=(0, 0, sz / 2)),
                            first_id, albedo, name="rack")]
    nx, ny = holes
    pitch_x, pitch_y = sx / nx, sy / ny
    k = 1
    for i in range(nx):
        for j in range(ny):
            c = (-sx / 2 + pitch_x * (i + 0.5), -sy / 2 + pitch_y * (j + 0.5), sz + 0.0005)
            prims.append(ScenePrimitive("cylinder", (hole_radius, 0.001),
                                        pose @ RigidTransform(translation=c),
                                        first_id + k, 0.08, name="hole"))
            k += 1
    return prims


def random_rack_pose(rng: np.random.Generator, extent: float = 0.08) -> RigidTransform:
    x, y = rng.uniform(-extent, extent, size=2)
    yaw = rng.uniform(-180.0, 180.0)
    return RigidTransform.from_axis_angle((0, 0, 1), yaw, (x, y, 0.0))


def default_scene_file() -> SceneFile:
    return SceneFile(
        camera=default_camera(),
        hand_model=hand_model(),
        finger_top_height=FINGER_TOP_HEIGHT,
        arm_links=default_arm_links(),
        primitives=[table_primitive()],
    )
