"""Structured-text scene files (YAML or JSON) shared by planning and rendering.

Layout::

    camera:
      intrinsics: {fx: 1000, fy: 1000, cx: 343.5, cy: 343.5}
      resolution: [688, 688]
      extrinsics: {translation: [0, 0, 0.9], rpy: [180, 0, 0]}
    hand:
      vertices: [[x, y, z], ...]        # hand frame
      finger_top_height: 0.0
    arm_links:
      - box: [0.06, 0.06, 0.3]          # or vertices: [[...], ...]
        pose: {translation: [...], rpy: [...]}
    primitives:
      - {kind: box, dimensions: [1, 1, 0.02], pose: {...}, instance_id: 1, albedo: 0.4}

A pose accepts ``translation`` plus one of ``rpy`` (degrees), ``axis`` +
``angle`` (degrees), ``rotation`` (3x3), or a 4x4 ``matrix``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geomcore import ConvexShape, RigidTransform
from .sensor import CameraModel, ScenePrimitive


def parse_pose(spec) -> RigidTransform:
    if spec is None:
        return RigidTransform()
    if "matrix" in spec:
        return RigidTransform.from_matrix(spec["matrix"])
    t = spec.get("translation", (0, 0, 0))
    if "rotation" in spec:
        return RigidTransform(spec["rotation"], t)
    if "axis" in spec:
        return RigidTransform.from_axis_angle(spec["axis"], spec.get("angle", 0.0), t)
    return RigidTransform.from_rpy(spec.get("rpy", (0, 0, 0)), t)


def dump_pose(pose: RigidTransform) -> dict:
    return {
        "translation": [float(x) for x in pose.translation],
        "rotation": [[float(x) for x in row] for row in pose.rotation],
    }


def parse_camera(spec) -> CameraModel:
    intr = spec["intrinsics"]
    w, h = spec["resolution"]
    return CameraModel(
        fx=float(intr["fx"]),
        fy=float(intr["fy"]),
        cx=float(intr["cx"]),
        cy=float(intr["cy"]),
        width=int(w),
        height=int(h),
        extrinsics=parse_pose(spec.get("extrinsics")),
    )


def dump_camera(cam: CameraModel) -> dict:
    return {
        "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy},
        "resolution": [cam.width, cam.height],
        "extrinsics": dump_pose(cam.extrinsics),
    }


def parse_shape(spec) -> ConvexShape:
    pose = parse_pose(spec.get("pose"))
    if "box" in spec:
        return ConvexShape.box(spec["box"], pose)
    return ConvexShape(np.asarray(spec["vertices"], dtype=float), pose)


def dump_shape(shape: ConvexShape) -> dict:
    return {"vertices": shape.vertices.tolist(), "pose": dump_pose(shape.pose)}


def parse_primitive(spec) -> ScenePrimitive:
    return ScenePrimitive(
        kind=spec["kind"],
        dimensions=tuple(spec.get("dimensions", ())),
        pose=parse_pose(spec.get("pose")),
        instance_id=int(spec.get("instance_id", 1)),
        albedo=float(spec.get("albedo", 0.5)),
        vertices=None if spec.get("vertices") is None else np.asarray(spec["vertices"], dtype=float),
        name=spec.get("name", ""),
    )


def dump_primitive(p: ScenePrimitive) -> dict:
    out = {
        "kind": p.kind,
        "dimensions": list(p.dimensions),
        "pose": dump_pose(p.pose),
        "instance_id": p.instance_id,
        "albedo": p.albedo,
    }
    if p.vertices is not None:
        out["vertices"] = np.asarray(p.vertices).tolist()
    if p.name:
        out["name"] = p.name
    return out


@dataclass
class SceneFile:
    camera: CameraModel
    hand_model: ConvexShape | None = None
    finger_top_height: float = 0.0
    arm_links: list[ConvexShape] = field(default_factory=list)
    primitives: list[ScenePrimitive] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"camera": dump_camera(self.camera)}
        if self.hand_model is not None:
            out["hand"] = {
                "vertices": self.hand_model.vertices.tolist(),
                "finger_top_height": self.finger_top_height,
            }
        out["arm_links"] = [dump_shape(s) for s in self.arm_links]
        out["primitives"] = [dump_primitive(p) for p in self.primitives]
        return out


def parse_scene(doc: dict) -> SceneFile:
    hand = doc.get("hand")
    return SceneFile(
        camera=parse_camera(doc["camera"]),
        hand_model=None if hand is None else ConvexShape(np.asarray(hand["vertices"], dtype=float)),
        finger_top_height=float((hand or {}).get("finger_top_height", 0.0)),
        arm_links=[parse_shape(s) for s in doc.get("arm_links", [])],
        primitives=[parse_primitive(p) for p in doc.get("primitives", [])],
    )


def load_scene(path) -> SceneFile:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "camera" not in doc:
        raise ValueError(f"{path}: scene file needs a 'camera' section")
    return parse_scene(doc)


def save_scene(path, scene: SceneFile) -> None:
    Path(path).write_text(yaml.safe_dump(scene.to_dict(), sort_keys=False), encoding="utf-8")
