"""Cap and rack segmentation from registered point frames.

Cap pixels are found in 3D: merged multi-view clouds in the hand frame
give a box mask, the mask selects points in each frame, and the selected
points map straight back to their pixels. The convex hull of those pixels
becomes the cutout's alpha.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np
from scipy import ndimage

from .geomcore import RigidTransform, convex_hull_2d, rasterize_polygon
from .sensor import PointFrame

logger = logging.getLogger(__name__)

MIN_MASK_POINTS = 10
# numerical slack on box faces, far below any physical dimension
MASK_EPS = 1e-6


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationMask:
    """Axis-aligned box in the hand frame.

    ``manual_offset`` widens the box per face, ordered
    ``(-x, +x, -y, +y, -z, +z)``; negative values shrink it.
    """

    min_corner: tuple
    max_corner: tuple
    manual_offset: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        off = tuple(float(v) for v in self.manual_offset)
        if len(off) != 6:
            raise ValueError("manual_offset needs six per-face values")
        object.__setattr__(self, "manual_offset", off)
        object.__setattr__(self, "min_corner", tuple(float(v) for v in self.min_corner))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in self.max_corner))
        if np.any(self.lower >= self.upper):
            raise SegmentationError("annotation mask has zero or negative extent")

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.min_corner) - np.asarray(self.manual_offset[0::2])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.max_corner) + np.asarray(self.manual_offset[1::2])

    @property
    def size(self) -> np.ndarray:
        return self.upper - self.lower

    def with_offset(self, offset) -> "AnnotationMask":
        return AnnotationMask(self.min_corner, self.max_corner, tuple(offset))

    def contains(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        with np.errstate(invalid="ignore"):
            return np.all((P >= self.lower - MASK_EPS) & (P <= self.upper + MASK_EPS), axis=-1)

    def to_dict(self) -> dict:
        return {
            "min_corner": list(self.min_corner),
            "max_corner": list(self.max_corner),
            "manual_offset": list(self.manual_offset),
        }

    @classmethod
    def from_dict(cls, d) -> "AnnotationMask":
        return cls(tuple(d["min_corner"]), tuple(d["max_corner"]),
                   tuple(d.get("manual_offset", (0.0,) * 6)))


@dataclass
class Cutout:
    """Gray patch with a binary alpha, cropped to the alpha's tight bounds.

    ``anchor`` is the half-open pixel box ``(x0, y0, x1, y1)`` the patch came
    from; ``ops`` records augmentations applied after segmentation.
    """

    patch: np.ndarray
    alpha: np.ndarray
    class_id: int = -1
    source: dict = field(default_factory=dict)
    anchor: tuple = (0, 0, 0, 0)
    ops: tuple = ()

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=bool)
        if self.patch.shape[:2] != self.alpha.shape:
            raise ValueError("patch and alpha shapes differ")
        if not self.alpha.any():
            raise SegmentationError("cutout alpha is empty")

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    def is_tight(self) -> bool:
        a = self.alpha
        return bool(a[0].any() and a[-1].any() and a[:, 0].any() and a[:, -1].any())


def tighten(patch: np.ndarray, alpha: np.ndarray):
    """Crop ``patch``/``alpha`` to the bounding box of ``alpha`` and return the offset."""
    rows = np.flatnonzero(alpha.any(axis=1))
    cols = np.flatnonzero(alpha.any(axis=0))
    if len(rows) == 0:
        raise SegmentationError("empty alpha")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return patch[r0:r1, c0:c1].copy(), alpha[r0:r1, c0:c1].copy(), (int(c0), int(r0))


def merge_in_hand_frame(frames, hand_poses, finger_top_height: float,
                        max_radius: float | None = None) -> np.ndarray:
    """Stack the points above the fingertips of every frame, in the hand frame.

    ``max_radius`` optionally drops points farther than that from the hand's
    Z axis, to keep unrelated geometry out of the merged cloud.
    """
    if len(frames) != len(hand_poses):
        raise ValueError(f"{len(frames)} frames but {len(hand_poses)} hand poses")
    clouds = []
    for frame, pose in zip(frames, hand_poses):
        pts = frame.points[frame.valid]
        local = pose.inverse().apply(pts)
        # the fingertip plane itself must not leak in through rounding
        keep = local[:, 2] > finger_top_height + MASK_EPS
        if max_radius is not None:
            keep &= np.hypot(local[:, 0], local[:, 1]) <= max_radius
        clouds.append(local[keep])
    if not clouds:
        return np.zeros((0, 3))
    return np.concatenate(clouds, axis=0)


def fit_annotation_mask(cloud, trim_fraction: float = 0.01, manual_offset=None) -> AnnotationMask:
    """Per-axis quantile box of ``cloud``, trimmed at both ends."""
    P = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must be in [0, 0.5)")
    if len(P) < MIN_MASK_POINTS:
        raise SegmentationError(f"need at least {MIN_MASK_POINTS} points, got {len(P)}")
    lo = np.quantile(P, trim_fraction, axis=0)
    hi = np.quantile(P, 1.0 - trim_fraction, axis=0)
    return AnnotationMask(tuple(lo), tuple(hi), tuple(manual_offset or (0.0,) * 6))


def extract_cap_pixels(frame: PointFrame, hand_pose: RigidTransform, mask: AnnotationMask) -> np.ndarray:
    """Boolean pixel mask of valid points that fall inside ``mask``."""
    out = np.zeros(frame.shape, dtype=bool)
    valid = frame.valid
    local = hand_pose.inverse().apply(frame.points[valid])
    out[valid] = mask.contains(local)
    return out


def hull_crop(frame: PointFrame, pixels, class_id: int = -1, source=None) -> Cutout:
    """Cutout whose alpha is the rasterised convex hull of ``pixels``."""
    pixels = np.asarray(pixels, dtype=bool)
    rr, cc = np.nonzero(pixels)
    if len(rr) == 0:
        raise SegmentationError("no pixels to crop")
    hull = convex_hull_2d(np.column_stack([cc, rr]))
    alpha = rasterize_polygon(hull.vertices, frame.shape)
    patch, alpha, (x0, y0) = tighten(frame.gray, alpha)
    h, w = alpha.shape
    return Cutout(
        patch=patch,
        alpha=alpha,
        class_id=class_id,
        source=dict(source or {}),
        anchor=(x0, y0, x0 + w, y0 + h),
    )


class RackSegment(NamedTuple):
    cutout: Cutout
    polygon: np.ndarray
    other_regions: list


def segment_rack(frame: PointFrame, table_height: float, band: float = 0.12,
                 eps: float = 0.002, up=(0.0, 0.0, 1.0)) -> RackSegment:
    """Largest connected region of points within ``band`` above the table.

    Returns the rack cutout, its image-space hull polygon, and the pixel
    counts of any smaller regions that were discarded.
    """
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    height = np.full(frame.shape, -np.inf)
    valid = frame.valid
    height[valid] = frame.points[valid] @ up - table_height
    region = (height > eps) & (height <= band)
    labels, n = ndimage.label(region, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise SegmentationError("no rack pixels in the height band")
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    others = sorted((int(s) for i, s in enumerate(sizes, start=1) if i != best), reverse=True)
    if others:
        logger.info("segment_rack: kept region of %d px, discarded %s", sizes[best - 1], others)
    pixels = labels == best
    cut = hull_crop(frame, pixels)
    rr, cc = np.nonzero(pixels)
    polygon = convex_hull_2d(np.column_stack([cc, rr])).vertices
    return RackSegment(cut, polygon, others)


def disambiguate_by_height(frame: PointFrame, bbox, class_heights: dict, table_height: float,
                           up=(0.0, 0.0, 1.0)) -> int:
    """Class whose expected height is nearest the 95th-percentile point height.

    ``bbox`` is a half-open pixel box ``(x0, y0, x1, y1)``. Ties go to the
    lower class id.
    """
    x0, y0, x1, y1 = (int(round(v)) for v in bbox)
    sub_valid = frame.valid[y0:y1, x0:x1]
    pts = frame.points[y0:y1, x0:x1][sub_valid]
    if len(pts) == 0:
        raise SegmentationError("no valid points inside the box")
    up = np.asarray(up, dtype=float)
    measured = float(np.percentile(pts @ (up / np.linalg.norm(up)), 95)) - table_height
    return min(sorted(class_heights), key=lambda c: abs(class_heights[c] - measured))


# ---------------------------------------------------------------------------
# storage


def save_cutout(stem, cut: Cutout) -> None:
    """RGBA PNG (gray replicated) plus a JSON sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    g = np.round(np.clip(cut.patch, 0, 1) * 255).astype(np.uint8)
    a = np.where(cut.alpha, 255, 0).astype(np.uint8)
    cv2.imwrite(f"{stem}.png", np.dstack([g, g, g, a]))
    meta = {
        "class_id": int(cut.class_id),
        "source": cut.source,
        "anchor": [int(v) for v in cut.anchor],
    }
    Path(f"{stem}.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")


def load_cutout(stem) -> Cutout:
    stem = Path(stem)
    img = cv2.imread(f"{stem}.png", cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"{stem}.png")
    meta = json.loads(Path(f"{stem}.json").read_text(encoding="utf-8"))
    return Cutout(
        patch=img[..., 0].astype(np.float64) / 255.0,
        alpha=img[..., 3] > 0,
        class_id=int(meta["class_id"]),
        source=meta.get("source", {}),
        anchor=tuple(meta.get("anchor", (0, 0, 0, 0))),
    )
