"""Constraint-driven copy-paste synthesis.

Cutouts are pasted in painter's order at random centres inside a rack
polygon. A candidate is kept only if every earlier paste stays below its
class's occlusion threshold once the candidate joins the union of the
pastes that came after it. The pasting number caps the clutter; when the
threshold makes that many pastes impossible the image simply holds fewer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .geomcore import convex_hull_2d, rasterize_polygon
from .segmentation import Cutout, tighten


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (0.9, 1.1)
    scale_p: float = 0.5
    blur_kernel: int = 3
    blur_p: float = 0.5
    brightness_range: tuple = (0.9, 1.1)
    brightness_p: float = 0.5
    contrast_range: tuple = (0.9, 1.1)
    contrast_p: float = 0.5

    def __post_init__(self):
        for name in ("scale_range", "brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi or lo <= 0:
                raise ValueError(f"{name} must be positive and contain 1.0")
        for name in ("scale_p", "blur_p", "brightness_p", "contrast_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur kernel must be a positive odd size")


@dataclass(frozen=True)
class SynthConfig:
    T: int = 30
    t_per_class: dict = field(default_factory=lambda: {0: 0.4})
    t_default: float = 0.15
    max_attempts_per_paste: int = 100
    background_swap_p: float = 0.5
    canvas: tuple = (1376, 1376)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("pasting number T must be at least 1")
        for t in list(self.t_per_class.values()) + [self.t_default]:
            if not 0.0 <= t <= 1.0:
                raise ValueError("occlusion thresholds must be in [0, 1]")
        if self.max_attempts_per_paste < 1:
            raise ValueError("max_attempts_per_paste must be positive")
        if not 0.0 <= self.background_swap_p <= 1.0:
            raise ValueError("background_swap_p must be a probability")
        if min(self.canvas) <= 0:
            raise ValueError("canvas must be positive")

    def threshold(self, class_id: int) -> float:
        return self.t_per_class.get(class_id, self.t_default)


@dataclass
class RackBackground:
    """Canvas-sized rack picture and the polygon pastes are centred in."""

    image: np.ndarray
    polygon: np.ndarray
    source: dict = field(default_factory=dict)


@dataclass
class PasteInstance:
    """One accepted paste; ``mask`` is tight and sits at ``(x0, y0)`` on the canvas."""

    order: int
    class_id: int
    center: tuple
    scale: float
    x0: int
    y0: int
    mask: np.ndarray
    source: dict = field(default_factory=dict)

    @property
    def bbox(self) -> tuple:
        h, w = self.mask.shape
        return (self.x0, self.y0, self.x0 + w, self.y0 + h)

    def full_mask(self, canvas) -> np.ndarray:
        W, H = canvas
        out = np.zeros((H, W), dtype=bool)
        x0, y0, x1, y1 = self.bbox
        out[y0:y1, x0:x1] = self.mask
        return out


@dataclass
class LabeledImage:
    image: np.ndarray
    instances: list
    background_swapped: bool = False
    attempts: int = 0

    @property
    def labels(self) -> list:
        return [(inst.class_id, inst.bbox) for inst in self.instances]


# ---------------------------------------------------------------------------
# photometric and geometric augmentation


def rescale(cut: Cutout, factor: float) -> Cutout:
    h, w = cut.alpha.shape
    nw, nh = max(1, int(round(w * factor))), max(1, int(round(h * factor)))
    patch = cv2.resize(cut.patch, (nw, nh), interpolation=cv2.INTER_LINEAR)
    alpha = cv2.resize(cut.alpha.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST) > 0
    if not alpha.any():
        raise SynthesisError("cutout too small to rescale")
    patch, alpha, _ = tighten(patch, alpha)
    return Cutout(patch, alpha, cut.class_id, cut.source, cut.anchor, cut.ops + (("scale", factor),))


def blur(cut: Cutout, kernel: int = 3) -> Cutout:
    patch = cv2.blur(cut.patch, (kernel, kernel), borderType=cv2.BORDER_REPLICATE)
    return Cutout(patch, cut.alpha, cut.class_id, cut.source, cut.anchor, cut.ops + (("blur", kernel),))


def adjust_brightness(cut: Cutout, factor: float) -> Cutout:
    patch = np.clip(cut.patch * factor, 0.0, 1.0)
    return Cutout(patch, cut.alpha, cut.class_id, cut.source, cut.anchor,
                  cut.ops + (("brightness", factor),))


def adjust_contrast(cut: Cutout, factor: float) -> Cutout:
    """Stretch about the mean gray level of the alpha region."""
    mean = float(cut.patch[cut.alpha].mean())
    patch = np.clip((cut.patch - mean) * factor + mean, 0.0, 1.0)
    return Cutout(patch, cut.alpha, cut.class_id, cut.source, cut.anchor,
                  cut.ops + (("contrast", factor),))


def augment_cutout(cut: Cutout, cfg: AugmentConfig, rng: np.random.Generator) -> Cutout:
    if rng.random() < cfg.scale_p:
        cut = rescale(cut, rng.uniform(*cfg.scale_range))
    if rng.random() < cfg.blur_p:
        cut = blur(cut, cfg.blur_kernel)
    if rng.random() < cfg.brightness_p:
        cut = adjust_brightness(cut, rng.uniform(*cfg.brightness_range))
    if rng.random() < cfg.contrast_p:
        cut = adjust_contrast(cut, rng.uniform(*cfg.contrast_range))
    return cut


# ---------------------------------------------------------------------------
# occlusion constraint


def occlusion_fraction(a: np.ndarray, later_union: np.ndarray) -> float:
    """Share of ``a``'s pixels that ``later_union`` covers."""
    a = np.asarray(a, dtype=bool)
    n = int(a.sum())
    if n == 0:
        raise ValueError("occlusion fraction of an empty mask")
    return int((a & np.asarray(later_union, dtype=bool)).sum()) / n


def _within_threshold(covered: int, area: int, t: float) -> bool:
    # zero overlap is always allowed, so t = 0 means "no overlap" not "nothing"
    return covered == 0 or covered / area < t


class _PasteState:
    """Per-image bookkeeping: each instance's pixels already covered by later pastes."""

    def __init__(self):
        self.instances: list[PasteInstance] = []
        self.covered: list[np.ndarray] = []
        self.covered_n: list[int] = []
        self.area: list[int] = []

    def _overlap(self, inst: PasteInstance, x0, y0, mask):
        h, w = mask.shape
        ax0, ay0, ax1, ay1 = inst.bbox
        ox0, oy0 = max(ax0, x0), max(ay0, y0)
        ox1, oy1 = min(ax1, x0 + w), min(ay1, y0 + h)
        if ox0 >= ox1 or oy0 >= oy1:
            return None
        a_sl = (slice(oy0 - ay0, oy1 - ay0), slice(ox0 - ax0, ox1 - ax0))
        c_sl = (slice(oy0 - y0, oy1 - y0), slice(ox0 - x0, ox1 - x0))
        return a_sl, c_sl

    def admits(self, x0, y0, mask, cfg: SynthConfig) -> bool:
        for i, inst in enumerate(self.instances):
            ov = self._overlap(inst, x0, y0, mask)
            if ov is None:
                continue
            a_sl, c_sl = ov
            fresh = inst.mask[a_sl] & mask[c_sl] & ~self.covered[i][a_sl]
            n = self.covered_n[i] + int(fresh.sum())
            if not _within_threshold(n, self.area[i], cfg.threshold(inst.class_id)):
                return False
        return True

    def add(self, inst: PasteInstance) -> None:
        for i, prev in enumerate(self.instances):
            ov = self._overlap(prev, inst.x0, inst.y0, inst.mask)
            if ov is None:
                continue
            a_sl, c_sl = ov
            fresh = prev.mask[a_sl] & inst.mask[c_sl] & ~self.covered[i][a_sl]
            self.covered[i][a_sl] |= fresh
            self.covered_n[i] += int(fresh.sum())
        self.instances.append(inst)
        self.covered.append(np.zeros_like(inst.mask))
        self.covered_n.append(0)
        self.area.append(int(inst.mask.sum()))


# ---------------------------------------------------------------------------
# sampling helpers


def sample_in_polygon(polygon, rng: np.random.Generator) -> np.ndarray:
    """Uniform point inside a convex polygon via area-weighted fan triangles."""
    V = np.asarray(polygon, dtype=float)
    if len(V) < 3:
        raise SynthesisError("paste polygon has zero area")
    a, b, c = V[0], V[1:-1], V[2:]
    areas = 0.5 * np.abs((b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (b[:, 1] - a[1]) * (c[:, 0] - a[0]))
    total = areas.sum()
    if total <= 0:
        raise SynthesisError("paste polygon has zero area")
    k = rng.choice(len(areas), p=areas / total)
    r1, r2 = rng.random(2)
    s = np.sqrt(r1)
    return (1 - s) * a + s * (1 - r2) * b[k] + s * r2 * c[k]


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = cv2.cvtColor(img[..., :3].astype(np.float32), cv2.COLOR_BGR2GRAY)
    return img.astype(np.float64)


def swap_background(image, polygon, bg_pool, p: float, rng: np.random.Generator):
    """Replace everything outside ``polygon`` with a random pool image.

    Returns the new image and the pool index used (``None`` when kept).
    """
    if p > 0 and not bg_pool:
        raise SynthesisError("background swap requested with an empty pool")
    if rng.random() >= p:
        return image.copy(), None
    k = int(rng.integers(len(bg_pool)))
    H, W = image.shape[:2]
    bg = cv2.resize(_to_gray(bg_pool[k]), (W, H), interpolation=cv2.INTER_AREA)
    inside = rasterize_polygon(polygon, (H, W))
    out = np.where(inside, image, bg)
    return out, k


def prepare_background(gray: np.ndarray, polygon, canvas, source=None) -> RackBackground:
    """Resize a rack picture and its polygon onto the canvas."""
    W, H = canvas
    h, w = gray.shape
    sx, sy = W / w, H / h
    img = cv2.resize(gray.astype(np.float64), (W, H), interpolation=cv2.INTER_LINEAR)
    P = np.asarray(polygon, dtype=float)
    P = np.column_stack([(P[:, 0] + 0.5) * sx - 0.5, (P[:, 1] + 0.5) * sy - 0.5])
    return RackBackground(img, convex_hull_2d(P).vertices, dict(source or {}))


def synthesize_image(background: RackBackground, pool, cfg: SynthConfig, aug: AugmentConfig,
                     bg_pool, rng: np.random.Generator) -> LabeledImage:
    if not pool:
        raise SynthesisError("cutout pool is empty")
    W, H = cfg.canvas
    if background.image.shape[:2] != (H, W):
        raise SynthesisError("background must already match the canvas size")
    poly = np.asarray(background.polygon, dtype=float)
    if len(poly) < 3 or convex_hull_2d(poly).area() <= 0:
        raise SynthesisError("paste polygon has zero area")

    canvas, swapped = swap_background(background.image, poly, bg_pool, cfg.background_swap_p, rng)
    canvas = np.array(canvas, dtype=np.float64)
    state = _PasteState()
    attempts = 0
    while len(state.instances) < cfg.T:
        placed = False
        for _ in range(cfg.max_attempts_per_paste):
            attempts += 1
            src = pool[int(rng.integers(len(pool)))]
            try:
                cut = augment_cutout(src, aug, rng)
            except SynthesisError:
                continue
            cx, cy = sample_in_polygon(poly, rng)
            h, w = cut.alpha.shape
            x0 = int(round(cx - w / 2.0))
            y0 = int(round(cy - h / 2.0))
            # clip to the canvas
            cx0, cy0 = max(x0, 0), max(y0, 0)
            cx1, cy1 = min(x0 + w, W), min(y0 + h, H)
            if cx0 >= cx1 or cy0 >= cy1:
                continue
            alpha = cut.alpha[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
            if not alpha.any():
                continue
            patch = cut.patch[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
            patch, alpha, (dx, dy) = tighten(patch, alpha)
            mx, my = cx0 + dx, cy0 + dy
            if not state.admits(mx, my, alpha, cfg):
                continue
            scale = next((v for k, v in reversed(cut.ops) if k == "scale"), 1.0)
            inst = PasteInstance(
                order=len(state.instances),
                class_id=cut.class_id,
                center=(float(cx), float(cy)),
                scale=float(scale),
                x0=mx,
                y0=my,
                mask=alpha,
                source={**cut.source, "ops": [list(op) for op in cut.ops]},
            )
            region = canvas[my : my + alpha.shape[0], mx : mx + alpha.shape[1]]
            region[alpha] = patch[alpha]
            state.add(inst)
            placed = True
            break
        if not placed:
            break
    return LabeledImage(canvas, state.instances, swapped is not None, attempts)


def resize_cutout(cut: Cutout, sx: float, sy: float) -> Cutout:
    """Bring a cutout from frame resolution to canvas resolution.

    Unlike :func:`rescale` this is not an augmentation and is not recorded
    in ``ops``.
    """
    if abs(sx - 1.0) < 1e-12 and abs(sy - 1.0) < 1e-12:
        return cut
    h, w = cut.alpha.shape
    nw, nh = max(1, int(round(w * sx))), max(1, int(round(h * sy)))
    patch = cv2.resize(cut.patch, (nw, nh), interpolation=cv2.INTER_LINEAR)
    alpha = cv2.resize(cut.alpha.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST) > 0
    if not alpha.any():
        alpha[nh // 2, nw // 2] = True
    patch, alpha, _ = tighten(patch, alpha)
    return Cutout(patch, alpha, cut.class_id, cut.source, cut.anchor, cut.ops)


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for image ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])
