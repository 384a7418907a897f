"""YOLO label files, dataset manifests and train/val splitting."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BOX_TOL = 1e-6


class LabelFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Label:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not isinstance(self.class_id, (int, np.integer)) or self.class_id < 0:
            raise ValueError(f"class id must be a non-negative integer, got {self.class_id!r}")
        if self.w < 0 or self.h < 0:
            raise ValueError("box size must be non-negative")
        if (
            self.cx - self.w / 2 < -BOX_TOL
            or self.cx + self.w / 2 > 1 + BOX_TOL
            or self.cy - self.h / 2 < -BOX_TOL
            or self.cy + self.h / 2 > 1 + BOX_TOL
        ):
            raise ValueError(f"box {self} leaves the unit square")

    @classmethod
    def from_pixel_box(cls, class_id: int, box, width: int, height: int) -> "Label":
        """Normalise a half-open pixel box, clamping it to the image first."""
        x0, y0, x1, y1 = (float(v) for v in box)
        cx0, cy0 = min(max(x0, 0.0), width), min(max(y0, 0.0), height)
        cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
        if (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1):
            logger.info("clamped box %s to image %dx%d", box, width, height)
        return cls(
            int(class_id),
            (cx0 + cx1) / 2 / width,
            (cy0 + cy1) / 2 / height,
            (cx1 - cx0) / width,
            (cy1 - cy0) / height,
        )

    def to_pixel_box(self, width: int, height: int) -> tuple:
        return (
            (self.cx - self.w / 2) * width,
            (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width,
            (self.cy + self.h / 2) * height,
        )


def emit_yolo(labels) -> str:
    return "".join(f"{l.class_id} {l.cx:.6f} {l.cy:.6f} {l.w:.6f} {l.h:.6f}\n" for l in labels)


def parse_yolo(text: str) -> list[Label]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise LabelFormatError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            cls = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise LabelFormatError(lineno, str(exc)) from None
        try:
            out.append(Label(cls, *vals))
        except ValueError as exc:
            raise LabelFormatError(lineno, str(exc)) from None
    return out


def write_labels(path, labels) -> None:
    Path(path).write_text(emit_yolo(labels), encoding="utf-8")


def read_labels(path) -> list[Label]:
    return parse_yolo(Path(path).read_text(encoding="utf-8"))


def config_digest(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: str
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    seed: int = 0
    digest: str = ""

    def __post_init__(self):
        images = [e.image for e in self.entries]
        if len(set(images)) != len(images):
            raise ValueError("manifest image paths must be unique")

    def counts(self) -> dict:
        out = {"train": 0, "val": 0}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def to_text(self) -> str:
        lines = [f"# seed {self.seed}", f"# digest {self.digest}"]
        lines += [f"{e.image} {e.label} {e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        seed, digest, entries = 0, "", []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                if key == "seed":
                    seed = int(val)
                elif key == "digest":
                    digest = val.strip()
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("train", "val"):
                raise ValueError(f"manifest line {lineno}: expected 'image label split'")
            entries.append(ManifestEntry(*parts))
        return cls(entries, seed, digest)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def split_manifest(manifest: DatasetManifest, ratio=(4, 1), seed: int = 0) -> DatasetManifest:
    """Shuffle with ``seed`` and give the first ``n * a / (a + b)`` entries to train."""
    a, b = ratio
    if int(a) != a or int(b) != b or a <= 0 or b <= 0:
        raise ValueError("split ratio must be two positive integers")
    n = len(manifest.entries)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * a / (a + b)))
    entries = [
        replace(manifest.entries[j], split="train" if k < n_train else "val")
        for k, j in enumerate(order)
    ]
    return DatasetManifest(entries, manifest.seed, manifest.digest)
