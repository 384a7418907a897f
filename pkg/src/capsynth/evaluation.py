"""Per-class AP and mAP at a single IoU threshold.

Matching is greedy by descending confidence, one-to-one, within an image
and class. AP uses all-point interpolation: the precision envelope is made
non-increasing, then integrated over recall.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    if ax1 <= ax0 or ay1 <= ay0 or bx1 <= bx0 or by1 <= by0:
        raise ValueError("iou of a degenerate box")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _rank(dets) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match_detections(dets, gts, iou_threshold: float = 0.5):
    """Greedy one-to-one matching.

    ``gts`` are ``Detection``-like records (confidence ignored). Returns
    ``(tp, matched)``: a TP flag per detection in input order and a matched
    flag per ground truth. A match needs IoU strictly above the threshold.
    """
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    by_key: dict = {}
    for j, g in enumerate(gts):
        by_key.setdefault((g.image_id, g.class_id), []).append(j)
    for i in _rank(dets):
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j in by_key.get((d.image_id, d.class_id), ()):
            if matched[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o > best_iou:
                best, best_iou = j, o
        if best is not None:
            matched[best] = True
            tp[i] = True
    return tp, matched


def average_precision(tp, confidences, n_gt: int) -> float:
    tp = np.asarray(tp, dtype=bool)
    conf = np.asarray(confidences, dtype=float)
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if len(tp) == 0:
        return 0.0
    if n_gt == 0:
        logger.warning("detections without any ground truth: AP set to 0")
        return 0.0
    order = np.argsort(-conf, kind="stable")
    hits = tp[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(~hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    ap: dict
    tp: dict
    fp: dict
    fn: dict
    iou_threshold: float = 0.5
    flagged: list = field(default_factory=list)

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    def to_table(self, names=None) -> str:
        names = names or {}
        rows = [f"{'class':<12}{'AP':>8}{'TP':>7}{'FP':>7}{'FN':>7}"]
        for c in sorted(self.ap):
            rows.append(
                f"{names.get(c, str(c)):<12}{self.ap[c]:>8.4f}{self.tp[c]:>7d}{self.fp[c]:>7d}{self.fn[c]:>7d}"
            )
        rows.append(f"{'mAP@' + format(self.iou_threshold, 'g'):<12}{self.mAP:>8.4f}")
        return "\n".join(rows) + "\n"

    def to_keyvalue(self) -> str:
        lines = [f"iou_threshold={self.iou_threshold:g}", f"mAP={self.mAP:.6f}"]
        for c in sorted(self.ap):
            lines.append(f"ap.{c}={self.ap[c]:.6f}")
            lines.append(f"tp.{c}={self.tp[c]}")
            lines.append(f"fp.{c}={self.fp[c]}")
            lines.append(f"fn.{c}={self.fn[c]}")
        return "\n".join(lines) + "\n"


def evaluate(dets, gts, iou_threshold: float = 0.5) -> EvalReport:
    classes = sorted({d.class_id for d in dets} | {g.class_id for g in gts})
    report = EvalReport({}, {}, {}, {}, iou_threshold)
    for c in classes:
        cd = [d for d in dets if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        tp, matched = match_detections(cd, cg, iou_threshold)
        if not cg:
            report.flagged.append(c)
        report.ap[c] = average_precision(tp, [d.confidence for d in cd], len(cg))
        report.tp[c] = int(sum(tp))
        report.fp[c] = len(cd) - int(sum(tp))
        report.fn[c] = len(cg) - int(sum(matched))
    return report


def read_detections(path) -> list[Detection]:
    """Lines of ``image_id class confidence x_min y_min x_max y_max``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        f = line.split()
        if not f or f[0].startswith("#"):
            continue
        if len(f) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(f)}")
        out.append(Detection(f[0], int(f[1]), tuple(float(v) for v in f[3:7]), float(f[2])))
    return out


def write_detections(path, dets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            x0, y0, x1, y1 = d.box
            fh.write(f"{d.image_id} {d.class_id} {d.confidence:.6f} {x0:.3f} {y0:.3f} {x1:.3f} {y1:.3f}\n")
