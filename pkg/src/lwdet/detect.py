"""Decoding raw head tensors into pixel-space detections, IoU and NMS."""

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import tensor as T
from .tensor import ShapeError

DEFAULT_CONF = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box {self}")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def fixed(x, digits=6):
    """Decimal text rounded half-up from the shortest repr (0.1953125 -> 0.195313)."""
    return str(Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


def iou(a, b):
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def decode(raw, anchors, stride, conf_thresh=DEFAULT_CONF, image_size=None, batch_index=0):
    """Decode one head level for one batch element.

    ``raw`` is (n, 3*(5+nc), g_h, g_w) with anchor-major channels. Boxes are
    clipped to ``image_size`` (w, h), which defaults to the grid extent.
    """
    raw = T.as_tensor(raw, "raw")
    n, ch, gh, gw = raw.shape
    na = len(anchors)
    if ch % na or ch // na < 6:
        raise ShapeError(f"head has {ch} channels, not {na} x (5 + nc) for nc >= 1")
    no = ch // na
    if image_size is None:
        image_size = (gw * stride, gh * stride)
    img_w, img_h = image_size
    p = T.sigmoid(raw[batch_index].reshape(na, no, gh, gw)).astype(np.float64)
    cls = p[:, 5:]
    best = cls.argmax(axis=1)
    score = p[:, 4] * np.take_along_axis(cls, best[:, None], axis=1)[:, 0]
    keep = np.nonzero(score >= conf_thresh)
    if keep[0].size == 0:
        return []
    a_idx, yy, xx = keep
    anc = np.asarray(anchors, dtype=np.float64)
    # centers may overshoot the grid by half a cell; keep them on the canvas
    cx = np.clip((2.0 * p[a_idx, 0, yy, xx] - 0.5 + xx) * stride, 0, img_w)
    cy = np.clip((2.0 * p[a_idx, 1, yy, xx] - 0.5 + yy) * stride, 0, img_h)
    bw = (2.0 * p[a_idx, 2, yy, xx]) ** 2 * anc[a_idx, 0]
    bh = (2.0 * p[a_idx, 3, yy, xx]) ** 2 * anc[a_idx, 1]
    x1 = np.clip(cx - bw / 2, 0, img_w)
    x2 = np.clip(cx + bw / 2, 0, img_w)
    y1 = np.clip(cy - bh / 2, 0, img_h)
    y2 = np.clip(cy + bh / 2, 0, img_h)
    return [
        Detection(Box(float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])), int(best[a_idx[i], yy[i], xx[i]]), float(score[a_idx[i], yy[i], xx[i]]))
        for i in range(a_idx.size)
    ]


def _order_key(d):
    b = d.box
    return (-d.score, d.class_id, b.x1, b.y1, b.x2, b.y2)


def nms(dets, iou_thresh=DEFAULT_NMS_IOU):
    """Greedy per-class suppression; output sorted by the same total order."""
    kept = {}
    for d in sorted(dets, key=_order_key):
        same = kept.setdefault(d.class_id, [])
        if all(iou(d.box, k.box) < iou_thresh for k in same):
            same.append(d)
    return sorted((d for group in kept.values() for d in group), key=_order_key)


def format_detections(dets):
    return "".join(
        f"{d.class_id} " + " ".join(fixed(v) for v in (d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2)) + "\n"
        for d in dets
    )


def parse_detections(text):
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        cid, score, x1, y1, x2, y2 = parts
        out.append(Detection(Box(float(x1), float(y1), float(x2), float(y2)), int(cid), float(score)))
    return out
