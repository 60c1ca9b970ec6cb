"""Detection metrics: matching, precision/recall, all-point AP, mAP, PR export, FPS."""

import os
import re
import time
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import NamedTuple

import numpy as np

from .detect import Box, fixed, iou

CLASS_NAMES = ("Dead Knot", "Live Knot", "Knot with crack", "Crack")
CLASS_ABBREV = ("DK", "LK", "KC", "CR")
EVAL_IOU = 0.5


class GroundTruth(NamedTuple):
    class_id: int
    box: Box


@dataclass
class MatchResult:
    """Per-image matching outcome.

    ``records`` holds one ``(score, class_id, is_tp)`` per detection and
    ``matched_gt`` the ground-truth index each detection claimed (or None).
    """

    records: list = field(default_factory=list)
    matched_gt: list = field(default_factory=list)
    n_gt: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    @property
    def tp(self):
        return sum(1 for r in self.records if r[2])

    @property
    def fp(self):
        return sum(1 for r in self.records if not r[2])

    @property
    def fn_total(self):
        return sum(self.fn.values())


def match_detections(dets, gts, iou_thresh=EVAL_IOU):
    """Greedy score-ordered matching against same-class ground truths of one image."""
    gts = list(gts)
    res = MatchResult()
    by_class = defaultdict(list)
    for gi, g in enumerate(gts):
        by_class[g.class_id].append(gi)
    used = set()
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, dets[i].box.x1, i))
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for gi in by_class.get(d.class_id, ()):
            if gi in used:
                continue
            v = iou(d.box, gts[gi].box)
            if v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou >= iou_thresh:
            used.add(best)
            res.records.append((d.score, d.class_id, True))
            res.matched_gt.append(best)
        else:
            res.records.append((d.score, d.class_id, False))
            res.matched_gt.append(None)
    for cid, idxs in by_class.items():
        res.n_gt[cid] = len(idxs)
        res.fn[cid] = sum(1 for gi in idxs if gi not in used)
    return res


def precision_recall(matches):
    """(precision, recall) from a MatchResult or a (tp, fp, fn) triple.

    Precision is 1.0 when nothing was detected; recall is None when there
    are no ground truths.
    """
    if isinstance(matches, MatchResult):
        tp, fp, fn = matches.tp, matches.fp, matches.fn_total
    else:
        tp, fp, fn = matches
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def pr_points(ranked, gt_count):
    """Raw (recall, precision) points, one per distinct score threshold.

    ``ranked`` is a sequence of ``(score, is_tp)``; detections sharing a score
    enter together.
    """
    items = sorted(ranked, key=lambda r: -r[0])
    points = []
    tp = fp = 0
    for i, (score, hit) in enumerate(items):
        if hit:
            tp += 1
        else:
            fp += 1
        if i + 1 == len(items) or items[i + 1][0] != score:
            points.append((tp / gt_count, tp / (tp + fp)))
    return points


def precision_envelope(points):
    """Distinct recall levels > 0 with the max precision at any recall >= level."""
    levels = []
    best = 0.0
    for r, p in reversed(points):
        best = max(best, p)
        if r <= 0:
            continue
        if levels and levels[-1][0] == r:
            levels[-1] = (r, best)
        else:
            levels.append((r, best))
    return levels[::-1]


def average_precision(ranked, gt_count):
    """Area under the precision envelope; None when there are no ground truths."""
    if gt_count <= 0:
        return None
    prev, area = 0.0, 0.0
    for r, p in precision_envelope(pr_points(ranked, gt_count)):
        area += (r - prev) * p
        prev = r
    return area


def envelope_staircase(ranked, gt_count):
    """Corner points of the envelope, starting at recall 0."""
    if gt_count <= 0:
        return []
    levels = precision_envelope(pr_points(ranked, gt_count))
    if not levels:
        return []
    out = [(0.0, levels[0][1])]
    for i, (r, p) in enumerate(levels):
        out.append((r, p))
        if i + 1 < len(levels) and levels[i + 1][1] != p:
            out.append((r, levels[i + 1][1]))
    # drop interior points of flat runs
    compact = [out[0]]
    for j in range(1, len(out)):
        nxt = out[j + 1] if j + 1 < len(out) else None
        if nxt is not None and out[j][1] == compact[-1][1] == nxt[1]:
            continue
        compact.append(out[j])
    return compact


def mean_ap(per_class_aps):
    """Arithmetic mean over classes that have an AP (None entries are skipped)."""
    values = per_class_aps.values() if isinstance(per_class_aps, dict) else per_class_aps
    vals = [v for v in values if v is not None]
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def format_percent(x, digits=1):
    q = Decimal(1).scaleb(-digits)
    return str(Decimal(repr(x * 100)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    class_names: tuple
    ap: dict
    map: float
    curves: dict
    tp: dict
    fp: dict
    fn: dict
    n_gt: dict


def evaluate(predictions, ground_truths, nc=len(CLASS_NAMES), iou_thresh=EVAL_IOU, class_names=None):
    """Score per-image detection lists against per-image ground-truth lists."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truths)} images")
    names = tuple(class_names) if class_names is not None else CLASS_NAMES[:nc]
    ranked = defaultdict(list)
    n_gt, fn = defaultdict(int), defaultdict(int)
    for dets, gts in zip(predictions, ground_truths):
        res = match_detections(list(dets), gts, iou_thresh)
        for score, cid, hit in res.records:
            ranked[cid].append((score, hit))
        for cid, count in res.n_gt.items():
            n_gt[cid] += count
            fn[cid] += res.fn[cid]
    ap, curves, tp, fp = {}, {}, {}, {}
    for cid in range(nc):
        rows = sorted(ranked.get(cid, []), key=lambda r: -r[0])
        tp[cid] = sum(1 for _, h in rows if h)
        fp[cid] = len(rows) - tp[cid]
        ap[cid] = average_precision(rows, n_gt[cid])
        curves[cid] = envelope_staircase(rows, n_gt[cid])
    return EvalReport(names, ap, mean_ap(ap), curves, tp, fp, {c: fn[c] for c in range(nc)}, {c: n_gt[c] for c in range(nc)})


def _slug(name):
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def export_pr_curve(report, path):
    """Write one ``pr_<id>_<name>.txt`` per class into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    written = []
    for cid, name in enumerate(report.class_names):
        fname = os.path.join(path, f"pr_{cid}_{_slug(name)}.txt")
        lines = [f"# class {name}\n"]
        lines += [f"{fixed(r)} {fixed(p)}\n" for r, p in report.curves.get(cid, [])]
        with open(fname, "w") as fh:
            fh.writelines(lines)
        written.append(fname)
    return written


def format_summary(report, params=None, flops=None, fps=None):
    abbrev = [CLASS_ABBREV[i] if i < len(CLASS_ABBREV) else str(i) for i in range(len(report.class_names))]
    head = abbrev + ["mAP", "FPS", "Params(M)", "FLOPs(G)"]
    cells = ["-" if report.ap[c] is None else format_percent(report.ap[c]) for c in range(len(abbrev))]
    cells.append(format_percent(report.map))
    cells.append("-" if fps is None else f"{fps:.1f}")
    cells.append("-" if params is None else f"{params / 1e6:.2f}")
    cells.append("-" if flops is None else f"{flops / 1e9:.2f}")
    width = [max(len(a), len(b)) for a, b in zip(head, cells)]
    row = lambda xs: "  ".join(x.rjust(w) for x, w in zip(xs, width))  # noqa: E731
    return row(head) + "\n" + row(cells) + "\n"


class BenchResult(NamedTuple):
    mean_ms: float
    fps: float
    min_ms: float


def bench_fps(model, input_shape=None, iterations=10, warmup=5, seed=0):
    """Wall-clock forward timing; the first ``warmup`` runs are discarded."""
    from .model import forward

    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if input_shape is None:
        input_shape = (1, 3, model.spec.input_size, model.spec.input_size)
    x = np.random.default_rng(seed).random(input_shape, dtype=np.float32)
    for _ in range(warmup):
        forward(model, x)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        forward(model, x)
        times.append((time.perf_counter() - t0) * 1000.0 / input_shape[0])
    mean_ms = sum(times) / len(times)
    return BenchResult(mean_ms, 1000.0 / mean_ms, min(times))


def summarize(report, model=None, fps=None) -> str:
    params = flops = None
    if model is not None:
        from .model import count_flops, count_params

        params, flops = count_params(model), count_flops(model)
    return format_summary(report, params, flops, fps)


__all__ = [
    "CLASS_NAMES",
    "GroundTruth",
    "MatchResult",
    "EvalReport",
    "match_detections",
    "precision_recall",
    "pr_points",
    "precision_envelope",
    "average_precision",
    "envelope_staircase",
    "mean_ap",
    "format_percent",
    "evaluate",
    "export_pr_curve",
    "format_summary",
    "bench_fps",
    "summarize",
]
