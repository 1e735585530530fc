"""Precision, recall, per-class average precision and mAP reports.

Matching is greedy in confidence order, class-exact, one detection per
ground truth. AP integrates the monotone precision envelope over every
recall step (all-point interpolation); mAP averages the defined per-class
APs. The matching IoU threshold defaults to 0.5.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES
from .postprocess import iou

MATCH_IOU = 0.5


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


def match_detections(dets, gts, iou_threshold=MATCH_IOU):
    """Flag each detection TP/FP against one image's ground truth.

    Detections are visited in confidence-descending order (ties broken by
    smaller cx, then cy); each visits its best not-yet-matched same-class
    ground truth and is a TP when that IoU reaches the threshold. Returns
    (order, tp flags in visit order, per-gt matched flags).
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].cx, dets[i].cy))
    matched = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(order), dtype=bool)
    for pos, i in enumerate(order):
        d = dets[i]
        best, best_iou = -1, 0.0
        for g in range(len(gts)):
            if matched[g] or int(gts[g, 0]) != d.class_id:
                continue
            v = iou(d.box(), gts[g, 1:5])
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0 and best_iou >= iou_threshold:
            flags[pos] = True
            matched[best] = True
    return order, flags, matched


def precision_recall(counts):
    """Exact confusion-count ratios; 0/0 is defined as 0 and flagged."""
    degenerate = (counts.tp + counts.fp == 0) or (counts.tp + counts.fn == 0)
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r, degenerate


def average_precision(tp_flags, num_gt):
    """Area under the precision envelope over recall.

    ``tp_flags`` must already be sorted by confidence descending. With no
    ground truth the AP is 0 when detections exist and undefined (None)
    otherwise.
    """
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        return 0.0 if len(tp_flags) else None
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float((env * dr).sum())


def map_over_classes(aps):
    """Arithmetic mean of the defined per-class APs."""
    defined = [a for a in aps if a is not None]
    if not defined:
        return 0.0
    return float(sum(defined) / len(defined))


@dataclass
class ClassMetrics:
    ap: object
    counts: ConfusionCounts
    precision: float
    recall: float
    num_gt: int


@dataclass
class EvalReport:
    per_class: dict
    map: float
    precision: float
    recall: float
    images: int
    total_gt: int
    iou_threshold: float
    degenerate: bool = False


class Evaluator:
    """Accumulates detections over images and produces an EvalReport."""

    def __init__(self, iou_threshold=MATCH_IOU, class_names=CLASS_NAMES):
        self.iou_threshold = iou_threshold
        self.class_names = class_names
        self._scored = {c: [] for c in range(len(class_names))}  # (conf, tp)
        self._num_gt = {c: 0 for c in range(len(class_names))}
        self.images = 0

    def add_image(self, dets, gts):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
        order, flags, _ = match_detections(dets, gts, self.iou_threshold)
        for pos, i in enumerate(order):
            d = dets[i]
            self._scored[d.class_id].append((d.confidence, bool(flags[pos])))
        for c in gts[:, 0].astype(int):
            self._num_gt[c] += 1
        self.images += 1

    def pr_curve(self, class_id):
        """(confidence, precision, recall) arrays for one class."""
        scored = sorted(self._scored[class_id], key=lambda t: -t[0])
        if not scored:
            return np.zeros((0, 3))
        flags = np.array([t[1] for t in scored])
        conf = np.array([t[0] for t in scored])
        tp = np.cumsum(flags)
        fp = np.cumsum(~flags)
        ngt = max(self._num_gt[class_id], 1)
        return np.stack([conf, tp / np.maximum(tp + fp, 1), tp / ngt], axis=1)

    def report(self):
        per_class = {}
        aps = []
        tot = ConfusionCounts()
        for c, name in enumerate(self.class_names):
            scored = sorted(self._scored[c], key=lambda t: -t[0])
            flags = [t[1] for t in scored]
            ngt = self._num_gt[c]
            if ngt == 0 and not flags:
                continue   # class absent from both sides: AP undefined
            ap = average_precision(flags, ngt)
            counts = ConfusionCounts(tp=int(sum(flags)),
                                     fp=int(len(flags) - sum(flags)),
                                     fn=int(ngt - sum(flags)))
            p, r, _ = precision_recall(counts)
            per_class[name] = ClassMetrics(ap, counts, p, r, ngt)
            aps.append(ap)
            tot.tp += counts.tp
            tot.fp += counts.fp
            tot.fn += counts.fn
        p, r, degenerate = precision_recall(tot)
        return EvalReport(per_class=per_class, map=map_over_classes(aps),
                          precision=p, recall=r, images=self.images,
                          total_gt=sum(self._num_gt.values()),
                          iou_threshold=self.iou_threshold,
                          degenerate=degenerate)


def format_report(report):
    """Human-readable per-class table with an mAP footer row."""
    lines = []
    lines.append(f"{'class':<16s} {'AP':>7s} {'TP':>5s} {'FP':>5s} "
                 f"{'FN':>5s} {'P':>7s} {'R':>7s}")
    for name, m in report.per_class.items():
        ap = f"{m.ap:7.4f}" if m.ap is not None else "   n/a"
        lines.append(f"{name:<16s} {ap} {m.counts.tp:5d} {m.counts.fp:5d} "
                     f"{m.counts.fn:5d} {m.precision:7.4f} {m.recall:7.4f}")
    lines.append(f"{'mAP@%.2f' % report.iou_threshold:<16s} "
                 f"{report.map:7.4f} {'':5s} {'':5s} {'':5s} "
                 f"{report.precision:7.4f} {report.recall:7.4f}")
    return "\n".join(lines)


def report_to_csv(report):
    buf = io.StringIO()
    buf.write("class,ap,tp,fp,fn,precision,recall\n")
    for name, m in report.per_class.items():
        ap = "" if m.ap is None else f"{m.ap:.6f}"
        buf.write(f"{name},{ap},{m.counts.tp},{m.counts.fp},{m.counts.fn},"
                  f"{m.precision:.6f},{m.recall:.6f}\n")
    buf.write(f"mAP,{report.map:.6f},,,,{report.precision:.6f},"
              f"{report.recall:.6f}\n")
    return buf.getvalue()


def pr_curves_to_csv(evaluator):
    buf = io.StringIO()
    buf.write("class,confidence,precision,recall\n")
    for c, name in enumerate(evaluator.class_names):
        for conf, p, r in evaluator.pr_curve(c):
            buf.write(f"{name},{conf:.6f},{p:.6f},{r:.6f}\n")
    return buf.getvalue()
