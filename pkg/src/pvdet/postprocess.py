"""Grid decoding of raw head outputs and non-maximum suppression.

Everything here is pure numpy on detached arrays; decoding for training
runs through the tensor graph in the loss module instead.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SpecError

CONF_THRESHOLD = 0.25
NMS_IOU_THRESHOLD = 0.45


@dataclass
class Detection:
    class_id: int
    confidence: float
    cx: float
    cy: float
    w: float
    h: float

    def box(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode(raw, anchors, stride, conf_threshold=CONF_THRESHOLD):
    """Decode one head's raw map (A*(5+C), S, S) into detections.

    Per cell (cx, cy) and anchor (aw, ah):
        bx = (2*sigmoid(tx) - 0.5 + cx) * stride      by likewise
        bw = (2*sigmoid(tw))**2 * aw                  bh likewise
    confidence = sigmoid(objectness) * max class probability; a prediction
    is kept when that product reaches the threshold and its class is the
    argmax class.
    """
    raw = np.asarray(raw)
    anchors = np.asarray(anchors, dtype=np.float64)
    a = anchors.shape[0]
    ch, s1, s2 = raw.shape
    if ch % a:
        raise SpecError(f"channel count {ch} not divisible by {a} anchors")
    per = ch // a
    nc = per - 5
    if nc < 1:
        raise SpecError(f"head carries {per} values per anchor, needs >= 6")

    p = _sigmoid(raw.reshape(a, per, s1, s2))
    gy, gx = np.mgrid[0:s1, 0:s2]
    bx = (2.0 * p[:, 0] - 0.5 + gx) * stride
    by = (2.0 * p[:, 1] - 0.5 + gy) * stride
    bw = (2.0 * p[:, 2]) ** 2 * anchors[:, 0, None, None]
    bh = (2.0 * p[:, 3]) ** 2 * anchors[:, 1, None, None]
    obj = p[:, 4]
    cls = p[:, 5:]
    best = cls.argmax(axis=1)
    best_p = np.take_along_axis(cls, best[:, None], axis=1)[:, 0]
    conf = obj * best_p

    keep = conf >= conf_threshold
    ai, yi, xi = np.nonzero(keep)
    return [
        Detection(int(best[av, yv, xv]), float(conf[av, yv, xv]),
                  float(bx[av, yv, xv]), float(by[av, yv, xv]),
                  float(bw[av, yv, xv]), float(bh[av, yv, xv]))
        for av, yv, xv in zip(ai, yi, xi)
    ]


def decode_heads(raws, anchors, strides, conf_threshold=CONF_THRESHOLD):
    """Decode every head of one image and pool the detections."""
    dets = []
    for raw, anc, st in zip(raws, anchors, strides):
        dets.extend(decode(raw, anc, st, conf_threshold))
    return dets


def iou(a, b):
    """Intersection over union of center-format boxes (cx, cy, w, h).

    Areas come from the same corner arithmetic as the intersection, so
    identical boxes give exactly 1.0.
    """
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of two (N,4) / (M,4) center-format box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1)
    ih = np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = ((ax2 - ax1) * (ay2 - ay1))[:, None] \
        + (bx2 - bx1) * (by2 - by1) - inter
    return inter / np.maximum(union, 1e-12)


def _nms_order(dets):
    # deterministic: confidence descending, ties by smaller cx then cy
    return sorted(range(len(dets)),
                  key=lambda i: (-dets[i].confidence, dets[i].cx, dets[i].cy))


def nms(dets, iou_threshold=NMS_IOU_THRESHOLD):
    """Greedy class-aware suppression.

    A detection survives when its IoU with every already kept detection of
    the same class stays below the threshold; output is confidence
    descending.
    """
    kept = []
    for i in _nms_order(dets):
        d = dets[i]
        ok = True
        for k in kept:
            if k.class_id == d.class_id and iou(k.box(), d.box()) >= iou_threshold:
                ok = False
                break
        if ok:
            kept.append(d)
    return kept


def format_detection_record(image_id, class_name, det):
    """One text record per detection: id, class, confidence, box pixels."""
    return (f"{image_id} {class_name} {det.confidence:.6f} "
            f"{det.cx:g} {det.cy:g} {det.w:g} {det.h:g}")


def parse_detection_record(line):
    image_id, class_name, conf, cx, cy, w, h = line.split()
    return image_id, class_name, Detection(-1, float(conf), float(cx),
                                           float(cy), float(w), float(h))
