"""Training loss: CIoU box regression, objectness and classification
terms, anchor-ratio target assignment across 3 or 4 heads, and Adam.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import SpecError
from .tensor import Tensor

RATIO_GATE = 4.0
LAMBDA_BOX = 0.05
LAMBDA_OBJ = 1.0
LAMBDA_CLS = 0.5
# per-head objectness balance, fine to coarse; the finest head sees the
# most cells and is weighted up
HEAD_BALANCE = {3: (4.0, 1.0, 0.4), 4: (4.0, 1.0, 0.4, 0.1)}


def _boxes_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def ciou(pred, target, eps=1e-9):
    """Complete IoU of center-format boxes (..., 4), differentiable in pred.

    IoU minus the squared center distance over the enclosing-box diagonal
    minus the aspect-ratio penalty alpha*v; equals plain IoU when centers
    coincide and aspect ratios match. Lies in (-1, 1].
    """
    p = _boxes_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target,
                   dtype=np.float64)
    if p.shape[-1] != 4 or t.shape[-1] != 4:
        raise SpecError("boxes must have 4 components (cx, cy, w, h)")

    px1 = p[..., 0] - p[..., 2] * 0.5
    px2 = p[..., 0] + p[..., 2] * 0.5
    py1 = p[..., 1] - p[..., 3] * 0.5
    py2 = p[..., 1] + p[..., 3] * 0.5
    tx1, tx2 = t[..., 0] - t[..., 2] * 0.5, t[..., 0] + t[..., 2] * 0.5
    ty1, ty2 = t[..., 1] - t[..., 3] * 0.5, t[..., 1] + t[..., 3] * 0.5

    iw = T.clamp(T.minimum(px2, tx2) - T.maximum(px1, tx1), lo=0.0)
    ih = T.clamp(T.minimum(py2, ty2) - T.maximum(py1, ty1), lo=0.0)
    inter = iw * ih
    union = p[..., 2] * p[..., 3] + t[..., 2] * t[..., 3] - inter
    iou_val = inter / (union + eps)

    # squared center distance over squared enclosing diagonal
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    chh = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    c2 = cw * cw + chh * chh + eps
    rho2 = (p[..., 0] - t[..., 0]) ** 2 + (p[..., 1] - t[..., 1]) ** 2

    atan_t = np.arctan(t[..., 2] / np.maximum(t[..., 3], eps))
    datan = T.arctan(p[..., 2] / (p[..., 3] + eps)) - atan_t
    v = datan * datan * (4.0 / math.pi ** 2)
    alpha = v / (1.0 - iou_val + v + eps)
    return iou_val - rho2 / c2 - v * alpha


@dataclass
class TargetAssignment:
    """Per head: parallel index arrays of the training rows.

    img, anchor, gj, gi index the raw head map; gt points back into the
    flat ground-truth table this assignment was built from.
    """
    img: list
    anchor: list
    gj: list
    gi: list
    gt: list

    @property
    def heads(self):
        return len(self.img)

    def rows(self, h):
        return len(self.img[h])

    def total(self):
        return sum(len(a) for a in self.img)


def assign_targets(gts, anchors, strides, grid_sizes, ratio_gate=RATIO_GATE):
    """Anchor-ratio gating plus the two nearest neighbor cells.

    ``gts`` is an (N, 6) array of (img, class, cx, cy, w, h) in input
    pixels. A box matches an anchor when the largest of the four w/h
    ratios stays under the gate; the owning cell and the two neighbor
    cells closest to the sub-cell offset of the center all receive the
    target. Returns per-head index arrays.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    out = TargetAssignment([], [], [], [], [])
    for anc, stride, (sh, sw) in zip(anchors, strides, grid_sizes):
        anc = np.asarray(anc, dtype=np.float64)
        img_l, a_l, gj_l, gi_l, gt_l = [], [], [], [], []
        if len(gts):
            wh = gts[:, 4:6]
            r = wh[:, None] / anc[None]                      # (N, A, 2)
            gate = np.maximum(r, 1.0 / r).max(axis=2) < ratio_gate
            gi_f = gts[:, 2] / stride
            gj_f = gts[:, 3] / stride
            gi0 = np.clip(gi_f.astype(int), 0, sw - 1)
            gj0 = np.clip(gj_f.astype(int), 0, sh - 1)
            # neighbor offsets: the closer horizontal and vertical cell
            dx = np.where(gi_f - gi0 < 0.5, -1, 1)
            dy = np.where(gj_f - gj0 < 0.5, -1, 1)
            for n, a in zip(*np.nonzero(gate)):
                cells = ((gj0[n], gi0[n]),
                         (gj0[n], gi0[n] + dx[n]),
                         (gj0[n] + dy[n], gi0[n]))
                for cj, ci in cells:
                    if 0 <= cj < sh and 0 <= ci < sw:
                        img_l.append(int(gts[n, 0]))
                        a_l.append(int(a))
                        gj_l.append(int(cj))
                        gi_l.append(int(ci))
                        gt_l.append(int(n))
        out.img.append(np.array(img_l, dtype=np.int64))
        out.anchor.append(np.array(a_l, dtype=np.int64))
        out.gj.append(np.array(gj_l, dtype=np.int64))
        out.gi.append(np.array(gi_l, dtype=np.int64))
        out.gt.append(np.array(gt_l, dtype=np.int64))
    return out


@dataclass
class LossBreakdown:
    box: float
    obj: float
    cls: float
    total: Tensor
    obj_targets: list = None

    @property
    def value(self):
        return float(self.total.data)


def detection_loss(heads, assignment, gts, num_classes, anchors, strides,
                   lambda_box=LAMBDA_BOX, lambda_obj=LAMBDA_OBJ,
                   lambda_cls=LAMBDA_CLS, obj_targets=None):
    """Weighted sum of box, objectness and classification terms.

    Box: mean (1 - CIoU) over assigned prediction/target pairs (unclamped,
    so far-apart pairs can exceed 1). Objectness: BCE over every cell
    against the detached CIoU of the matched pair clamped to [0,1], zero
    elsewhere, balanced per head. Class: one-vs-all BCE on assigned cells.

    The detached soft targets make the loss a function of the predictions
    twice over; finite-difference checks must hold them fixed, so the
    targets used are returned in the breakdown and can be passed back via
    ``obj_targets`` to evaluate the loss at frozen targets.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    nh = len(heads)
    balance = HEAD_BALANCE.get(
        nh, tuple(4.0 if i == 0 else 1.0 for i in range(nh)))
    box_terms, cls_terms, obj_terms = [], [], []
    used_targets = []
    for h, raw in enumerate(heads):
        b, ch, sh, sw = raw.shape
        a = len(anchors[h])
        per = ch // a
        grid = T.transpose(T.reshape(raw, (b, a, per, sh, sw)), (0, 1, 3, 4, 2))
        idx = (assignment.img[h], assignment.anchor[h],
               assignment.gj[h], assignment.gi[h])
        n = len(idx[0])
        obj_target = np.zeros((b, a, sh, sw), dtype=raw.dtype)
        if n:
            rows = T.gather_rows(grid, idx)               # (n, 5+C)
            anc = np.asarray(anchors[h], dtype=np.float64)[assignment.anchor[h]]
            cell = np.stack([idx[3], idx[2]], axis=1).astype(np.float64)
            pxy = (T.sigmoid(rows[:, 0:2]) * 2.0 - 0.5 + cell) * float(strides[h])
            pwh = (T.sigmoid(rows[:, 2:4]) * 2.0) ** 2.0 * anc
            pbox = T.concat_channels([pxy, pwh], axis=1)
            tbox = gts[assignment.gt[h]][:, 2:6]
            ci = ciou(pbox, tbox)
            box_terms.append(T.reduce_mean(1.0 - ci))
            np.maximum.at(obj_target, idx, np.clip(ci.data, 0.0, 1.0))
            if num_classes > 1:
                onehot = np.zeros((n, num_classes), dtype=raw.dtype)
                onehot[np.arange(n),
                       gts[assignment.gt[h]][:, 1].astype(int)] = 1.0
                cls_terms.append(T.reduce_mean(
                    T.bce_with_logits(rows[:, 5:], onehot)))
        if obj_targets is not None:
            obj_target = obj_targets[h]
        used_targets.append(obj_target)
        obj_logits = grid[..., 4]
        obj_terms.append(T.mul(T.reduce_mean(
            T.bce_with_logits(obj_logits, obj_target)), balance[h]))

    def _sum(terms):
        if not terms:
            return None
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        return acc

    box = _sum(box_terms)
    obj = _sum(obj_terms)
    cls = _sum(cls_terms)
    total = T.mul(obj, lambda_obj)
    if box is not None:
        total = T.add(total, T.mul(box, lambda_box))
    if cls is not None:
        total = T.add(total, T.mul(cls, lambda_cls))
    return LossBreakdown(
        box=float(box.data) if box is not None else 0.0,
        obj=float(obj.data),
        cls=float(cls.data) if cls is not None else 0.0,
        total=total,
        obj_targets=used_targets)


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                       ).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state, lr=0.001, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """Functional single Adam update; state carries (t, m list, v list)."""
    if state is None:
        state = (0, [np.zeros_like(g) for g in grads],
                 [np.zeros_like(g) for g in grads])
    t, ms, vs = state
    t += 1
    out = []
    for p, g, m, v in zip(params, grads, ms, vs):
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out, (t, ms, vs)
