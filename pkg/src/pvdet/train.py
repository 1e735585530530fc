"""Training loop, prediction and evaluation glue.

The loop is deterministic given (model seed, data, train seed): every
random choice flows from one generator, so repeated runs produce
bit-identical loss curves.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .data import letterbox_annotated, mosaic4, to_model_input
from .errors import DivergenceError
from .loss import Adam, assign_targets, detection_loss
from .metrics import Evaluator
from .postprocess import (CONF_THRESHOLD, NMS_IOU_THRESHOLD, decode_heads,
                          nms)
from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class EpochStats:
    epoch: int
    loss: float
    box: float
    obj: float
    cls: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)   # EpochStats per epoch
    eval_rows: list = field(default_factory=list)  # (epoch, P, R, mAP)
    stopped_epoch: int = 0


def _batches(n, batch_size, order):
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_model(model, images, epochs, batch_size=4, lr=0.001, seed=0,
                mosaic=True, mosaic_tail_off=0.1, eval_every=0,
                eval_after=0, stop_map=None, conf_threshold=CONF_THRESHOLD,
                log=None, on_epoch=None):
    """Overfit-style trainer on an in-memory corpus.

    ``images`` are AnnotatedImages at their native size; each is
    letterboxed once to the model input size. Mosaic composition draws
    from the letterboxed pool and is disabled for the final
    ``mosaic_tail_off`` fraction of epochs. When ``eval_every`` is set the
    train-set precision/recall/mAP row is recorded on that cadence, and
    ``stop_map`` allows an early exit once the train mAP reaches it.
    """
    size = model.variant.input_size
    boxed = [letterbox_annotated(a, size)[0] for a in images]
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    anchors = [a.astype(np.float64) for a in model.anchors]
    strides = model.strides
    grids = [(size // s, size // s) for s in strides]
    result = TrainResult()

    for epoch in range(epochs):
        model.train()
        use_mosaic = mosaic and epoch < epochs * (1.0 - mosaic_tail_off)
        order = rng.permutation(len(boxed))
        sums = np.zeros(4)
        steps = 0
        for batch_ids in _batches(len(boxed), batch_size, order):
            samples = []
            for bi in batch_ids:
                if use_mosaic:
                    picks = [boxed[bi]] + [boxed[j] for j in
                                           rng.integers(0, len(boxed), 3)]
                    samples.append(mosaic4(picks, size, rng))
                else:
                    samples.append(boxed[bi])
            x = np.stack([to_model_input(s.image) for s in samples])
            gts = []
            for i, s in enumerate(samples):
                for cls, cx, cy, w, h in s.boxes:
                    gts.append([i, cls, cx, cy, w, h])
            gts = np.array(gts, dtype=np.float64).reshape(-1, 6)
            asn = assign_targets(gts, anchors, strides, grids)
            with Tape():
                outs = model(Tensor(x))
                lb = detection_loss(outs, asn, gts, model.num_classes,
                                    anchors, strides)
                if not np.isfinite(lb.value):
                    raise DivergenceError(epoch, steps)
                backward(lb.total)
            opt.step()
            opt.zero_grad()
            sums += (lb.value, lb.box, lb.obj, lb.cls)
            steps += 1
        stats = EpochStats(epoch, *(sums / steps))
        result.history.append(stats)
        result.stopped_epoch = epoch
        if log:
            log(f"epoch {epoch:4d}  loss {stats.loss:.5f}  box {stats.box:.5f} "
                f"obj {stats.obj:.5f}  cls {stats.cls:.5f}")
        if on_epoch:
            on_epoch(epoch, model, stats)
        if eval_every and epoch >= eval_after and (epoch + 1) % eval_every == 0:
            report = evaluate(model, images, conf_threshold=conf_threshold)
            result.eval_rows.append((epoch, report.precision, report.recall,
                                     report.map))
            if log:
                log(f"epoch {epoch:4d}  P {report.precision:.3f} "
                    f"R {report.recall:.3f}  mAP {report.map:.3f}")
            if stop_map is not None and report.map >= stop_map:
                break
    model.eval()
    return result


def predict(model, image, conf_threshold=CONF_THRESHOLD,
            iou_threshold=NMS_IOU_THRESHOLD):
    """Detections for one grayscale image, in original-image pixels."""
    size = model.variant.input_size
    from .data import AnnotatedImage, letterbox
    if isinstance(image, AnnotatedImage):
        image = image.image
    canvas, aff = letterbox(image, size)
    model.eval()
    t0 = time.perf_counter()
    with no_grad():
        outs = model(Tensor(to_model_input(canvas)[None]))
    raws = [o.data[0] for o in outs]
    dets = nms(decode_heads(raws, model.anchors, model.strides,
                            conf_threshold), iou_threshold)
    elapsed = time.perf_counter() - t0
    for d in dets:
        d.cx = (d.cx - aff.pad_x) / aff.scale
        d.cy = (d.cy - aff.pad_y) / aff.scale
        d.w /= aff.scale
        d.h /= aff.scale
    return dets, elapsed


def evaluate(model, images, conf_threshold=CONF_THRESHOLD,
             iou_threshold=NMS_IOU_THRESHOLD, match_iou=0.5):
    """EvalReport over a list of AnnotatedImages."""
    ev = Evaluator(iou_threshold=match_iou)
    for ann in images:
        dets, _ = predict(model, ann, conf_threshold, iou_threshold)
        ev.add_image(dets, ann.boxes)
    return ev.report()


def evaluate_with_curves(model, images, conf_threshold=CONF_THRESHOLD,
                         iou_threshold=NMS_IOU_THRESHOLD, match_iou=0.5):
    ev = Evaluator(iou_threshold=match_iou)
    for ann in images:
        dets, _ = predict(model, ann, conf_threshold, iou_threshold)
        ev.add_image(dets, ann.boxes)
    return ev.report(), ev
