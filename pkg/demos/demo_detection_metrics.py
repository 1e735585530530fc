"""Decoding, suppression and scoring without any training: how raw head
maps become boxes, and how detections are scored into AP and mAP.

Run:  python demos/demo_detection_metrics.py
"""

import numpy as np

from pvdet.metrics import Evaluator, average_precision, format_report
from pvdet.postprocess import Detection, decode, iou, nms

print("=== decoding one head map ===")
# one anchor, 4x4 grid at stride 8; light up two cells
raw = np.full((10, 4, 4), -12.0, np.float32)
for (gj, gi, cls) in ((1, 1, 0), (2, 3, 1)):
    raw[0:4, gj, gi] = 0.0         # neutral box logits
    raw[4, gj, gi] = 8.0           # objectness
    raw[5 + cls, gj, gi] = 8.0     # class score
dets = decode(raw, [(16.0, 16.0)], stride=8, conf_threshold=0.5)
for d in dets:
    print(f"  class {d.class_id} conf {d.confidence:.3f} "
          f"center ({d.cx:.1f},{d.cy:.1f}) size {d.w:.1f}x{d.h:.1f}")
print("logits of 0 decode to the cell center + half-cell, anchor-sized")

print("\n=== greedy class-aware suppression ===")
cluster = [Detection(0, 0.9, 40, 40, 20, 20),
           Detection(0, 0.8, 42, 41, 20, 20),
           Detection(0, 0.3, 41, 39, 22, 18),
           Detection(1, 0.7, 41, 40, 20, 20)]   # other class survives
kept = nms(cluster, 0.45)
print(f"{len(cluster)} overlapping detections -> {len(kept)} kept:",
      [(d.class_id, d.confidence) for d in kept])
print("pairwise IoU of the suppressed pair:",
      round(iou(cluster[0].box(), cluster[1].box()), 3))

print("\n=== AP walks the precision envelope over recall ===")
print("  ranking [TP, FP] with 1 truth -> AP",
      average_precision([True, False], 1))
print("  ranking [FP, TP] with 1 truth -> AP",
      average_precision([False, True], 1))

print("\n=== a small evaluation ===")
ev = Evaluator()
rng = np.random.default_rng(0)
for _ in range(6):
    gts = np.column_stack([rng.integers(0, 3, 4),
                           rng.uniform(50, 550, 4), rng.uniform(50, 550, 4),
                           rng.uniform(10, 60, 4), rng.uniform(10, 60, 4)])
    dets = []
    for c, cx, cy, w, h in gts:
        if rng.random() < 0.85:   # imperfect detector
            dets.append(Detection(int(c), float(rng.uniform(0.5, 1.0)),
                                  cx + rng.normal(0, 2), cy + rng.normal(0, 2),
                                  w * rng.uniform(0.9, 1.1),
                                  h * rng.uniform(0.9, 1.1)))
    if rng.random() < 0.5:        # the occasional hallucination
        dets.append(Detection(int(rng.integers(3)), 0.4, 300, 300, 40, 40))
    ev.add_image(dets, gts)
print(format_report(ev.report()))
