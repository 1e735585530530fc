"""Overfit the desk-scale detector on a handful of synthetic panels and
watch it find the defects it memorized.

Takes a few minutes of CPU. Run:  python demos/demo_train_tiny.py
"""

import numpy as np

from pvdet.data import CLASS_NAMES, synth_corpus
from pvdet.metrics import format_report
from pvdet.models import build, tiny_variant
from pvdet.train import evaluate, predict, train_model

ranges = {"hot_spot": ((36, 64), (36, 64)),
          "broken": ((24, 40), (48, 90))}
imgs = synth_corpus(seed=11, count=8, size=192,
                    counts={"hot_spot": 1, "broken": 1}, size_ranges=ranges)
print(f"corpus: {len(imgs)} panels of 192x192, "
      f"{sum(len(a.boxes) for a in imgs)} defects")

model = build(tiny_variant("gbh"), seed=0)
print("training the tiny four-head variant (width 1/8, depth 1/3)...")
res = train_model(model, imgs, epochs=120, batch_size=4, lr=0.001, seed=0,
                  mosaic=False, eval_every=30, eval_after=29,
                  log=lambda s: print("  " + s) if "P " in s
                  or int(s.split()[1]) % 30 == 0 else None)

print("\nfinal train-set report:")
print(format_report(evaluate(model, imgs)))

print("\nper-image detections on the first two panels:")
for ann in imgs[:2]:
    dets, elapsed = predict(model, ann)
    names = [(CLASS_NAMES[d.class_id], round(d.confidence, 2)) for d in dets]
    print(f"  {ann.image_id}: {names}  ({elapsed:.3f}s, "
          f"truth has {len(ann.boxes)} boxes)")
