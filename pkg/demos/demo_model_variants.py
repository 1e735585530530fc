"""The four network variants side by side: structure, counters, and the
four-head pyramid of the tiny-target configuration.

Run:  python demos/demo_model_variants.py
"""

import numpy as np

from pvdet.models import (VARIANT_NAMES, ModelVariant, build, count_flops,
                          count_modules, count_params, tiny_variant)
from pvdet.tensor import Tensor, no_grad

print("=== the ablation ladder at default multiples (width 1/2, depth 1/3) ===")
print(f"{'variant':<10s} {'heads':>5s} {'params':>10s} {'modules':>8s} "
      f"{'GFLOPs@960':>11s}")
for name in VARIANT_NAMES:
    m = build(ModelVariant(name))
    print(f"{name:<10s} {len(m.strides):>5d} {count_params(m):>10d} "
          f"{count_modules(m):>8d} {count_flops(m) / 1e9:>11.1f}")

print("\nordering checks:")
p = {n: count_params(build(ModelVariant(n))) for n in VARIANT_NAMES}
print("  params: yolov5s < yolov5-1 < yolov5-2:",
      p["yolov5s"] < p["yolov5-1"] < p["yolov5-2"])
print("  params: gbh < yolov5-2:", p["gbh"] < p["yolov5-2"],
      "(ghosting the stride-1 neck convolutions)")

print("\n=== head grids: the extra stride-4 head sees a 4x finer lattice ===")
gbh = build(ModelVariant("gbh"))
v5s = build(ModelVariant("yolov5s"))
print("gbh @960:    ", dict(zip(gbh.strides, gbh.head_shapes(960))))
print("yolov5s @960:", dict(zip(v5s.strides, v5s.head_shapes(960))))

print("\n=== a desk-scale forward pass (tiny profile, 192 input) ===")
tiny = build(tiny_variant("gbh"), seed=0).eval()
x = np.random.default_rng(0).standard_normal((1, 3, 192, 192)) \
    .astype(np.float32)
with no_grad():
    outs = tiny(Tensor(x))
for stride, o in zip(tiny.strides, outs):
    print(f"stride {stride:2d}: raw head output {o.shape} "
          f"(3 anchors x (5 + 5 classes) channels)")
