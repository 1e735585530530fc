"""Why ghost convolution is cheap: parameter and FLOP accounting next to
a plain convolution, plus what the output actually contains.

Run:  python demos/demo_ghost_economy.py
"""

import numpy as np

from pvdet.blocks import Conv2d, GhostConv
from pvdet.tensor import Tensor, no_grad

rng = np.random.default_rng(0)

print("=== a ghost conv = few real maps + cheap per-channel transforms ===")
ghost = GhostConv(64, 128, k=3, ratio=2, d=3, rng=np.random.default_rng(1))
plain = Conv2d(64, 128, 3, 1, rng=np.random.default_rng(1))
print(f"intrinsic maps m = {ghost.spec.m} of {ghost.spec.c2} outputs "
      f"(ratio {ghost.spec.ratio})")

gp = sum(p.size for p in ghost.parameters())
pp = sum(p.size for p in plain.parameters())
gf, _ = ghost.flops((1, 64, 40, 40))
pf, _ = plain.flops((1, 64, 40, 40))
print(f"parameters: ghost {gp} vs plain {pp}  ({gp / pp:.2%})")
print(f"flops @40x40: ghost {gf} vs plain {pf}  (ratio {gf / pf:.4f},"
      f" the 1/s + (s-1)/(s*c) law predicts"
      f" {0.5 + 1 / (2 * 64):.4f})")

print("\n=== the intrinsic maps pass through unchanged ===")
x = Tensor(rng.standard_normal((1, 64, 12, 12)).astype(np.float32))
with no_grad():
    out = ghost(x)
    primary = ghost.primary(x)
same = np.array_equal(out.data[:, :ghost.spec.m], primary.data)
print("output channels [0, m) equal the primary conv output:", same)

print("\n=== zeroing the cheap branch exposes the split ===")
for dw in ghost.cheap:
    dw.weight.data[:] = 0
    dw.bias.data[:] = 0
with no_grad():
    out = ghost(x)
print("channels [m, n) after nulling the cheap branch, max |value|:",
      float(np.abs(out.data[:, ghost.spec.m:]).max()))

print("\n=== small worked example from the channel arithmetic ===")
g1 = GhostConv(4, 8, k=1, ratio=2, d=3, rng=np.random.default_rng(2))
conv_w = sum(p.size for n, p in g1.named_parameters() if n.endswith("weight"))
print(f"c=4, n=8, s=2, k=1, d=3 -> conv weights {conv_w} "
      f"(primary 4*1*1*4 + cheap 4*3*3 = 52), vs plain 1x1: 32, "
      f"vs plain 3x3: 288")
