"""A walk through the tensor engine: forward ops, the tape, and
gradient verification against finite differences.

Run:  python demos/demo_tensor_engine.py
"""

import numpy as np

import pvdet.tensor as T
from pvdet.gradcheck import finite_diff_check
from pvdet.naive import naive_conv2d
from pvdet.tensor import Tape, Tensor, backward

rng = np.random.default_rng(0)

print("=== values are plain numpy arrays in row-major layout ===")
x = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.3,
           requires_grad=True)
y = T.conv2d(x, w, stride=1, padding=1)
print("conv2d:", x.shape, "*", w.shape, "->", y.shape)

print("\n=== the im2col fast path agrees with the direct-loop reference ===")
ref = naive_conv2d(x.data, w.data, stride=1, padding=1)
print("max |fast - reference|:", float(np.abs(y.data - ref).max()))

print("\n=== reverse pass: ops recorded on a tape, replayed backwards ===")
with Tape() as tape:
    out = T.silu(T.conv2d(x, w, stride=1, padding=1))
    loss = (out * out).mean()
    print("recorded ops:", len(tape))
    backward(loss)
print("weight gradient shape:", w.grad.shape,
      " |g| mean:", float(np.abs(w.grad).mean()))

print("\n=== the finite-difference oracle confirms the analytic gradient ===")
co = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
err = finite_diff_check(
    lambda t: (T.silu(T.conv2d(x, t, stride=1, padding=1)) * co).sum(), w)
print(f"max relative error vs central differences: {err:.2e}")

print("\n=== focus slicing is lossless ===")
img = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
sliced = T.focus_slice(img)
restored = T.focus_deslice(sliced)
print(img.shape, "->", sliced.shape, "-> restored exactly:",
      np.array_equal(restored, img.data))
