"""Direct-loop reference kernels.

These are the always-present reference implementations the fast im2col
paths are validated against. Accumulation order is fixed (channel, then
kernel row, then kernel column) so independent re-implementations that
follow the same order agree bit for bit in the same dtype.
"""

import numpy as np

from .errors import DimensionError


def naive_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Plain nested-loop cross-correlation of (B,C,H,W) with (N,C,k,k)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    b, c, h, w = x.shape
    n, cw, k, _ = weight.shape
    if cw != c:
        raise DimensionError(f"axis 1 (channels): input has {c}, weight expects {cw}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, n, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for ni in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    acc = x.dtype.type(0)
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[bi, ci, oi * stride + ki,
                                          oj * stride + kj] * weight[ni, ci, ki, kj]
                    out[bi, ni, oi, oj] = acc
    if bias is not None:
        out += np.asarray(bias).reshape(1, n, 1, 1)
    return out


def naive_depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel loop convolution; weight is (C,1,d,d)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    b, c, h, w = x.shape
    cw, _, d, _ = weight.shape
    if cw != c:
        raise DimensionError(f"axis 1 (channels): input has {c}, weight expects {cw}")
    ho = (h + 2 * padding - d) // stride + 1
    wo = (w + 2 * padding - d) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    acc = x.dtype.type(0)
                    for ki in range(d):
                        for kj in range(d):
                            acc += xp[bi, ci, oi * stride + ki,
                                      oj * stride + kj] * weight[ci, 0, ki, kj]
                    out[bi, ci, oi, oj] = acc
    if bias is not None:
        out += np.asarray(bias).reshape(1, c, 1, 1)
    return out


def naive_maxpool2d(x, k, stride=None, padding=0):
    x = np.asarray(x)
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    out[bi, ci, oi, oj] = xp[bi, ci,
                                             oi * stride:oi * stride + k,
                                             oj * stride:oj * stride + k].max()
    return out
