"""Minimal dense tensor engine with reverse-mode differentiation.

Values are numpy arrays in row-major layout. Gradients are recorded on an
explicit tape: every forward op that involves a grad-requiring tensor
appends one record, and ``backward`` replays the records in reverse
execution order (execution order is a topological order by construction,
so its reverse is a valid reverse-topological sweep).

Single precision is the working dtype; float64 inputs are honoured so the
same graph can be replayed in double precision for gradient checks.
"""

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_TAPE = None
_DEBUG_NAN = False


def set_debug_nan_checks(enabled):
    """Toggle the post-op finiteness assertion (debug aid, off by default)."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


class Tape:
    """Ordered record of executed ops, consumed in reverse by ``backward``.

    One training step runs on one tape; clearing the tape drops every
    recorded closure and with it the references keeping intermediate
    activations alive.
    """

    def __init__(self):
        self.records = []  # list of (output Tensor, backward callable)
        self._outer = None

    def record(self, output, backward_fn):
        self.records.append((output, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        self._outer = None
        return False


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    global _ACTIVE_TAPE
    saved, _ACTIVE_TAPE = _ACTIVE_TAPE, None
    try:
        yield
    finally:
        _ACTIVE_TAPE = saved


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Dense N-D value array with optional participation in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_recorded")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._recorded = False  # True when a tape record produces this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_const(x, dtype):
    """Coerce a non-Tensor operand to a plain array of compatible dtype."""
    arr = np.asarray(x, dtype=dtype if np.isscalar(x) or isinstance(x, (list, tuple)) else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype)
    return arr


def _make_result(data, inputs, backward_fn):
    """Wrap op output; record on the active tape when gradients may flow.

    ``backward_fn(grad_out, out)`` must accumulate into each input's
    ``.grad``. Accumulation is additive so fan-out sums naturally.
    """
    if _DEBUG_NAN and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    needs = any(isinstance(t, Tensor) and (t.requires_grad or t._recorded)
                for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        out._recorded = True
        _ACTIVE_TAPE.record(out, backward_fn)
    return out


def _accum(tensor, grad):
    """Add ``grad`` into ``tensor.grad`` when the tensor participates."""
    if not isinstance(tensor, Tensor):
        return
    if not (tensor.requires_grad or tensor._recorded):
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Populate ``.grad`` on every participating tensor reachable from loss.

    ``loss`` must be a scalar tensor recorded on the active tape.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _ACTIVE_TAPE
    if tape is None or not tape.records:
        raise ContractError("backward requires a non-empty active tape")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.records):
        if out.grad is not None:
            fn(out.grad, out)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = _as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else a
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        data = a.data + b.data

        def bw(g, out):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

        return _make_result(data, (a, b), bw)
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)
    const = _as_const(c, t.dtype)
    data = t.data + const

    def bw(g, out):
        _accum(t, _unbroadcast(g, t.shape))

    return _make_result(data, (t,), bw)


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -_as_const(b, a.dtype))


def neg(a):
    def bw(g, out):
        _accum(a, -g)

    return _make_result(-a.data, (a,), bw)


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        data = a.data * b.data

        def bw(g, out):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))

        return _make_result(data, (a, b), bw)
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)
    const = _as_const(c, t.dtype)
    data = t.data * const

    def bw(g, out):
        _accum(t, _unbroadcast(g * const, t.shape))

    return _make_result(data, (t,), bw)


def div(a, b):
    if isinstance(b, Tensor):
        data = (a.data if isinstance(a, Tensor) else _as_const(a, b.dtype)) / b.data
        at = a if isinstance(a, Tensor) else None
        ac = None if at is not None else _as_const(a, b.dtype)

        def bw(g, out):
            if at is not None:
                _accum(at, _unbroadcast(g / b.data, at.shape))
            num = at.data if at is not None else ac
            _accum(b, _unbroadcast(-g * num / (b.data * b.data), b.shape))

        return _make_result(data, (a, b) if at is not None else (b,), bw)
    const = _as_const(b, a.dtype)
    return mul(a, 1.0 / const)


def power(a, exponent):
    """Elementwise a**p for a constant scalar exponent."""
    p = float(exponent)
    data = a.data ** p

    def bw(g, out):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make_result(data, (a,), bw)


def exp(a):
    data = np.exp(a.data)

    def bw(g, out):
        _accum(a, g * out.data)

    return _make_result(data, (a,), bw)


def log(a):
    data = np.log(a.data)

    def bw(g, out):
        _accum(a, g / a.data)

    return _make_result(data, (a,), bw)


def sqrt(a):
    data = np.sqrt(a.data)

    def bw(g, out):
        _accum(a, g * 0.5 / out.data)

    return _make_result(data, (a,), bw)


def arctan(a):
    data = np.arctan(a.data)

    def bw(g, out):
        _accum(a, g / (1.0 + a.data * a.data))

    return _make_result(data, (a,), bw)


def _sigmoid_np(x):
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    data = _sigmoid_np(a.data)

    def bw(g, out):
        _accum(a, g * out.data * (1.0 - out.data))

    return _make_result(data, (a,), bw)


def silu(a):
    """x * sigmoid(x), the conv-block activation."""
    s = _sigmoid_np(a.data)
    data = a.data * s

    def bw(g, out):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make_result(data, (a,), bw)


def maximum(a, b):
    """Elementwise max of a tensor and a tensor/constant (ties go to a)."""
    bt = isinstance(b, Tensor)
    bdata = b.data if bt else _as_const(b, a.dtype)
    data = np.maximum(a.data, bdata)
    mask = a.data >= bdata

    def bw(g, out):
        _accum(a, _unbroadcast(g * mask, a.shape))
        if bt:
            _accum(b, _unbroadcast(g * ~mask, b.shape))

    return _make_result(data, (a, b) if bt else (a,), bw)


def minimum(a, b):
    bt = isinstance(b, Tensor)
    bdata = b.data if bt else _as_const(b, a.dtype)
    data = np.minimum(a.data, bdata)
    mask = a.data <= bdata

    def bw(g, out):
        _accum(a, _unbroadcast(g * mask, a.shape))
        if bt:
            _accum(b, _unbroadcast(g * ~mask, b.shape))

    return _make_result(data, (a, b) if bt else (a,), bw)


def clamp(a, lo=None, hi=None):
    data = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bw(g, out):
        _accum(a, g * mask)

    return _make_result(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a, axis=None):
    data = a.data.sum(axis=axis)

    def bw(g, out):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make_result(data, (a,), bw)


def reduce_mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bw(g, out):
        _accum(a, g.reshape(a.shape))

    return _make_result(data, (a,), bw)


def transpose(a, axes):
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, out):
        _accum(a, g.transpose(inv))

    return _make_result(data, (a,), bw)


def narrow(a, key):
    """Basic slicing; gradient scatters back into the sliced region."""
    data = a.data[key]

    def bw(g, out):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make_result(data, (a,), bw)


def gather_rows(a, index_arrays):
    """Advanced-index the leading axes of ``a`` with integer arrays.

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    idx = tuple(np.asarray(i) for i in index_arrays)
    data = a.data[idx]

    def bw(g, out):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make_result(data, (a,), bw)


def concat_channels(tensors, axis=1):
    """Concatenate along ``axis``; all other extents must agree."""
    shapes = [t.shape for t in tensors]
    base = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(base):
            raise DimensionError(f"concat rank mismatch: {base} vs {s}")
        for ax, (x, y) in enumerate(zip(base, s)):
            if ax != axis % len(base) and x != y:
                raise DimensionError(
                    f"concat extent mismatch on axis {ax}: {x} vs {y}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, out):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make_result(data, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy on raw logits.

    Stable form max(z,0) - z*t + log(1+exp(-|z|)); the gradient is the
    textbook sigmoid(z) - t. Targets are plain arrays (no grad).
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    data = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g, out):
        _accum(logits, g * (_sigmoid_np(z) - t))

    return _make_result(data, (logits,), bw)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _check_image(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (B,C,H,W), got rank {x.ndim}")


def _out_extent(size, k, stride, pad, axis_name):
    if size + 2 * pad < k:
        raise DimensionError(
            f"axis {axis_name}: extent {size} with padding {pad} is smaller "
            f"than kernel {k}")
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, k, stride, ho, wo):
    """Gather k*k patches: (B,C,Hp,Wp) -> (B, C, k, k, Ho, Wo)."""
    b, c = xp.shape[:2]
    col = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            col[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride,
                                   kj:kj + stride * wo:stride]
    return col


def _col2im(dcol, xshape, k, stride, pad, ho, wo):
    """Scatter-add the im2col gather (exact adjoint)."""
    b, c, h, w = xshape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride,
                kj:kj + stride * wo:stride] += dcol[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (B,C,H,W) with (N,C,k,k), im2col fast path.

    ``pvdet.naive.naive_conv2d`` is the direct-loop reference this must
    agree with to 1e-5 relative.
    """
    _check_image(x)
    if weight.ndim != 4:
        raise DimensionError(f"weight must be 4-D (N,C,k,k), got rank {weight.ndim}")
    b, c, h, w = x.shape
    n, cw, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"kernel must be square, got {k}x{k2}")
    if cw != c:
        raise DimensionError(
            f"axis 1 (channels): input has {c}, weight expects {cw}")
    if bias is not None and bias.shape != (n,):
        raise DimensionError(
            f"axis 0 (bias): expected length {n}, got {bias.shape}")
    ho = _out_extent(h, k, stride, padding, "2 (height)")
    wo = _out_extent(w, k, stride, padding, "3 (width)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    col = _im2col(xp, k, stride, ho, wo)             # (B,C,k,k,Ho,Wo)
    col2 = col.reshape(b, c * k * k, ho * wo)
    wm = weight.data.reshape(n, c * k * k)
    out = np.matmul(wm, col2).reshape(b, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, n, 1, 1)

    def bw(g, _out):
        gm = g.reshape(b, n, ho * wo)
        if weight.requires_grad or weight._recorded:
            dw = np.einsum("bnl,bkl->nk", gm, col2, optimize=True)
            _accum(weight, dw.reshape(weight.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._recorded:
            dcol = np.matmul(wm.T, gm).reshape(b, c, k, k, ho, wo)
            _accum(x, _col2im(dcol, x.shape, k, stride, padding, ho, wo))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_result(out, inputs, bw)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel convolution: weight (C,1,d,d), channel i only sees
    channel i."""
    _check_image(x)
    b, c, h, w = x.shape
    cw, one, d, d2 = weight.shape
    if one != 1 or d != d2:
        raise DimensionError(f"depthwise weight must be (C,1,d,d), got {weight.shape}")
    if cw != c:
        raise DimensionError(
            f"axis 1 (channels): input has {c}, weight expects {cw}")
    ho = _out_extent(h, d, stride, padding, "2 (height)")
    wo = _out_extent(w, d, stride, padding, "3 (width)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    col = _im2col(xp, d, stride, ho, wo)              # (B,C,d,d,Ho,Wo)
    out = np.einsum("bcijhw,cij->bchw", col, weight.data[:, 0], optimize=True)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def bw(g, _out):
        if weight.requires_grad or weight._recorded:
            dw = np.einsum("bcijhw,bchw->cij", col, g, optimize=True)
            _accum(weight, dw[:, None])
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._recorded:
            dcol = np.einsum("bchw,cij->bcijhw", g, weight.data[:, 0],
                             optimize=True)
            _accum(x, _col2im(dcol, x.shape, d, stride, padding, ho, wo))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make_result(out, inputs, bw)


def maxpool2d(x, k, stride=None, padding=0):
    _check_image(x)
    stride = k if stride is None else stride
    b, c, h, w = x.shape
    ho = _out_extent(h, k, stride, padding, "2 (height)")
    wo = _out_extent(w, k, stride, padding, "3 (width)")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    col = _im2col(xp, k, stride, ho, wo)              # (B,C,k,k,Ho,Wo)
    flat = col.reshape(b, c, k * k, ho, wo)
    arg = flat.argmax(axis=2)                          # (B,C,Ho,Wo)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g, _out):
        dcol = np.zeros_like(flat)
        np.put_along_axis(dcol, arg[:, :, None], g[:, :, None], axis=2)
        _accum(x, _col2im(dcol.reshape(b, c, k, k, ho, wo), x.shape,
                          k, stride, padding, ho, wo))

    return _make_result(out, (x,), bw)


def upsample_nearest2x(x):
    _check_image(x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g, out):
        b, c, h2, w2 = g.shape
        _accum(x, g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make_result(data, (x,), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.03, eps=1e-5):
    """Channelwise batch normalization over (B,H,W).

    Training mode normalizes by batch statistics and updates the running
    arrays in place (momentum into the new value); inference mode uses the
    running statistics as constants.
    """
    _check_image(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"axis 1 (channels): gamma/beta must have length {c}")
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))              # biased, used to normalize
        unbiased = var * m / max(m - 1, 1)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bw(g, _out):
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad or x._recorded:
                gx = g * gamma.data[None, :, None, None]
                mean_gx = gx.mean(axis=(0, 2, 3))
                mean_gx_xhat = (gx * xhat).mean(axis=(0, 2, 3))
                dx = inv[None, :, None, None] * (
                    gx - mean_gx[None, :, None, None]
                    - xhat * mean_gx_xhat[None, :, None, None])
                _accum(x, dx)

        return _make_result(out, (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv).astype(x.dtype)
    shift = (beta.data - gamma.data * running_mean * inv).astype(x.dtype)
    out = x.data * scale[None, :, None, None] + shift[None, :, None, None]
    xhat = (x.data - running_mean[None, :, None, None].astype(x.dtype)) \
        * inv[None, :, None, None].astype(x.dtype)

    def bw(g, _out):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._recorded:
            _accum(x, g * scale[None, :, None, None])

    return _make_result(out, (x, gamma, beta), bw)


def focus_slice(x):
    """Pixel-parity slicing (B,C,H,W) -> (B,4C,H/2,W/2), lossless.

    Channel order is fixed: even/even, odd/even, even/odd, odd/odd
    (rows x cols), each block keeping the original C channels.
    """
    _check_image(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(
            f"axis 2/3: focus slicing needs even extents, got {h}x{w}")
    parts = (x.data[:, :, 0::2, 0::2], x.data[:, :, 1::2, 0::2],
             x.data[:, :, 0::2, 1::2], x.data[:, :, 1::2, 1::2])
    data = np.concatenate(parts, axis=1)

    def bw(g, out):
        dx = np.zeros_like(x.data)
        gs = np.split(g, 4, axis=1)
        dx[:, :, 0::2, 0::2] = gs[0]
        dx[:, :, 1::2, 0::2] = gs[1]
        dx[:, :, 0::2, 1::2] = gs[2]
        dx[:, :, 1::2, 1::2] = gs[3]
        _accum(x, dx)

    return _make_result(data, (x,), bw)


def focus_deslice(y):
    """Exact inverse of ``focus_slice`` on plain arrays."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    b, c4, h, w = arr.shape
    if c4 % 4:
        raise DimensionError(f"axis 1: de-slice needs 4k channels, got {c4}")
    c = c4 // 4
    out = np.empty((b, c, h * 2, w * 2), dtype=arr.dtype)
    out[:, :, 0::2, 0::2] = arr[:, 0 * c:1 * c]
    out[:, :, 1::2, 0::2] = arr[:, 1 * c:2 * c]
    out[:, :, 0::2, 1::2] = arr[:, 2 * c:3 * c]
    out[:, :, 1::2, 1::2] = arr[:, 3 * c:4 * c]
    return out
