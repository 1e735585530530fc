"""Composite network blocks: Focus, ConvBnAct, GhostConv, Bottleneck,
BottleneckCSP, C3 and SPP, plus the small module system they hang off.

Every block is stateless given its weights; training mode only matters to
batch-norm running statistics. Weight initialization draws from the rng
passed to the constructor so model builds are reproducible bit for bit.
"""

import math

import numpy as np

from . import tensor as T
from .errors import SpecError
from .tensor import Tensor


def autopad(k):
    """'same' padding for stride-1 odd kernels."""
    return k // 2


class Module:
    """Base class: children and parameters discovered from attributes in
    assignment order, buffers registered explicitly."""

    def __init__(self):
        self._buffer_names = []
        self._training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name, array):
        setattr(self, name, array)
        self._buffer_names.append(name)

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_parameters(sub)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self.children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_buffers(sub)

    def train(self, mode=True):
        for _, m in self.named_modules():
            m._training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return self._training

    def cast(self, dtype):
        """Cast parameters and buffers in place (float64 for grad checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # shape/cost walk, mirrored by each leaf
    def out_shape(self, in_shape):
        raise NotImplementedError

    def flops(self, in_shape):
        """(flops, out_shape) for one sample of the given input shape."""
        raise NotImplementedError


def _uniform(rng, shape, bound, dtype=np.float32):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c1, c2, k=1, stride=1, padding=None, bias=False,
                 rng=None, bias_fill=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.c1, self.c2, self.k = c1, c2, k
        self.stride = stride
        self.padding = autopad(k) if padding is None else padding
        fan_in = c1 * k * k
        self.weight = Tensor(_uniform(rng, (c2, c1, k, k), math.sqrt(1.0 / fan_in)),
                             requires_grad=True)
        if bias:
            if bias_fill is not None:
                self.bias = Tensor(np.full(c2, bias_fill, np.float32),
                                   requires_grad=True)
            else:
                self.bias = Tensor(_uniform(rng, (c2,), 1.0 / math.sqrt(fan_in)),
                                   requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, s):
        _, _, h, w = s
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return (s[0], self.c2, ho, wo)

    def flops(self, s):
        out = self.out_shape(s)
        n = out[2] * out[3]
        fl = 2 * self.k * self.k * self.c1 * self.c2 * n
        if self.bias is not None:
            fl += self.c2 * n
        return fl, out


class DepthwiseConv2d(Module):
    """One d x d filter per channel; channel i only sees channel i."""

    def __init__(self, c, d=3, stride=1, padding=None, bias=False, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.c, self.d = c, d
        self.stride = stride
        self.padding = autopad(d) if padding is None else padding
        fan_in = d * d
        self.weight = Tensor(_uniform(rng, (c, 1, d, d), math.sqrt(1.0 / fan_in)),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c,), 1.0 / math.sqrt(fan_in)),
                           requires_grad=True) if bias else None

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.bias, self.stride,
                                  self.padding)

    def out_shape(self, s):
        _, _, h, w = s
        ho = (h + 2 * self.padding - self.d) // self.stride + 1
        wo = (w + 2 * self.padding - self.d) // self.stride + 1
        return (s[0], self.c, ho, wo)

    def flops(self, s):
        out = self.out_shape(s)
        n = out[2] * out[3]
        fl = 2 * self.d * self.d * self.c * n
        if self.bias is not None:
            fl += self.c * n
        return fl, out


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5, momentum=0.03):
        super().__init__()
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, np.float32))
        self.register_buffer("running_var", np.ones(c, np.float32))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, self._training,
                            self.momentum, self.eps)

    def out_shape(self, s):
        return s

    def flops(self, s):
        return 2 * s[1] * s[2] * s[3], s


class SiLU(Module):
    def forward(self, x):
        return T.silu(x)

    def out_shape(self, s):
        return s

    def flops(self, s):
        return 4 * s[1] * s[2] * s[3], s


class MaxPool2d(Module):
    def __init__(self, k, stride=1, padding=None):
        super().__init__()
        self.k = k
        self.stride = stride
        self.padding = autopad(k) if padding is None else padding

    def forward(self, x):
        return T.maxpool2d(x, self.k, self.stride, self.padding)

    def out_shape(self, s):
        _, _, h, w = s
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return (s[0], s[1], ho, wo)

    def flops(self, s):
        out = self.out_shape(s)
        return self.k * self.k * s[1] * out[2] * out[3], out


class Upsample2x(Module):
    def forward(self, x):
        return T.upsample_nearest2x(x)

    def out_shape(self, s):
        return (s[0], s[1], s[2] * 2, s[3] * 2)

    def flops(self, s):
        return 0, self.out_shape(s)


class ConvBnAct(Module):
    """conv -> batch norm -> SiLU, the standard unit of every stage."""

    def __init__(self, c1, c2, k=1, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(c1, c2, k, stride, rng=rng)
        self.bn = BatchNorm2d(c2)
        self.act = SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))

    def out_shape(self, s):
        return self.conv.out_shape(s)

    def flops(self, s):
        f1, s = self.conv.flops(s)
        f2, s = self.bn.flops(s)
        f3, s = self.act.flops(s)
        return f1 + f2 + f3, s


class Focus(Module):
    """Lossless pixel-parity slice to 4C channels at half resolution,
    then a stride-1 convolution."""

    def __init__(self, c1, c2, k=3, rng=None):
        super().__init__()
        self.conv = ConvBnAct(4 * c1, c2, k, 1, rng=rng)

    def forward(self, x):
        return self.conv(T.focus_slice(x))

    def out_shape(self, s):
        return self.conv.out_shape((s[0], 4 * s[1], s[2] // 2, s[3] // 2))

    def flops(self, s):
        return self.conv.flops((s[0], 4 * s[1], s[2] // 2, s[3] // 2))


class GhostConvSpec:
    """Channel arithmetic for a ghost convolution.

    ratio >= 2 intrinsic-to-total expansion; m = ceil(n / ratio) intrinsic
    maps; the cheap branch adds m*(ratio-1) maps and the concatenation is
    truncated to exactly n channels.
    """

    def __init__(self, c1, c2, ratio=2, primary_kernel=1, cheap_kernel=3,
                 stride=1):
        if ratio < 2:
            raise SpecError(f"ghost ratio must be >= 2, got {ratio}")
        if c2 < ratio:
            raise SpecError(f"ghost needs out channels >= ratio, got {c2} < {ratio}")
        self.c1 = c1
        self.c2 = c2
        self.ratio = int(ratio)
        self.primary_kernel = primary_kernel
        self.cheap_kernel = cheap_kernel
        self.stride = stride
        self.m = math.ceil(c2 / ratio)


class GhostConv(Module):
    """Few intrinsic maps from a real convolution, the rest from cheap
    per-channel linear transforms; the intrinsic maps pass through
    unchanged as the constant branch."""

    def __init__(self, c1, c2, k=1, ratio=2, d=3, stride=1, rng=None):
        super().__init__()
        self.spec = GhostConvSpec(c1, c2, ratio, k, d, stride)
        m = self.spec.m
        self.primary = Conv2d(c1, m, k, stride, bias=True, rng=rng)
        self.cheap = [DepthwiseConv2d(m, d, 1, bias=True, rng=rng)
                      for _ in range(ratio - 1)]

    def forward(self, x):
        y = self.primary(x)
        parts = [y] + [dw(y) for dw in self.cheap]
        out = T.concat_channels(parts)
        if out.shape[1] == self.spec.c2:
            return out
        return out[:, :self.spec.c2]

    def out_shape(self, s):
        p = self.primary.out_shape(s)
        return (p[0], self.spec.c2, p[2], p[3])

    def flops(self, s):
        fl, p = self.primary.flops(s)
        for dw in self.cheap:
            f, _ = dw.flops(p)
            fl += f
        return fl, (p[0], self.spec.c2, p[2], p[3])


class Bottleneck(Module):
    """1x1 then 3x3 conv unit with optional residual sum."""

    def __init__(self, c1, c2, shortcut=True, e=0.5, rng=None):
        super().__init__()
        if shortcut and c1 != c2:
            raise SpecError(
                f"bottleneck shortcut needs matching channels, got {c1} -> {c2}")
        ch = int(c2 * e)
        self.cv1 = ConvBnAct(c1, ch, 1, 1, rng=rng)
        self.cv2 = ConvBnAct(ch, c2, 3, 1, rng=rng)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return T.add(x, y) if self.shortcut else y

    def out_shape(self, s):
        return self.cv2.out_shape(self.cv1.out_shape(s))

    def flops(self, s):
        f1, t = self.cv1.flops(s)
        f2, t = self.cv2.flops(t)
        if self.shortcut:
            f2 += t[1] * t[2] * t[3]
        return f1 + f2, t


class BottleneckCSP(Module):
    """Cross-stage-partial block.

    Path A runs the stacked bottlenecks and a 1x1 transition convolution
    that cuts the gradient flow back into the stack's input; path B is a
    bare 1x1 convolution of the block input. The two are mixed by
    concatenation, batch norm, activation and a final 1x1 convolution.
    """

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, rng=None):
        super().__init__()
        if n < 1:
            raise SpecError(f"csp repeat count must be >= 1, got {n}")
        ch = int(c2 * e)
        if ch < 1:
            raise SpecError(f"csp hidden channels must be >= 1, got {ch}")
        self.cv1 = ConvBnAct(c1, ch, 1, 1, rng=rng)
        self.cv2 = Conv2d(c1, ch, 1, 1, rng=rng)
        self.cv3 = Conv2d(ch, ch, 1, 1, rng=rng)
        self.cv4 = ConvBnAct(2 * ch, c2, 1, 1, rng=rng)
        self.bn = BatchNorm2d(2 * ch)
        self.act = SiLU()
        self.m = [Bottleneck(ch, ch, shortcut, 1.0, rng=rng) for _ in range(n)]

    def forward(self, x):
        y1 = self.cv1(x)
        for b in self.m:
            y1 = b(y1)
        y1 = self.cv3(y1)
        y2 = self.cv2(x)
        return self.cv4(self.act(self.bn(T.concat_channels([y1, y2]))))

    def out_shape(self, s):
        t = self.cv1.out_shape(s)
        return self.cv4.out_shape((t[0], 2 * t[1], t[2], t[3]))

    def flops(self, s):
        fl, t = self.cv1.flops(s)
        for b in self.m:
            f, t = b.flops(t)
            fl += f
        f, t = self.cv3.flops(t)
        fl += f
        f, _ = self.cv2.flops(s)
        fl += f
        cat = (t[0], 2 * t[1], t[2], t[3])
        f, cat = self.bn.flops(cat)
        fl += f
        f, cat = self.act.flops(cat)
        fl += f
        f, out = self.cv4.flops(cat)
        return fl + f, out


class C3(Module):
    """Baseline CSP variant: fewer transition convolutions and no
    standalone batch norm at the merge."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, rng=None):
        super().__init__()
        if n < 1:
            raise SpecError(f"c3 repeat count must be >= 1, got {n}")
        ch = int(c2 * e)
        if ch < 1:
            raise SpecError(f"c3 hidden channels must be >= 1, got {ch}")
        self.cv1 = ConvBnAct(c1, ch, 1, 1, rng=rng)
        self.cv2 = ConvBnAct(c1, ch, 1, 1, rng=rng)
        self.cv3 = ConvBnAct(2 * ch, c2, 1, 1, rng=rng)
        self.m = [Bottleneck(ch, ch, shortcut, 1.0, rng=rng) for _ in range(n)]

    def forward(self, x):
        y1 = self.cv1(x)
        for b in self.m:
            y1 = b(y1)
        return self.cv3(T.concat_channels([y1, self.cv2(x)]))

    def out_shape(self, s):
        t = self.cv1.out_shape(s)
        return self.cv3.out_shape((t[0], 2 * t[1], t[2], t[3]))

    def flops(self, s):
        fl, t = self.cv1.flops(s)
        for b in self.m:
            f, t = b.flops(t)
            fl += f
        f, _ = self.cv2.flops(s)
        fl += f
        f, out = self.cv3.flops((t[0], 2 * t[1], t[2], t[3]))
        return fl + f, out


class SPP(Module):
    """Spatial pyramid pooling over stride-1 'same' max pools."""

    def __init__(self, c1, c2, kernels=(5, 9, 13), rng=None):
        super().__init__()
        ch = c1 // 2
        self.cv1 = ConvBnAct(c1, ch, 1, 1, rng=rng)
        self.pools = [MaxPool2d(k, 1) for k in kernels]
        self.cv2 = ConvBnAct(ch * (len(kernels) + 1), c2, 1, 1, rng=rng)

    def forward(self, x):
        y = self.cv1(x)
        return self.cv2(T.concat_channels([y] + [p(y) for p in self.pools]))

    def out_shape(self, s):
        t = self.cv1.out_shape(s)
        return self.cv2.out_shape((t[0], t[1] * (len(self.pools) + 1), t[2], t[3]))

    def flops(self, s):
        fl, t = self.cv1.flops(s)
        for p in self.pools:
            f, _ = p.flops(t)
            fl += f
        f, out = self.cv2.flops((t[0], t[1] * (len(self.pools) + 1), t[2], t[3]))
        return fl + f, out


# leaf kinds tallied by the model-layer counter; pure data movement
# (concat, residual add, parity slicing) computes nothing and counts zero
COUNTED_LEAVES = (Conv2d, DepthwiseConv2d, BatchNorm2d, SiLU, MaxPool2d,
                  Upsample2x)


def count_leaf_modules(module):
    return sum(1 for _, m in module.named_modules()
               if isinstance(m, COUNTED_LEAVES))
