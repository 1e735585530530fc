"""The four network variants, their graphs, cost counters and checkpoints.

Variants (ablation ladder):
  yolov5s   baseline, C3 blocks, heads at strides 8/16/32
  yolov5-1  C3 replaced by BottleneckCSP everywhere
  yolov5-2  adds the tiny-target head: strides 4/8/16/32, the extra
            top-down level taps the stride-4 backbone stage
  gbh       yolov5-2 with every stride-preserving standard convolution in
            the neck replaced by a ghost convolution (head output
            convolutions stay standard)
"""

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (C3, SPP, BottleneckCSP, Conv2d, ConvBnAct, Focus,
                     GhostConv, Module, Upsample2x, count_leaf_modules)
from .errors import CheckpointError, SpecError
from .tensor import Tensor

VARIANT_NAMES = ("yolov5s", "yolov5-1", "yolov5-2", "gbh")

ANCHORS_PER_HEAD = 3

# Fallback anchor priors, (w, h) in input pixels per stride, shaped after
# the defect-size statistics of electroluminescence panel crops (thin
# scratch-like verticals for the tiny head, large blobs for the coarse
# heads). Adaptive anchor computation should replace these for any new
# corpus.
FALLBACK_ANCHORS = {
    4: ((6.0, 48.0), (8.0, 64.0), (16.0, 16.0)),
    8: ((64.0, 64.0), (48.0, 120.0), (120.0, 56.0)),
    16: ((160.0, 200.0), (200.0, 320.0), (320.0, 200.0)),
    32: ((360.0, 360.0), (400.0, 640.0), (576.0, 768.0)),
}


def default_anchors(strides):
    return [np.array(FALLBACK_ANCHORS[s], dtype=np.float32) for s in strides]


@dataclass(frozen=True)
class ModelVariant:
    name: str
    depth_multiple: float = 1.0 / 3.0
    width_multiple: float = 0.5
    input_size: int = 960
    num_classes: int = 5
    head_strides: tuple = field(default=None)

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise SpecError(f"unknown variant {self.name!r}, expected one of "
                            f"{VARIANT_NAMES}")
        expected = (8, 16, 32) if self.name in ("yolov5s", "yolov5-1") \
            else (4, 8, 16, 32)
        if self.head_strides is None:
            object.__setattr__(self, "head_strides", expected)
        elif tuple(self.head_strides) != expected:
            raise SpecError(f"{self.name} must use head strides {expected}")

    @property
    def csp_kind(self):
        return "c3" if self.name == "yolov5s" else "csp"

    @property
    def use_ghost(self):
        return self.name == "gbh"


def variant(name, **overrides):
    return ModelVariant(name, **overrides)


def tiny_variant(name):
    """Desk-scale profile: width 1/8, depth 1/3, 192-pixel input."""
    return ModelVariant(name, depth_multiple=1.0 / 3.0, width_multiple=0.125,
                        input_size=192)


def make_divisible(x, divisor=8):
    return max(divisor, int(math.ceil(x / divisor) * divisor))


@dataclass(frozen=True)
class LayerSpec:
    kind: str            # focus | conv | ghost | csp | spp | upsample | concat
    frm: object          # producer index, or list of indices for concat
    args: dict
    repeats: int = 1


def _backbone_spec():
    return [
        LayerSpec("focus", -1, dict(c=64, k=3)),            # 0  stride 2
        LayerSpec("conv", -1, dict(c=128, k=3, s=2)),       # 1  stride 4
        LayerSpec("csp", -1, dict(c=128), repeats=3),       # 2  P2 tap
        LayerSpec("conv", -1, dict(c=256, k=3, s=2)),       # 3  stride 8
        LayerSpec("csp", -1, dict(c=256), repeats=9),       # 4  P3 tap
        LayerSpec("conv", -1, dict(c=512, k=3, s=2)),       # 5  stride 16
        LayerSpec("csp", -1, dict(c=512), repeats=9),       # 6  P4 tap
        LayerSpec("conv", -1, dict(c=1024, k=3, s=2)),      # 7  stride 32
        LayerSpec("spp", -1, dict(c=1024)),                 # 8
        LayerSpec("csp", -1, dict(c=1024, shortcut=False), repeats=3),  # 9
    ]


def _head3_spec():
    # FPN top-down then PAN bottom-up; taps P3/P4/P5
    return [
        LayerSpec("conv", -1, dict(c=512, k=1, s=1)),       # 10 lateral
        LayerSpec("upsample", -1, {}),                      # 11
        LayerSpec("concat", [-1, 6], {}),                   # 12
        LayerSpec("csp", -1, dict(c=512, shortcut=False), repeats=3),   # 13
        LayerSpec("conv", -1, dict(c=256, k=1, s=1)),       # 14 lateral
        LayerSpec("upsample", -1, {}),                      # 15
        LayerSpec("concat", [-1, 4], {}),                   # 16
        LayerSpec("csp", -1, dict(c=256, shortcut=False), repeats=3),   # 17 P3
        LayerSpec("conv", -1, dict(c=256, k=3, s=2)),       # 18
        LayerSpec("concat", [-1, 14], {}),                  # 19
        LayerSpec("csp", -1, dict(c=512, shortcut=False), repeats=3),   # 20 P4
        LayerSpec("conv", -1, dict(c=512, k=3, s=2)),       # 21
        LayerSpec("concat", [-1, 10], {}),                  # 22
        LayerSpec("csp", -1, dict(c=1024, shortcut=False), repeats=3),  # 23 P5
    ], [17, 20, 23]


def _head4_spec():
    # extra top-down level down to the stride-4 backbone stage (layer 2)
    return [
        LayerSpec("conv", -1, dict(c=512, k=1, s=1)),       # 10 lateral
        LayerSpec("upsample", -1, {}),                      # 11
        LayerSpec("concat", [-1, 6], {}),                   # 12
        LayerSpec("csp", -1, dict(c=512, shortcut=False), repeats=3),   # 13
        LayerSpec("conv", -1, dict(c=256, k=1, s=1)),       # 14 lateral
        LayerSpec("upsample", -1, {}),                      # 15
        LayerSpec("concat", [-1, 4], {}),                   # 16
        LayerSpec("csp", -1, dict(c=256, shortcut=False), repeats=3),   # 17
        LayerSpec("conv", -1, dict(c=128, k=1, s=1)),       # 18 lateral
        LayerSpec("upsample", -1, {}),                      # 19
        LayerSpec("concat", [-1, 2], {}),                   # 20
        LayerSpec("csp", -1, dict(c=128, shortcut=False), repeats=3),   # 21 P2
        LayerSpec("conv", -1, dict(c=128, k=3, s=2)),       # 22
        LayerSpec("concat", [-1, 18], {}),                  # 23
        LayerSpec("csp", -1, dict(c=256, shortcut=False), repeats=3),   # 24 P3
        LayerSpec("conv", -1, dict(c=256, k=3, s=2)),       # 25
        LayerSpec("concat", [-1, 14], {}),                  # 26
        LayerSpec("csp", -1, dict(c=512, shortcut=False), repeats=3),   # 27 P4
        LayerSpec("conv", -1, dict(c=512, k=3, s=2)),       # 28
        LayerSpec("concat", [-1, 10], {}),                  # 29
        LayerSpec("csp", -1, dict(c=1024, shortcut=False), repeats=3),  # 30 P5
    ], [21, 24, 27, 30]


def graph_spec(variant):
    spec = _backbone_spec()
    head, taps = _head3_spec() if len(variant.head_strides) == 3 else _head4_spec()
    backbone_len = len(spec)
    spec = spec + head
    if variant.use_ghost:
        # every stride-preserving standard convolution node in backbone and
        # neck becomes a ghost convolution; the backbone graph has none at
        # stride 1 and head output convolutions are not part of this graph
        spec = [
            LayerSpec("ghost", ls.frm, ls.args, ls.repeats)
            if ls.kind == "conv" and ls.args.get("s", 1) == 1 else ls
            for ls in spec
        ]
    return spec, taps, backbone_len


class _ConcatNode(Module):
    def forward(self, xs):
        return T.concat_channels(xs)

    def out_shape(self, shapes):
        b, _, h, w = shapes[0]
        return (b, sum(s[1] for s in shapes), h, w)

    def flops(self, shapes):
        return 0, self.out_shape(shapes)


class Model(Module):
    """Executable graph of one variant plus its detection heads."""

    def __init__(self, variant, anchors=None, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.variant = variant
        spec, taps, _ = graph_spec(variant)
        self.spec = spec
        self.taps = taps
        self.strides = tuple(variant.head_strides)
        self.num_classes = variant.num_classes

        wm, dm = variant.width_multiple, variant.depth_multiple
        layers = []
        out_ch = []   # per-node output channels
        prev_ch = 3   # the input image
        for ls in spec:
            if isinstance(ls.frm, int):
                cin = prev_ch if ls.frm == -1 else out_ch[ls.frm]
            else:
                cin = None
            if ls.kind == "concat":
                node = _ConcatNode()
                c = sum(prev_ch if i == -1 else out_ch[i] for i in ls.frm)
            elif ls.kind == "focus":
                c = make_divisible(ls.args["c"] * wm)
                node = Focus(3, c, ls.args.get("k", 3), rng=rng)
            elif ls.kind == "conv":
                c = make_divisible(ls.args["c"] * wm)
                node = ConvBnAct(cin, c, ls.args.get("k", 1),
                                 ls.args.get("s", 1), rng=rng)
            elif ls.kind == "ghost":
                c = make_divisible(ls.args["c"] * wm)
                node = GhostConv(cin, c, ls.args.get("k", 1), 2, 3,
                                 ls.args.get("s", 1), rng=rng)
            elif ls.kind == "csp":
                c = make_divisible(ls.args["c"] * wm)
                n = max(round(ls.repeats * dm), 1)
                cls = C3 if variant.csp_kind == "c3" else BottleneckCSP
                node = cls(cin, c, n, ls.args.get("shortcut", True), rng=rng)
            elif ls.kind == "spp":
                c = make_divisible(ls.args["c"] * wm)
                node = SPP(cin, c, rng=rng)
            elif ls.kind == "upsample":
                node = Upsample2x()
                c = cin
            else:
                raise SpecError(f"unknown layer kind {ls.kind!r}")
            layers.append(node)
            out_ch.append(c)
            prev_ch = c
        self.layers = layers
        self._out_ch = out_ch

        # detection heads: one 1x1 conv per tapped scale; objectness and
        # class logits start strongly negative so early training is quiet
        per_anchor = 5 + variant.num_classes
        self.heads = []
        for tap in taps:
            head = Conv2d(out_ch[tap], ANCHORS_PER_HEAD * per_anchor, 1,
                          bias=True, rng=rng, bias_fill=0.0)
            bias = head.bias.data.reshape(ANCHORS_PER_HEAD, per_anchor)
            bias[:, 4:] = -4.0
            self.heads.append(head)

        if anchors is None:
            anchors = default_anchors(self.strides)
        if len(anchors) != len(self.strides):
            raise SpecError(
                f"expected {len(self.strides)} anchor sets, got {len(anchors)}")
        for i, a in enumerate(anchors):
            a = np.asarray(a, dtype=np.float32)
            if a.shape != (ANCHORS_PER_HEAD, 2):
                raise SpecError(f"anchor set {i} must be "
                                f"({ANCHORS_PER_HEAD}, 2), got {a.shape}")
            self.register_buffer(f"anchors_{i}", a)

        # keep only node outputs later layers reference
        needed = set(self.taps)
        for ls in spec:
            for i in (ls.frm if isinstance(ls.frm, list) else [ls.frm]):
                if i >= 0:
                    needed.add(i)
        self._keep = needed

    @property
    def anchors(self):
        return [getattr(self, f"anchors_{i}") for i in range(len(self.strides))]

    def forward(self, x):
        """Raw per-head outputs, fine to coarse: B x (A*(5+C)) x S x S."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        outputs = {}
        prev = x
        for idx, (ls, node) in enumerate(zip(self.spec, self.layers)):
            if ls.kind == "concat":
                inp = [prev if i == -1 else outputs[i] for i in ls.frm]
            else:
                inp = prev if ls.frm == -1 else outputs[ls.frm]
            prev = node(inp)
            if idx in self._keep:
                outputs[idx] = prev
        return [head(outputs[tap]) for head, tap in zip(self.heads, self.taps)]

    def head_shapes(self, input_size=None):
        s = input_size or self.variant.input_size
        return [(s // st, s // st) for st in self.strides]

    def flops(self, input_size=None, batch=1):
        s = input_size or self.variant.input_size
        shapes = {}
        prev = (batch, 3, s, s)
        total = 0
        for idx, (ls, node) in enumerate(zip(self.spec, self.layers)):
            if ls.kind == "concat":
                inp = [prev if i == -1 else shapes[i] for i in ls.frm]
            else:
                inp = prev if ls.frm == -1 else shapes[ls.frm]
            f, prev = node.flops(inp)
            total += f
            shapes[idx] = prev
        for head, tap in zip(self.heads, self.taps):
            f, _ = head.flops(shapes[tap])
            total += f
        return total


def build(variant, anchors=None, seed=0):
    if isinstance(variant, str):
        variant = ModelVariant(variant)
    if variant.width_multiple <= 0 or variant.depth_multiple <= 0:
        raise SpecError(
            f"multiples must be positive, got width {variant.width_multiple} "
            f"depth {variant.depth_multiple}")
    return Model(variant, anchors=anchors, seed=seed)


def calibrate_batchnorm(model, x):
    """Freeze realistic running statistics from one momentum-1 training
    forward, then switch to inference mode.

    Useful before gradient checks: inference-mode batch norm is a constant
    affine map, so the checked function stays smooth while activations
    keep training-like scales.
    """
    from .blocks import BatchNorm2d

    saved = []
    for _, m in model.named_modules():
        if isinstance(m, BatchNorm2d):
            saved.append((m, m.momentum))
            m.momentum = 1.0
    model.train()
    with T.no_grad():
        model(x if isinstance(x, Tensor) else Tensor(x))
    for m, mom in saved:
        m.momentum = mom
    return model.eval()


def count_params(model):
    """Learnable scalars (conv kernels, biases, batch-norm affine)."""
    return sum(p.size for p in model.parameters())


def count_modules(model):
    """Computational leaf layers.

    Counts every convolution, batch norm, activation, pool and upsample
    node; pure data movement (concatenation, residual add, parity slicing)
    computes nothing and is not counted.
    """
    return count_leaf_modules(model)


def count_flops(model, input_size=None):
    """Multiply-accumulate cost (2 flops per MAC) for one image."""
    return model.flops(input_size)


# ---------------------------------------------------------------------------
# checkpoint format: magic "GBHW", u32 version=1, u32 tensor count, then per
# tensor u16 name length, UTF-8 name, u8 dtype code (0 = float32), u8 ndim,
# u32 dims, raw little-endian payload; all integers little-endian

_MAGIC = b"GBHW"
_VERSION = 1

_VARIANT_ORDINAL = {name: i for i, name in enumerate(VARIANT_NAMES)}


def _state_tensors(model):
    items = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    items += [(f"buffer.{n}", b) for n, b in model.named_buffers()]
    v = model.variant
    meta = np.array([_VARIANT_ORDINAL[v.name], v.num_classes, v.input_size],
                    dtype=np.float32)
    multiples = np.array([v.depth_multiple, v.width_multiple], dtype=np.float32)
    return [("meta.identity", meta), ("meta.multiples", multiples)] + items


def save_checkpoint(model, path):
    buf = io.BytesIO()
    tensors = _state_tensors(model)
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(tensors)))
    for name, arr in tensors:
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"tensor {name} is {arr.dtype}, checkpoints are float32 only")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_checkpoint_tensors(path):
    """Parse the whole file into {name: array}; raises before any model is
    touched so a bad file can never leave a partially loaded model."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError("bad magic bytes, not a model checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype"))
            if dtype_code != 0:
                raise CheckpointError(
                    f"tensor {name}: unknown dtype code {dtype_code}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            payload = _read_exact(fh, 4 * int(np.prod(dims, dtype=np.int64)),
                                  f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path, expect_variant=None):
    tensors = read_checkpoint_tensors(path)
    try:
        ident = tensors.pop("meta.identity")
        multiples = tensors.pop("meta.multiples")
    except KeyError as e:
        raise CheckpointError(f"missing metadata tensor {e}")
    ordinal = int(ident[0])
    if not 0 <= ordinal < len(VARIANT_NAMES):
        raise CheckpointError(f"unknown variant ordinal {ordinal}")
    name = VARIANT_NAMES[ordinal]
    if expect_variant is not None and name != expect_variant:
        raise CheckpointError(
            f"checkpoint holds variant {name!r}, expected {expect_variant!r}")
    var = ModelVariant(name, depth_multiple=float(multiples[0]),
                       width_multiple=float(multiples[1]),
                       input_size=int(ident[2]), num_classes=int(ident[1]))
    model = Model(var, seed=0)
    expected = dict((f"param.{n}", p) for n, p in model.named_parameters())
    for n, _ in model.named_buffers():
        expected[f"buffer.{n}"] = None
    unknown = set(tensors) - set(expected)
    missing = set(expected) - set(tensors)
    if unknown:
        raise CheckpointError(f"unknown tensor names: {sorted(unknown)[:5]}")
    if missing:
        raise CheckpointError(f"missing tensor names: {sorted(missing)[:5]}")
    for name_, p in model.named_parameters():
        arr = tensors[f"param.{name_}"]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor param.{name_}: shape {arr.shape} != {p.data.shape}")
        p.data = arr
    for mod_name, m in model.named_modules():
        for bname in m._buffer_names:
            full = f"buffer.{mod_name}.{bname}" if mod_name else f"buffer.{bname}"
            arr = tensors[full]
            cur = getattr(m, bname)
            if arr.shape != cur.shape:
                raise CheckpointError(
                    f"tensor {full}: shape {arr.shape} != {cur.shape}")
            setattr(m, bname, arr)
    return model.eval()
