"""Model-zoo contracts: variant structure, counters, checkpoints."""

import numpy as np
import pytest

from pvdet.blocks import C3, BottleneckCSP, GhostConv
from pvdet.errors import CheckpointError, SpecError
from pvdet.models import (VARIANT_NAMES, Model, ModelVariant, build,
                          count_flops, count_modules, count_params,
                          default_anchors, graph_spec, load_checkpoint,
                          read_checkpoint_tensors, save_checkpoint,
                          tiny_variant)
from pvdet.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def default_models():
    return {name: build(ModelVariant(name)) for name in VARIANT_NAMES}


class TestVariants:
    def test_head_strides_per_name(self):
        assert ModelVariant("yolov5s").head_strides == (8, 16, 32)
        assert ModelVariant("yolov5-1").head_strides == (8, 16, 32)
        assert ModelVariant("yolov5-2").head_strides == (4, 8, 16, 32)
        assert ModelVariant("gbh").head_strides == (4, 8, 16, 32)

    def test_wrong_strides_rejected(self):
        with pytest.raises(SpecError):
            ModelVariant("yolov5s", head_strides=(4, 8, 16, 32))

    def test_unknown_name_rejected(self):
        with pytest.raises(SpecError):
            ModelVariant("yolov9")

    def test_block_kinds(self, default_models):
        kinds = {
            name: {type(m).__name__ for _, m in
                   default_models[name].named_modules()}
            for name in VARIANT_NAMES
        }
        assert "C3" in kinds["yolov5s"] and "BottleneckCSP" not in kinds["yolov5s"]
        for name in ("yolov5-1", "yolov5-2", "gbh"):
            assert "BottleneckCSP" in kinds[name] and "C3" not in kinds[name]
        assert "GhostConv" in kinds["gbh"]
        for name in ("yolov5s", "yolov5-1", "yolov5-2"):
            assert "GhostConv" not in kinds[name]

    def test_ghost_nodes_are_the_stride1_neck_convs(self):
        spec, _, backbone_len = graph_spec(ModelVariant("gbh"))
        ghosts = [ls for ls in spec if ls.kind == "ghost"]
        assert len(ghosts) == 3
        assert all(ls.args.get("s", 1) == 1 for ls in ghosts)
        assert all(spec.index(ls) >= backbone_len for ls in ghosts)
        # the 4-head non-ghost twin has conv nodes in those positions
        spec2, _, _ = graph_spec(ModelVariant("yolov5-2"))
        assert sum(ls.kind == "conv" and ls.args.get("s", 1) == 1
                   for ls in spec2) == 3


class TestCounters:
    def test_param_orderings(self, default_models):
        p = {n: count_params(default_models[n]) for n in VARIANT_NAMES}
        assert p["yolov5s"] < p["yolov5-1"] < p["yolov5-2"]
        assert p["gbh"] < p["yolov5-2"]

    def test_module_count_orderings(self, default_models):
        m = {n: count_modules(default_models[n]) for n in VARIANT_NAMES}
        assert m["yolov5s"] < m["gbh"] < m["yolov5-2"]
        assert m["yolov5-2"] > m["yolov5s"]

    def test_single_conv_flops_formula(self):
        from pvdet.blocks import Conv2d
        conv = Conv2d(16, 32, 3, 1, rng=np.random.default_rng(0))
        fl, out = conv.flops((1, 16, 20, 20))
        assert fl == 2 * 9 * 16 * 32 * 20 * 20
        assert out == (1, 32, 20, 20)

    def test_flops_counted_at_input_size(self, default_models):
        m = default_models["yolov5s"]
        assert count_flops(m, 480) < count_flops(m, 960)


class TestForward:
    def test_gbh_grid_sizes_at_960(self, default_models):
        assert default_models["gbh"].head_shapes(960) == \
            [(240, 240), (120, 120), (60, 60), (30, 30)]
        assert default_models["yolov5s"].head_shapes(960) == \
            [(120, 120), (60, 60), (30, 30)]

    def test_head_channel_contract(self):
        model = build(tiny_variant("gbh"), seed=0).eval()
        x = np.random.default_rng(0).standard_normal(
            (2, 3, 192, 192)).astype(np.float32)
        with no_grad():
            outs = model(x)
        assert [o.shape for o in outs] == [
            (2, 30, 48, 48), (2, 30, 24, 24), (2, 30, 12, 12), (2, 30, 6, 6)]

    def test_forward_deterministic(self):
        model = build(tiny_variant("yolov5-1"), seed=1).eval()
        x = np.random.default_rng(1).standard_normal(
            (1, 3, 192, 192)).astype(np.float32)
        with no_grad():
            a = [o.data.copy() for o in model(x)]
            b = [o.data.copy() for o in model(x)]
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_ghost_swap_preserves_output_shapes(self):
        m2 = build(tiny_variant("yolov5-2"), seed=0).eval()
        mg = build(tiny_variant("gbh"), seed=0).eval()
        x = np.random.default_rng(2).standard_normal(
            (1, 3, 192, 192)).astype(np.float32)
        with no_grad():
            s2 = [o.shape for o in m2(x)]
            sg = [o.shape for o in mg(x)]
        assert s2 == sg

    def test_zero_width_rejected(self):
        with pytest.raises(SpecError):
            build(ModelVariant("gbh", width_multiple=0.0))


class TestCheckpoint:
    def test_roundtrip_bitexact(self, tmp_path):
        model = build(tiny_variant("gbh"), seed=3).eval()
        x = np.random.default_rng(0).standard_normal(
            (1, 3, 192, 192)).astype(np.float32)
        with no_grad():
            before = [o.data.copy() for o in model(x)]
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        with no_grad():
            after = [o.data.copy() for o in loaded(x)]
        assert all(np.array_equal(u, v) for u, v in zip(before, after))

    def test_anchors_persist(self, tmp_path):
        anchors = [a * 1.5 for a in default_anchors((4, 8, 16, 32))]
        model = build(tiny_variant("gbh"), anchors=anchors, seed=0)
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        for a, b in zip(model.anchors, loaded.anchors):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        model = build(tiny_variant("yolov5s"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        model = build(tiny_variant("yolov5s"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        p.write_bytes(p.read_bytes()[:-64])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = build(tiny_variant("yolov5s"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)

    def test_variant_mismatch_rejected(self, tmp_path):
        model = build(tiny_variant("gbh"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        with pytest.raises(CheckpointError, match="variant"):
            load_checkpoint(p, expect_variant="yolov5s")

    def test_unknown_tensor_rejected(self, tmp_path):
        import struct
        model = build(tiny_variant("yolov5s"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = bytearray(p.read_bytes())
        # bump the tensor count and append a rogue tensor
        count = struct.unpack("<I", raw[8:12])[0]
        raw[8:12] = struct.pack("<I", count + 1)
        name = b"param.rogue"
        raw += struct.pack("<H", len(name)) + name
        raw += struct.pack("<BB", 0, 1) + struct.pack("<I", 1)
        raw += np.zeros(1, "<f4").tobytes()
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="unknown tensor"):
            load_checkpoint(p)

    def test_format_layout(self, tmp_path):
        model = build(tiny_variant("yolov5s"), seed=0)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        raw = p.read_bytes()
        assert raw[:4] == b"GBHW"
        assert int.from_bytes(raw[4:8], "little") == 1
        tensors = read_checkpoint_tensors(p)
        assert "meta.identity" in tensors
        total = sum(a.size for a in tensors.values())
        n_params = count_params(model)
        assert total > n_params   # buffers and metadata also stored
