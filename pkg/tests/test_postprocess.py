"""Decode and NMS against independent scalar and brute-force oracles."""

import math

import numpy as np
import pytest

from pvdet.postprocess import (Detection, decode, format_detection_record,
                               iou, iou_matrix, nms, parse_detection_record)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_decode_oracle(raw, anchors, stride, conf_thr):
    """Per-cell scalar re-implementation of the decode contract."""
    a = len(anchors)
    per = raw.shape[0] // a
    nc = per - 5
    s1, s2 = raw.shape[1], raw.shape[2]
    dets = []
    for ai in range(a):
        for cy in range(s1):
            for cx in range(s2):
                vals = [raw[ai * per + k, cy, cx] for k in range(per)]
                obj = sig(vals[4])
                probs = [sig(v) for v in vals[5:]]
                best = max(range(nc), key=lambda i: probs[i])
                conf = obj * probs[best]
                if conf >= conf_thr:
                    bx = (2 * sig(vals[0]) - 0.5 + cx) * stride
                    by = (2 * sig(vals[1]) - 0.5 + cy) * stride
                    bw = (2 * sig(vals[2])) ** 2 * anchors[ai][0]
                    bh = (2 * sig(vals[3])) ** 2 * anchors[ai][1]
                    dets.append((best, conf, bx, by, bw, bh))
    return dets


def brute_force_nms(dets, thr):
    """Exhaustive per-candidate suppression scan."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].cx, dets[i].cy))
    keep = []
    for i in order:
        suppressed = False
        for k in keep:
            if dets[k].class_id == dets[i].class_id:
                if iou(dets[k].box(), dets[i].box()) >= thr:
                    suppressed = True
                    break
        if not suppressed:
            keep.append(i)
    return [dets[i] for i in keep]


class TestDecode:
    def test_sigma_zero_centers(self):
        raw = np.zeros((1 * 10, 3, 3), np.float32)
        raw[4] = 10.0   # objectness ~ 1
        raw[5] = 10.0   # class 0 ~ 1
        dets = decode(raw, [(16.0, 16.0)], stride=8, conf_threshold=0.5)
        d = next(x for x in dets if (x.cx, x.cy) == (4.0, 4.0))
        assert d.class_id == 0
        # t_w = 0 decodes to the anchor extent exactly
        assert d.w == 16.0 and d.h == 16.0

    def test_matches_scalar_oracle_random_heads(self):
        rng = np.random.default_rng(0)
        anchors = [(10.0, 14.0), (24.0, 12.0), (18.0, 40.0)]
        for trial in range(20):
            raw = rng.standard_normal((3 * 10, 3, 3)).astype(np.float32) * 2
            dets = decode(raw, anchors, stride=8, conf_threshold=0.2)
            oracle = scalar_decode_oracle(raw.astype(np.float64), anchors, 8, 0.2)
            assert len(dets) == len(oracle)
            got = np.array(sorted((d.class_id, d.cx, d.cy, d.confidence,
                                   d.w, d.h) for d in dets))
            want = np.array(sorted((c, bx, by, conf, bw, bh)
                            for c, conf, bx, by, bw, bh in oracle))
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_monotone_in_objectness(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((30, 4, 4)).astype(np.float32)
        anchors = [(8.0, 8.0), (16.0, 16.0), (32.0, 32.0)]
        base = decode(raw, anchors, 8, 0.3)
        boosted = raw.copy()
        for a in range(3):
            boosted[a * 10 + 4] += 2.0
        more = decode(boosted, anchors, 8, 0.3)
        base_keys = {(d.class_id, round(d.cx, 3), round(d.cy, 3)) for d in base}
        more_keys = {(d.class_id, round(d.cx, 3), round(d.cy, 3)) for d in more}
        assert base_keys <= more_keys

    def test_stride4_center_granularity(self):
        raw = np.zeros((10, 4, 4), np.float32)
        raw[4] = raw[5] = 10.0
        dets = decode(raw, [(8.0, 8.0)], stride=4, conf_threshold=0.5)
        xs = sorted({d.cx for d in dets})
        assert xs == [2.0, 6.0, 10.0, 14.0]   # 4-pixel grid granularity


class TestIoU:
    def test_identical(self):
        b = np.array([3.0, 4.0, 5.0, 6.0])
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(np.array([0, 0, 2, 2.0]), np.array([10, 10, 2, 2.0])) == 0.0

    def test_half_overlap_unit_squares(self):
        # unit squares with corners at (0,0) and (0.5,0): IoU = 1/3
        a = np.array([0.5, 0.5, 1.0, 1.0])
        b = np.array([1.0, 0.5, 1.0, 1.0])
        assert abs(iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_symmetric_and_self_unit(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = np.abs(rng.standard_normal(4)) + 0.1
            b = np.abs(rng.standard_normal(4)) + 0.1
            assert abs(iou(a, b) - iou(b, a)) < 1e-15
            assert iou(a, a) == 1.0

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(3)
        A = np.abs(rng.standard_normal((6, 4))) * 5 + 0.2
        B = np.abs(rng.standard_normal((4, 4))) * 5 + 0.2
        m = iou_matrix(A, B)
        for i in range(6):
            for j in range(4):
                assert abs(m[i, j] - iou(A[i], B[j])) < 1e-12


def random_dets(rng, n, classes=3):
    out = []
    for _ in range(n):
        out.append(Detection(int(rng.integers(classes)),
                             float(rng.random()),
                             float(rng.uniform(10, 90)),
                             float(rng.uniform(10, 90)),
                             float(rng.uniform(4, 40)),
                             float(rng.uniform(4, 40))))
    return out


class TestNMS:
    def test_single_detection_unchanged(self):
        d = [Detection(0, 0.7, 10, 10, 5, 5)]
        assert nms(d) == d

    def test_identical_boxes_keep_higher(self):
        d = [Detection(0, 0.9, 10, 10, 6, 6), Detection(0, 0.8, 10, 10, 6, 6)]
        kept = nms(d, 0.45)
        assert len(kept) == 1 and kept[0].confidence == 0.9

    def test_empty(self):
        assert nms([]) == []

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(200):
            dets = random_dets(rng, int(rng.integers(1, 21)))
            thr = float(rng.uniform(0.2, 0.7))
            got = nms(dets, thr)
            want = brute_force_nms(dets, thr)
            assert [id(d) for d in got] == [id(d) for d in want]

    def test_output_subset_and_iou_property(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            dets = random_dets(rng, 15)
            kept = nms(dets, 0.45)
            assert all(d in dets for d in kept)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.class_id == b.class_id:
                        assert iou(a.box(), b.box()) < 0.45

    def test_raising_threshold_never_shrinks(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            dets = random_dets(rng, 12)
            lo = nms(dets, 0.3)
            hi = nms(dets, 0.6)
            assert {id(d) for d in lo} <= {id(d) for d in hi}

    def test_confidence_descending_output(self):
        rng = np.random.default_rng(7)
        dets = random_dets(rng, 18)
        kept = nms(dets, 0.5)
        confs = [d.confidence for d in kept]
        assert confs == sorted(confs, reverse=True)


class TestRecords:
    def test_roundtrip(self):
        d = Detection(3, 0.912345, 12.0, 34.5, 5.0, 20.25)
        line = format_detection_record("img001", "scratch", d)
        assert line == "img001 scratch 0.912345 12 34.5 5 20.25"
        image_id, cls, parsed = parse_detection_record(line)
        assert image_id == "img001" and cls == "scratch"
        assert parsed.confidence == pytest.approx(0.912345)
        assert (parsed.cx, parsed.cy, parsed.w, parsed.h) == (12.0, 34.5, 5.0, 20.25)
