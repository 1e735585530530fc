"""Matching, precision/recall, AP and report assembly."""

import numpy as np
import pytest

from pvdet.metrics import (ConfusionCounts, Evaluator, average_precision,
                           format_report, map_over_classes, match_detections,
                           precision_recall, pr_curves_to_csv, report_to_csv)
from pvdet.postprocess import Detection, iou


def matching_oracle(dets, gts, thr):
    """Plain re-statement of the greedy protocol for cross-checking."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].cx, dets[i].cy))
    taken = set()
    result = {}
    for i in order:
        d = dets[i]
        candidates = [(iou(d.box(), gts[g, 1:5]), g) for g in range(len(gts))
                      if g not in taken and int(gts[g, 0]) == d.class_id]
        candidates.sort(key=lambda t: -t[0])
        if candidates and candidates[0][0] >= thr:
            result[i] = True
            taken.add(candidates[0][1])
        else:
            result[i] = False
    return order, result


def random_scene(rng, n_dets, n_gts, classes=3):
    dets = [Detection(int(rng.integers(classes)), float(rng.random()),
                      float(rng.uniform(10, 90)), float(rng.uniform(10, 90)),
                      float(rng.uniform(5, 30)), float(rng.uniform(5, 30)))
            for _ in range(n_dets)]
    gts = np.column_stack([
        rng.integers(0, classes, n_gts),
        rng.uniform(10, 90, n_gts), rng.uniform(10, 90, n_gts),
        rng.uniform(5, 30, n_gts), rng.uniform(5, 30, n_gts)])
    return dets, gts


class TestMatching:
    def test_exact_hit(self):
        gts = np.array([[0, 50.0, 50.0, 20.0, 20.0]])
        dets = [Detection(0, 0.9, 50.0, 50.0, 20.0, 20.0)]
        _, flags, matched = match_detections(dets, gts)
        assert flags.tolist() == [True] and matched.tolist() == [True]

    def test_single_use_gt(self):
        gts = np.array([[0, 50.0, 50.0, 20.0, 20.0]])
        dets = [Detection(0, 0.9, 50.0, 50.0, 20.0, 20.0),
                Detection(0, 0.8, 51.0, 50.0, 20.0, 20.0)]
        order, flags, _ = match_detections(dets, gts)
        assert order == [0, 1]
        assert flags.tolist() == [True, False]

    def test_class_exactness(self):
        gts = np.array([[1, 50.0, 50.0, 20.0, 20.0]])
        dets = [Detection(0, 0.99, 50.0, 50.0, 20.0, 20.0)]
        _, flags, matched = match_detections(dets, gts)
        assert flags.tolist() == [False] and matched.tolist() == [False]

    def test_matches_oracle_on_random_scenes(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            dets, gts = random_scene(rng, 15, 6)
            order, flags, _ = match_detections(dets, gts, 0.5)
            o_order, o_result = matching_oracle(dets, gts, 0.5)
            assert order == o_order
            assert [bool(f) for f in flags] == [o_result[i] for i in order]

    def test_confusion_identity_tp_plus_fn(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            dets, gts = random_scene(rng, 12, 8)
            _, flags, matched = match_detections(dets, gts, 0.5)
            assert matched.sum() == flags.sum()
            assert matched.sum() + (~matched).sum() == len(gts)


class TestPrecisionRecall:
    def test_epoch500_recall_scale(self):
        p, r, flag = precision_recall(ConfusionCounts(964, 0, 36))
        assert r == 0.964 and not flag

    def test_exact_ratios(self):
        p, r, _ = precision_recall(ConfusionCounts(3, 1, 1))
        assert (p, r) == (0.75, 0.75)

    def test_degenerate_flagged(self):
        p, r, flag = precision_recall(ConfusionCounts(0, 0, 0))
        assert (p, r) == (0.0, 0.0) and flag


class TestAveragePrecision:
    def test_all_tp_full_coverage(self):
        assert average_precision([True, True, True], 3) == 1.0

    def test_tp_then_fp(self):
        assert average_precision([True, False], 1) == 1.0

    def test_fp_then_tp(self):
        assert average_precision([False, True], 1) == 0.5

    def test_no_gt(self):
        assert average_precision([False, False], 0) == 0.0
        assert average_precision([], 0) is None

    def test_range_and_perfect_prefix(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(1, 25))
            flags = rng.random(n) < rng.random()
            ngt = int(flags.sum() + rng.integers(0, 5))
            if ngt == 0:
                continue
            ap = average_precision(flags, ngt)
            assert 0.0 <= ap <= 1.0
            if ap == 1.0:
                k = int(flags.sum())
                assert k == ngt and flags[:k].all()

    def test_monotone_confidence_transform_invariance(self):
        # AP consumes only the ranking, so any strictly monotone
        # transform of the confidences leaves it unchanged
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            conf = rng.random(n)
            flags = rng.random(n) < 0.5
            ngt = max(int(flags.sum()), 1)
            order = np.argsort(-conf)
            ap1 = average_precision(flags[order], ngt)
            conf2 = np.exp(5 * conf) + 3          # strictly monotone
            order2 = np.argsort(-conf2)
            ap2 = average_precision(flags[order2], ngt)
            assert ap1 == ap2

    def test_appending_lower_confidence_tp_duplicate_never_increases(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 20))
            flags = (rng.random(n) < 0.6).tolist()
            ngt = max(int(sum(flags)), 1)
            base = average_precision(flags, ngt)
            # a duplicate detection of an already-found object is an FP
            assert average_precision(flags + [False], ngt) <= base + 1e-12

    def test_map_mean(self):
        assert map_over_classes([1.0, 0.5]) == 0.75
        assert map_over_classes([1.0, None, 0.5]) == 0.75
        assert abs(map_over_classes([0.3, 0.4, 0.8]) - 0.5) < 1e-15


class TestEvaluatorReports:
    def build_eval(self, seed=0, images=6):
        rng = np.random.default_rng(seed)
        ev = Evaluator()
        for _ in range(images):
            dets, gts = random_scene(rng, 10, 5)
            ev.add_image(dets, gts)
        return ev

    def test_map_is_mean_of_class_aps(self):
        ev = self.build_eval()
        rep = ev.report()
        aps = [m.ap for m in rep.per_class.values() if m.ap is not None]
        assert abs(rep.map - sum(aps) / len(aps)) < 1e-12

    def test_map_recomputable_from_pr_curves(self):
        ev = self.build_eval(seed=5)
        rep = ev.report()
        for c, name in enumerate(ev.class_names):
            if name not in rep.per_class:
                continue
            curve = ev.pr_curve(c)
            ngt = rep.per_class[name].num_gt
            if not len(curve) or ngt == 0:
                continue
            prec, rec = curve[:, 1], curve[:, 2]
            env = np.maximum.accumulate(prec[::-1])[::-1]
            dr = np.diff(np.concatenate([[0.0], rec]))
            ap = float((env * dr).sum())
            assert abs(ap - rep.per_class[name].ap) < 1e-12

    def test_perfect_detector_map_one(self):
        ev = Evaluator()
        rng = np.random.default_rng(6)
        for _ in range(4):
            _, gts = random_scene(rng, 0, 4)
            dets = [Detection(int(c), 0.9, cx, cy, w, h)
                    for c, cx, cy, w, h in gts]
            ev.add_image(dets, gts)
        rep = ev.report()
        assert rep.map == 1.0 and rep.precision == 1.0 and rep.recall == 1.0

    def test_order_invariance_across_images(self):
        rng = np.random.default_rng(7)
        scenes = [random_scene(rng, 8, 4) for _ in range(5)]
        ev1, ev2 = Evaluator(), Evaluator()
        for dets, gts in scenes:
            ev1.add_image(dets, gts)
        for dets, gts in reversed(scenes):
            ev2.add_image(dets, gts)
        r1, r2 = ev1.report(), ev2.report()
        assert r1.map == r2.map
        assert r1.precision == r2.precision and r1.recall == r2.recall

    def test_csv_and_table_rendering(self):
        ev = self.build_eval(seed=8)
        rep = ev.report()
        table = format_report(rep)
        assert "mAP@0.50" in table
        csv_text = report_to_csv(rep)
        assert csv_text.startswith("class,ap,tp,fp,fn,precision,recall")
        assert "mAP" in csv_text
        curves = pr_curves_to_csv(ev)
        assert curves.startswith("class,confidence,precision,recall")
