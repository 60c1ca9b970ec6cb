import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lwdet.detect import Box, Detection
from lwdet.evaluation import (
    GroundTruth,
    average_precision,
    bench_fps,
    envelope_staircase,
    evaluate,
    export_pr_curve,
    format_percent,
    format_summary,
    match_detections,
    mean_ap,
    pr_points,
    precision_envelope,
    precision_recall,
)

from oracles import staircase_ap


def gt(x1, y1, x2, y2, c=0):
    return GroundTruth(c, Box(x1, y1, x2, y2))


def det(x1, y1, x2, y2, score, c=0):
    return Detection(Box(x1, y1, x2, y2), c, score)


class TestMatching:
    def test_single_perfect(self):
        r = match_detections([det(0, 0, 4, 4, 0.9)], [gt(0, 0, 4, 4)])
        assert (r.tp, r.fp, r.fn_total) == (1, 0, 0)

    def test_single_match_rule(self):
        r = match_detections([det(0, 0, 4, 4, 0.5), det(0, 0, 4, 3.9, 0.9)], [gt(0, 0, 4, 4)])
        assert (r.tp, r.fp) == (1, 1)
        assert r.records[0] == (0.9, 0, True)

    def test_highest_iou_wins(self):
        # detection [0,10]x[0,1]; GT a overlaps 0.6, GT b overlaps 0.55
        d = det(0, 0, 10, 1, 0.9)
        a = gt(0, 0, 6, 1)             # 6/10
        b = gt(4.5, 0, 10, 1)          # 5.5/10
        r = match_detections([d], [b, a])
        assert r.matched_gt == [1] and r.fn_total == 1 and r.tp == 1

    def test_class_respected(self):
        r = match_detections([det(0, 0, 4, 4, 0.9, c=1)], [gt(0, 0, 4, 4, c=0)])
        assert (r.tp, r.fp, r.fn[0]) == (0, 1, 1)

    def test_below_threshold_is_fp(self):
        r = match_detections([det(0, 0, 4, 4, 0.9)], [gt(0, 0, 4, 1.9)], iou_thresh=0.5)
        assert r.fp == 1 and r.fn_total == 1

    def test_never_double_matches(self):
        rng = random.Random(0)
        for _ in range(50):
            gts = [gt(x, y, x + 5, y + 5, rng.randrange(2)) for x, y in ((rng.uniform(0, 10), rng.uniform(0, 10)) for _ in range(5))]
            dets = [det(x, y, x + 5, y + 5, rng.random(), rng.randrange(2)) for x, y in ((rng.uniform(0, 10), rng.uniform(0, 10)) for _ in range(8))]
            r = match_detections(dets, gts)
            used = [g for g in r.matched_gt if g is not None]
            assert len(used) == len(set(used))
            for c, n in r.n_gt.items():
                assert sum(1 for s, cc, hit in r.records if hit and cc == c) <= n


class TestPrecisionRecall:
    def test_substitution(self):
        assert precision_recall((8, 2, 2)) == (0.8, 0.8)

    def test_perfect(self):
        assert precision_recall((5, 0, 0)) == (1.0, 1.0)

    def test_empty_detections(self):
        assert precision_recall((0, 0, 3)) == (1.0, 0.0)

    def test_no_ground_truth(self):
        assert precision_recall((0, 2, 0))[1] is None


class TestAP:
    def test_single(self):
        assert average_precision([(0.9, True)], 1) == 1.0

    def test_no_tp(self):
        assert average_precision([(0.9, False), (0.3, False)], 2) == 0.0

    def test_hand_example(self):
        ranked = [(0.9, True), (0.8, False), (0.7, True)]
        assert average_precision(ranked, 2) == pytest.approx(5 / 6, abs=1e-12)
        assert staircase_ap(ranked, 2) == pytest.approx(5 / 6, abs=1e-12)

    def test_no_gt_skipped(self):
        assert average_precision([(0.9, False)], 0) is None

    def test_ties_enter_together(self):
        assert pr_points([(0.5, False), (0.5, True)], 1) == [(1.0, 0.5)]

    @given(st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.booleans()), max_size=20), st.integers(1, 10))
    @settings(max_examples=200)
    def test_matches_oracle(self, ranked, extra_gt):
        gt_count = sum(h for _, h in ranked) + extra_gt - 1 or 1
        if sum(h for _, h in ranked) > gt_count:
            gt_count = sum(h for _, h in ranked)
        ours = average_precision(ranked, gt_count)
        if ranked:
            assert abs(ours - staircase_ap(ranked, gt_count)) <= 1e-9
        assert 0.0 <= ours <= 1.0

    @given(st.lists(st.tuples(st.floats(0.01, 1), st.booleans()), min_size=1, max_size=15), st.booleans())
    def test_low_append_keeps_prefix(self, ranked, hit):
        gt_count = sum(h for _, h in ranked) + 1
        before = pr_points(ranked, gt_count)
        after = pr_points(ranked + [(0.0, hit)], gt_count)
        assert after[: len(before)] == before

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=20))
    def test_envelope_non_increasing(self, ranked):
        env = precision_envelope(pr_points(ranked, max(1, sum(h for _, h in ranked))))
        assert all(a[1] >= b[1] for a, b in zip(env, env[1:]))
        assert all(a[0] < b[0] for a, b in zip(env, env[1:]))


class TestMeanAP:
    def test_pair(self):
        assert mean_ap({0: 1.0, 1: 0.5}) == 0.75

    def test_published_row(self):
        m = mean_ap([0.918, 0.878, 0.968, 0.946])
        assert abs(m - 0.9275) <= 1e-12
        assert format_percent(m) == "92.8"

    def test_single(self):
        assert mean_ap([0.37]) == 0.37

    def test_skips_none(self):
        assert mean_ap({0: 0.4, 1: None, 2: 0.6}) == pytest.approx(0.5)

    def test_permutation_invariant(self):
        aps = [0.1, 0.7, 0.35, 0.9]
        for _ in range(10):
            random.shuffle(aps)
            assert mean_ap(aps) == pytest.approx(0.5125, abs=1e-15)


class TestCurves:
    def test_perfect(self):
        assert envelope_staircase([(0.9, True)], 1) == [(0.0, 1.0), (1.0, 1.0)]
        assert envelope_staircase([(0.9, True), (0.8, True)], 2) == [(0.0, 1.0), (1.0, 1.0)]

    def test_empty(self):
        assert envelope_staircase([], 3) == []
        assert envelope_staircase([], 0) == []

    def test_hand_example(self):
        pts = envelope_staircase([(0.9, True), (0.8, False), (0.7, True)], 2)
        assert pts == [(0.0, 1.0), (0.5, 1.0), (0.5, 2 / 3), (1.0, 2 / 3)]

    def test_export(self, tmp_path):
        preds = [[det(0, 0, 4, 4, 0.9, 0)]]
        truths = [[gt(0, 0, 4, 4, 0)]]
        report = evaluate(preds, truths)
        files = export_pr_curve(report, tmp_path)
        assert len(files) == 4
        assert open(files[0]).read() == "# class Dead Knot\n0.000000 1.000000\n1.000000 1.000000\n"
        assert open(files[3]).read() == "# class Crack\n"


class TestEvaluate:
    def test_identity_oracle(self):
        truths = [[gt(0, 0, 4, 4, 0), gt(5, 5, 9, 9, 2)], [gt(1, 1, 3, 3, 1), gt(0, 0, 9, 9, 3)]]
        preds = [[Detection(g.box, g.class_id, 1.0) for g in img] for img in truths]
        report = evaluate(preds, truths)
        assert report.map == 1.0
        assert all(v == 1.0 for v in report.ap.values())

    def test_absent_class_excluded(self):
        report = evaluate([[det(0, 0, 4, 4, 0.9, 0)]], [[gt(0, 0, 4, 4, 0)]])
        assert report.ap[1] is None and report.map == 1.0

    def test_cross_image_ranking(self):
        truths = [[gt(0, 0, 4, 4)], [gt(0, 0, 4, 4)]]
        preds = [[det(0, 0, 4, 4, 0.9)], [det(10, 10, 12, 12, 0.8), det(0, 0, 4, 4, 0.7)]]
        assert evaluate(preds, truths).ap[0] == pytest.approx(5 / 6)

    def test_summary_table(self):
        report = evaluate([[det(0, 0, 4, 4, 0.9, 0)]], [[gt(0, 0, 4, 4, 0)]])
        text = format_summary(report, params=5_070_000, flops=9.4e9, fps=195.0)
        head, row = text.splitlines()
        assert head.split() == ["DK", "LK", "KC", "CR", "mAP", "FPS", "Params(M)", "FLOPs(G)"]
        assert row.split() == ["100.0", "-", "-", "-", "100.0", "195.0", "5.07", "9.40"]


def test_bench_contract(small_model):
    res = bench_fps(small_model, iterations=1, warmup=5)
    assert res.fps == pytest.approx(1000.0 / res.mean_ms)
    assert res.mean_ms >= res.min_ms
    res3 = bench_fps(small_model, iterations=3, warmup=0)
    assert res3.mean_ms >= res3.min_ms > 0
