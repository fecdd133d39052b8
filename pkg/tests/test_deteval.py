import numpy as np
import pytest

from mmcode.base import ValidationError
from mmcode.corpus import CONCEPTS
from mmcode.deteval import (
    MatchResult,
    ap_from_flags,
    detection_ap,
    detection_report,
    iou,
    match_detections,
)
from mmcode.imfeat import ConceptBox, ConceptDetection


def det(image_id, concept, score, box):
    return ConceptDetection(image_id, concept, score, box)


def gt(image_id, concept, box):
    return ConceptBox(image_id, concept, box)


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0

    def test_hand_geometry(self):
        # boxes (0,0,2,2) and (1,1,2,2): intersection 1, union 7
        assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_degenerate_box(self):
        with pytest.raises(ValidationError):
            iou((0, 0, 0, 2), (0, 0, 1, 1))


class TestMatching:
    def test_zero_detections(self):
        m = match_detections([], [gt("i", "person", (0, 0, 5, 5))], "person")
        assert m.flags == [] and m.n_ground_truth == 1

    def test_single_exact_match(self):
        m = match_detections(
            [det("i", "person", 0.9, (0, 0, 5, 5))],
            [gt("i", "person", (0, 0, 5, 5))],
            "person",
        )
        assert [tp for _, tp in m.flags] == [True]

    def test_greedy_double_detection(self):
        box = (0, 0, 5, 5)
        m = match_detections(
            [det("i", "person", 0.8, box), det("i", "person", 0.9, box)],
            [gt("i", "person", box)],
            "person",
        )
        assert [d.score for d, _ in m.flags] == [0.9, 0.8]
        assert [tp for _, tp in m.flags] == [True, False]

    def test_cross_image_never_matches(self):
        m = match_detections(
            [det("a", "person", 0.9, (0, 0, 5, 5))],
            [gt("b", "person", (0, 0, 5, 5))],
            "person",
        )
        assert [tp for _, tp in m.flags] == [False]

    def test_other_concepts_ignored(self):
        m = match_detections(
            [det("i", "handgun", 0.9, (0, 0, 5, 5))],
            [gt("i", "person", (0, 0, 5, 5)), gt("i", "handgun", (0, 0, 5, 5))],
            "handgun",
        )
        assert m.n_ground_truth == 1
        assert [tp for _, tp in m.flags] == [True]


class TestDetectionAp:
    def test_all_tp_covering_gt(self):
        m = MatchResult(flags=[(None, True), (None, True)], n_ground_truth=2)
        assert detection_ap(m) == 1.0

    def test_hand_pr_enumeration(self):
        m = MatchResult(flags=[(None, True), (None, False), (None, True)], n_ground_truth=2)
        assert detection_ap(m) == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), abs=1e-12)

    def test_all_fp(self):
        m = MatchResult(flags=[(None, False)] * 3, n_ground_truth=2)
        assert detection_ap(m) == 0.0

    def test_no_ground_truth_absent(self):
        assert detection_ap(MatchResult(flags=[], n_ground_truth=0)) is None

    def test_monotone_score_transform_invariance(self, rng):
        boxes = [gt("i", "person", (10 * k, 0, 5, 5)) for k in range(6)]
        dets = [
            det("i", "person", float(s), (10 * k + rng.integers(0, 2), 0, 5, 5))
            for k, s in enumerate(rng.random(6))
        ] + [det("i", "person", float(rng.random()), (500, 500, 4, 4))]
        base = detection_ap(match_detections(dets, boxes, "person"))
        squashed = [det(d.image_id, d.concept, d.score**3, d.box) for d in dets]
        assert detection_ap(match_detections(squashed, boxes, "person")) == pytest.approx(base)

    def test_trailing_fp_never_increases_ap(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 10))
            flags = (rng.random(n) > 0.5).tolist()
            n_pos = max(1, sum(flags))
            base = ap_from_flags(flags, n_pos)
            assert ap_from_flags(flags + [False], n_pos) <= base + 1e-15


class TestDetectionReport:
    def _image_meta(self, images, sources):
        folds = {img: i % 5 for i, img in enumerate(images)}
        return folds, dict(zip(images, sources))

    def test_perfect_detector(self, rng):
        images = [f"img{i}" for i in range(20)]
        folds, sources = self._image_meta(images, ["twitter", "tumblr"] * 10)
        gts, dets = [], []
        for img in images:
            for concept in ("person", "handgun"):
                box = (rng.uniform(0, 100), rng.uniform(0, 100), 10, 10)
                gts.append(gt(img, concept, box))
                dets.append(det(img, concept, float(rng.uniform(0.5, 1.0)), box))
        report = detection_report(dets, gts, folds, sources)
        for concept in ("person", "handgun"):
            for column in report.columns:
                mean, sd = report.per_concept[concept][column]
                assert mean == 1.0 and sd == 0.0
        assert report.map_row["Complete"][0] == 1.0

    def test_half_coverage_detector(self, rng):
        images = [f"img{i}" for i in range(40)]
        folds, sources = self._image_meta(images, ["twitter"] * 40)
        gts, dets = [], []
        for i, img in enumerate(images):
            for j in range(4):
                box = (100.0 * j, 0.0, 10.0, 10.0)
                gts.append(gt(img, "person", box))
                if (i * 4 + j) % 2 == 0:
                    dets.append(det(img, "person", float(rng.uniform(0.5, 1.0)), box))
        report = detection_report(dets, gts, folds, sources)
        mean, _ = report.per_concept["person"]["Complete"]
        assert mean == pytest.approx(0.5, abs=0.05)
        assert report.per_concept["person"]["Tumblr"] is None

    def test_column_order(self):
        report = detection_report([], [gt("i", "person", (0, 0, 1, 1))], {"i": 0}, {"i": "twitter"})
        assert report.columns == ("Complete", "Twitter", "Tumblr")
        headers = report.render("csv").splitlines()[0]
        assert headers.split(",")[1:4] == [
            "Complete AP ± SD",
            "Twitter AP ± SD",
            "Tumblr AP ± SD",
        ]

    def test_complete_not_mean_of_subsets(self):
        # crafted: twitter has 1 gt + perfect det; tumblr has 3 gt, 1 found.
        gts = [
            gt("tw", "person", (0, 0, 5, 5)),
            gt("tb", "person", (0, 0, 5, 5)),
            gt("tb", "person", (10, 0, 5, 5)),
            gt("tb", "person", (20, 0, 5, 5)),
        ]
        dets = [
            det("tw", "person", 0.9, (0, 0, 5, 5)),
            det("tb", "person", 0.8, (0, 0, 5, 5)),
        ]
        folds = {"tw": 0, "tb": 0}
        sources = {"tw": "twitter", "tb": "tumblr"}
        report = detection_report(dets, gts, folds, sources)
        complete = report.map_row["Complete"][0]
        twitter = report.map_row["Twitter"][0]
        tumblr = report.map_row["Tumblr"][0]
        assert complete != pytest.approx((twitter + tumblr) / 2.0)

    def test_rows_cover_all_concepts(self):
        report = detection_report([], [gt("i", "person", (0, 0, 1, 1))], {"i": 0}, {"i": "twitter"})
        rows = report.rows()
        assert len(rows) == len(CONCEPTS) + 1
        assert rows[-1][0] == "mAP"
