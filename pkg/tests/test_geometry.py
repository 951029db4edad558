import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpvd.geometry import (Box2, Box3, Detection, StudyPredictions, dump_predictions, flag_match,
                           flag_match_2d, intersection_volume, iobb3, iou3, load_predictions, volume)

from conftest import random_int_box, rasterize

coord = st.integers(min_value=0, max_value=20)
extent = st.integers(min_value=1, max_value=10)


@st.composite
def int_boxes(draw):
    lo = [draw(coord) for _ in range(3)]
    ext = [draw(extent) for _ in range(3)]
    return Box3(*lo, *(a + e for a, e in zip(lo, ext)))


class TestBoxBasics:
    def test_invalid_extent_rejected(self):
        with pytest.raises(ValueError):
            Box3(0, 0, 0, 0, 1, 1)
        with pytest.raises(ValueError):
            Box2(0, 0, 1, -1)

    def test_volume(self):
        assert volume(Box3(0, 0, 0, 10, 10, 10)) == 1000

    def test_disjoint_intersection(self):
        assert intersection_volume(Box3(0, 0, 0, 2, 2, 2), Box3(5, 5, 5, 6, 6, 6)) == 0

    def test_touching_faces_do_not_intersect(self):
        assert intersection_volume(Box3(0, 0, 0, 2, 2, 2), Box3(2, 0, 0, 4, 2, 2)) == 0

    def test_overlap_example(self):
        a, b = Box3(0, 0, 0, 10, 10, 10), Box3(5, 5, 5, 15, 15, 15)
        assert intersection_volume(a, b) == 125
        assert iou3(a, b) == pytest.approx(125 / 1875)
        assert iobb3(a, b) == 0.125

    def test_iou_identity_and_disjoint(self):
        a = Box3(1, 2, 3, 4, 6, 9)
        assert iou3(a, a) == 1.0
        assert iou3(a, Box3(10, 10, 10, 11, 11, 11)) == 0.0

    def test_iobb_containment(self):
        assert iobb3(Box3(2, 2, 2, 4, 4, 4), Box3(0, 0, 0, 10, 10, 10)) == 1.0
        assert iobb3(Box3(0, 0, 0, 3, 3, 3), Box3(0, 0, 0, 3, 3, 3)) == 1.0

    def test_from_center_roundtrip(self):
        b = Box3.from_center((5, 5, 5), (10, 10, 10))
        assert b.to_list() == [0, 0, 0, 10, 10, 10]
        assert b.center == (5, 5, 5)


class TestRasterizationOracle:
    def test_matches_voxel_counts(self, rng):
        for _ in range(200):
            a, b = random_int_box(rng), random_int_box(rng)
            ra, rb = rasterize(a), rasterize(b)
            inter = np.count_nonzero(ra & rb)
            union = np.count_nonzero(ra | rb)
            assert intersection_volume(a, b) == inter
            assert iou3(a, b) == inter / union
            assert iobb3(a, b) == inter / np.count_nonzero(ra)


class TestFlagMatch:
    def test_identical(self):
        b = Box3(3, 3, 3, 9, 9, 9)
        assert flag_match(b, b)

    def test_center_outside(self):
        gt = Box3(0, 0, 0, 10, 10, 10)
        # large IoBB would not rescue a miss of the pointing game
        pred = Box3(8, 0, 0, 14, 10, 10)
        assert pred.center[0] == 11
        assert not flag_match(pred, gt)

    def test_low_iobb(self):
        assert not flag_match(Box3(0, 0, 0, 10, 10, 10), Box3(5, 5, 5, 15, 15, 15))

    def test_threshold_is_inclusive(self):
        gt = Box3(0, 0, 0, 10, 10, 10)
        pred = Box3(-7, 0, 0, 3, 10, 10)        # center at x=-2 -> outside
        assert not flag_match(pred, gt)
        pred = Box3(7, 0, 0, 17, 10, 10)        # IoBB exactly 0.3, center x=12 -> outside
        assert iobb3(pred, gt) == pytest.approx(0.3)
        gt2 = Box3(0, 0, 0, 20, 10, 10)
        pred2 = Box3(-7, 0, 0, 13, 10, 10)      # IoBB 13/20, center 3 inside
        assert flag_match(pred2, gt2)
        pred3 = Box3(-14, 0, 0, 6, 10, 10)      # IoBB exactly 0.3, center x=-4 outside
        assert not flag_match(pred3, gt2)
        pred4 = Box3(0, 0, 0, 10, 10, 10)
        gt4 = Box3(0, 0, 0, 3, 10, 10)          # IoBB 0.3 exactly, center 5 outside [0,3)
        assert not flag_match(pred4, gt4)
        gt5 = Box3(0, 0, 0, 6, 10, 10)
        pred5 = Box3(3, 0, 0, 13, 10, 10)        # IoBB 0.3 exactly, center 8 outside
        assert not flag_match(pred5, gt5)

    def test_iobb_boundary_inclusive_with_center_inside(self):
        gt = Box3(0, 0, 0, 10, 10, 10)
        pred = Box3(-2, -2, 5, 2, 2, 15)       # center (0, 0, 10)? z=10 is outside [0,10)
        assert not flag_match(pred, gt)
        pred = Box3(-3, 0, 0, 7, 10, 3)        # IoBB 0.7; center (2, 5, 1.5)
        assert flag_match(pred, gt)
        # x-overlap 3 of 10 => IoBB 0.3 with center at x = 2 inside
        pred = Box3(-3, 0, 0, 7, 10, 10)
        gt = Box3(2, 0, 0, 4, 10, 10)
        assert iobb3(pred, gt) == pytest.approx(0.2)
        gt = Box3(2, 0, 0, 5, 10, 10)
        assert iobb3(pred, gt) == 0.3
        assert flag_match(pred, gt)
        assert not flag_match(pred, gt, tau_iobb=0.3000001)

    def test_center_on_min_face_counts_as_inside(self):
        gt = Box3(5, 0, 0, 10, 10, 10)
        pred = Box3(4, 0, 0, 6, 10, 10)        # center x=5, IoBB 0.5
        assert flag_match(pred, gt)
        gt = Box3(0, 0, 0, 5, 10, 10)          # center on max face -> outside
        assert not flag_match(pred, gt)

    def test_truth_table_matches_brute_force(self, rng):
        for _ in range(300):
            pred, gt = random_int_box(rng, hi=12, max_ext=8), random_int_box(rng, hi=12, max_ext=8)
            rp, rg = rasterize(pred), rasterize(gt)
            iobb = np.count_nonzero(rp & rg) / np.count_nonzero(rp)
            c = pred.center
            inside = all(lo <= ci < hi for lo, ci, hi in zip(gt.lo, c, gt.hi))
            assert flag_match(pred, gt) == (inside and iobb >= 0.3)


class TestFlagMatch2D:
    def test_projection_matches(self):
        gt = Box3(2, 3, 4, 8, 9, 10)
        assert flag_match_2d(gt.project_axial(), gt)

    def test_disjoint(self):
        assert not flag_match_2d(Box2(20, 20, 25, 25), Box3(0, 0, 0, 10, 10, 10))

    def test_area_example(self):
        # IoBB 25/100 below 0.3
        assert not flag_match_2d(Box2(0, 0, 10, 10), Box3(5, 5, 0, 15, 15, 3))

    @settings(max_examples=200, deadline=None)
    @given(int_boxes(), st.integers(-3, 3), st.integers(-3, 3))
    def test_3d_match_on_extruded_box_implies_2d(self, gt, dx, dy):
        pred = Box3(gt.x0 + dx, gt.y0 + dy, gt.z0, gt.x1 + dx, gt.y1 + dy, gt.z1)
        if flag_match(pred, gt):
            assert flag_match_2d(pred.project_axial(), gt)


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(int_boxes(), int_boxes())
    def test_iou_symmetric_and_bounded(self, a, b):
        assert iou3(a, b) == iou3(b, a)
        assert 0.0 <= iou3(a, b) <= 1.0
        assert iobb3(a, b) >= iou3(a, b)
        assert iobb3(b, a) >= iou3(a, b)

    @settings(max_examples=300, deadline=None)
    @given(int_boxes(), int_boxes(), st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50))
    def test_flag_match_translation_invariant(self, a, b, dx, dy, dz):
        assert flag_match(a, b) == flag_match(a.translate(dx, dy, dz), b.translate(dx, dy, dz))


class TestDetections:
    def test_score_range_enforced(self):
        with pytest.raises(ValueError):
            Detection(Box3(0, 0, 0, 1, 1, 1), 1.5)
        with pytest.raises(ValueError):
            Detection(Box3(0, 0, 0, 1, 1, 1), 0.5, "benign")

    def test_prediction_file_roundtrip(self, tmp_path):
        preds = [StudyPredictions("a", [Detection(Box3(0, 1, 2, 3.5, 4, 5), 0.75, "HCC")]),
                 StudyPredictions("b", [], error="phase_unavailable")]
        path = tmp_path / "pred.json"
        dump_predictions(preds, path)
        raw = json.loads(path.read_text())
        assert raw[0] == {"study_id": "a", "detections": [{"box": [0, 1, 2, 3.5, 4, 5], "score": 0.75,
                                                           "kind": "HCC"}]}
        back = load_predictions(path)
        assert back[0].detections == preds[0].detections
        assert back[1].error == "phase_unavailable"
