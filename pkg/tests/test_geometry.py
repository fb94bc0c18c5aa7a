"""Keypoint similarity, normalization, and derived boxes."""

import math

import numpy as np
import pytest

from poselab.geometry import (
    DegenerateInstanceError,
    Keypoint,
    KsParams,
    PersonInstance,
    bbox_from_keypoints,
    instance_from_keypoints,
    instance_oks,
    keypoint_similarity,
    normalize_instance,
)

try:
    from hypothesis import given, settings
    from hypothesis import strategies as st

    HAVE_HYPOTHESIS = True
except ImportError:
    HAVE_HYPOTHESIS = False


def _square_instance(side=0.4, origin=(0.3, 0.3), visible=None):
    ox, oy = origin
    pts = [(ox, oy), (ox + side, oy), (ox + side, oy + side), (ox, oy + side)]
    if visible is None:
        visible = [True] * 4
    kps = tuple(Keypoint(x, y, v) for (x, y), v in zip(pts, visible))
    return PersonInstance(kps, bbox=(ox, oy, ox + side, oy + side), area=side * side)


class TestKeypointSimilarity:
    def test_zero_distance_gives_one(self):
        assert keypoint_similarity(0.0, 0.5, 0.1) == 1.0

    def test_half_similarity_distance(self):
        # exp(-d^2 / (2 s^2 k^2)) = 0.5  <=>  d = s k sqrt(2 ln 2)
        d = 0.1 * math.sqrt(2.0 * math.log(2.0))  # 0.11774100226... for s=1, k=0.1
        assert keypoint_similarity(d, 1.0, 0.1) == pytest.approx(0.5, abs=1e-12)
        assert d == pytest.approx(0.11774100226, abs=1e-9)

    def test_frozen_value(self):
        # independently computed: exp(-0.05^2 / (2 * 0.4^2 * 0.1^2))
        assert keypoint_similarity(0.05, 0.4, 0.1) == pytest.approx(
            0.4578333617716146, abs=1e-12
        )

    def test_monotone_decreasing_in_distance(self):
        vals = [keypoint_similarity(d, 0.5, 0.1) for d in np.linspace(0, 0.5, 50)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            keypoint_similarity(0.1, 0.0, 0.1)
        with pytest.raises(ValueError):
            keypoint_similarity(0.1, 0.5, -0.1)
        with pytest.raises(ValueError):
            keypoint_similarity(-0.1, 0.5, 0.1)

    if HAVE_HYPOTHESIS:

        @given(
            d=st.floats(0.0, 2.0),
            s=st.floats(0.01, 1.0),
            kappa=st.floats(0.01, 1.0),
        )
        @settings(max_examples=200, deadline=None)
        def test_range_property(self, d, s, kappa):
            ks = keypoint_similarity(d, s, kappa)
            assert 0.0 <= ks <= 1.0

        @given(
            d=st.floats(0.001, 0.5),
            s=st.floats(0.05, 1.0),
            kappa=st.floats(0.05, 0.5),
        )
        @settings(max_examples=200, deadline=None)
        def test_scale_invariance(self, d, s, kappa):
            # KS depends on d only through d / (s * kappa)
            a = keypoint_similarity(d, s, kappa)
            b = keypoint_similarity(2 * d, 2 * s, kappa)
            assert a == pytest.approx(b, rel=1e-9)


class TestInstanceOks:
    def test_identical_instances(self):
        gt = _square_instance()
        params = KsParams.uniform(4)
        assert instance_oks(gt, gt, params) == 1.0

    def test_mean_over_visible_only(self):
        gt = _square_instance(visible=[True, True, False, False])
        moved = tuple(
            Keypoint(k.x + (0.05 if i >= 2 else 0.0), k.y, k.visible)
            for i, k in enumerate(gt.keypoints)
        )
        pred = PersonInstance(moved, gt.bbox, gt.area)
        # invisible keypoints moved, visible ones untouched: OKS stays 1
        assert instance_oks(pred, gt, KsParams.uniform(4)) == 1.0

    def test_hand_computed_mean(self):
        gt = _square_instance(side=0.4)
        shifted = tuple(
            Keypoint(k.x + 0.02, k.y, True) if i == 0 else k
            for i, k in enumerate(gt.keypoints)
        )
        pred = PersonInstance(shifted, gt.bbox, gt.area)
        ks = keypoint_similarity(0.02, gt.scale, 0.1)
        expected = (ks + 3.0) / 4.0
        assert instance_oks(pred, gt, KsParams.uniform(4)) == pytest.approx(
            expected, abs=1e-12
        )

    def test_no_visible_keypoints(self):
        gt = _square_instance(visible=[False] * 4)
        assert instance_oks(gt, gt, KsParams.uniform(4)) == 1.0
        moved = tuple(Keypoint(k.x + 0.1, k.y, False) for k in gt.keypoints)
        pred = PersonInstance(moved, gt.bbox, gt.area)
        assert instance_oks(pred, gt, KsParams.uniform(4)) == 0.0

    def test_zero_area_raises(self):
        kps = (Keypoint(0.5, 0.5),)
        gt = PersonInstance(kps, (0.5, 0.5, 0.5, 0.5), 0.0)
        with pytest.raises(DegenerateInstanceError):
            instance_oks(gt, gt, KsParams.uniform(1))

    def test_count_mismatch_raises(self):
        a = _square_instance()
        b = instance_from_keypoints([(0.1, 0.1, True), (0.2, 0.2, True)], area=0.01)
        with pytest.raises(ValueError):
            instance_oks(a, b, KsParams.uniform(4))


class TestNormalization:
    def test_divides_by_long_side(self):
        inst = normalize_instance(
            [(160.0, 40.0, True), (80.0, 120.0, True)],
            img_w=160,
            img_h=80,
            bbox=(80.0, 40.0, 160.0, 120.0),
            area=6400.0,
        )
        assert inst.keypoints[0].x == pytest.approx(1.0)
        assert inst.keypoints[0].y == pytest.approx(0.25)
        assert inst.bbox == pytest.approx((0.5, 0.25, 1.0, 0.75))
        assert inst.area == pytest.approx(0.25)
        assert inst.scale == pytest.approx(0.5)

    def test_square_image_unit_range(self):
        inst = normalize_instance([(0.0, 0.0, True), (100.0, 100.0, True)], 100, 100)
        assert inst.keypoints[1].x == pytest.approx(1.0)
        assert inst.bbox == pytest.approx((0.0, 0.0, 1.0, 1.0))

    def test_derived_bbox_and_area(self):
        inst = normalize_instance(
            [(10.0, 20.0, True), (30.0, 60.0, True), (50.0, 10.0, False)], 100, 100
        )
        assert inst.bbox == pytest.approx((0.1, 0.2, 0.3, 0.6))
        assert inst.area == pytest.approx(0.2 * 0.4)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            normalize_instance([(1.0, 1.0, True)], 0, 100)


class TestBboxFromKeypoints:
    def test_tight(self):
        kps = (Keypoint(0.2, 0.3), Keypoint(0.6, 0.1), Keypoint(0.4, 0.5, False))
        assert bbox_from_keypoints(kps) == pytest.approx((0.2, 0.1, 0.6, 0.3))

    def test_margin_pads_by_diagonal_fraction(self):
        kps = (Keypoint(0.0, 0.0), Keypoint(0.3, 0.4))
        box = bbox_from_keypoints(kps, margin=0.1)
        # diagonal is 0.5, pad 0.05 on every side
        assert box == pytest.approx((-0.05, -0.05, 0.35, 0.45))

    def test_all_invisible_raises(self):
        with pytest.raises(DegenerateInstanceError):
            bbox_from_keypoints((Keypoint(0.1, 0.1, False),))

    def test_invalid_bbox_order_rejected(self):
        with pytest.raises(ValueError):
            PersonInstance((Keypoint(0.1, 0.1),), (0.5, 0.1, 0.2, 0.3), 0.1)
