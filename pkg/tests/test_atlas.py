"""Tests for keypoints, alignment and the muscle atlas."""

import math

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from myoseg.exceptions import BoneNotFoundError, KeypointError
from myoseg.schemas import PhantomSpec
from myoseg.services.atlas import (
    Alignment,
    Keypoints,
    MuscleAtlas,
    bone_centroid,
    build_atlas,
    compute_alignment,
    keypoints_from_mask,
    label_segmentation,
    transfer_labels,
    warp_back,
    warp_mask,
)
from myoseg.services.imgio import LabelMask
from myoseg.services.metrics import dice
from myoseg.services.phantom import generate_volume


def _disk(shape, center, radius):
    y, x = np.mgrid[0:shape[0], 0:shape[1]]
    return np.hypot(x - center[0], y - center[1]) <= radius


@pytest.fixture
def compact_slice():
    """One jitter-free phantom slice whose anatomy stays in frame under moderate warps."""
    spec = PhantomSpec(
        seed=11,
        slices=1,
        body_axes=(90.0, 80.0),
        fat_thickness=8.0,
        bone_center=(118.0, 132.0),
        slice_jitter=0.0,
    )
    (image, mask), = generate_volume(spec)
    return image, mask


class TestBoneCentroid:
    """Test bone detection by thresholding."""

    def test_recovers_phantom_bone(self):
        spec = PhantomSpec(seed=2, slices=1, bone_center=(120.0, 140.0), slice_jitter=0.0)
        (image, _), = generate_volume(spec)
        x, y = bone_centroid(image)
        assert math.hypot(x - 120.0, y - 140.0) <= 2.0

    def test_constant_image(self):
        with pytest.raises(BoneNotFoundError):
            bone_centroid(np.full((64, 64), 0.5))

    def test_circular_component_preferred(self):
        image = np.full((100, 100), 0.9)
        image[_disk(image.shape, (30, 30), 10)] = 0.1
        image[60:66, 10:70] = 0.1
        x, y = bone_centroid(image)
        assert x == pytest.approx(30.0, abs=0.5)
        assert y == pytest.approx(30.0, abs=0.5)

    def test_area_bounds(self):
        image = np.full((100, 100), 0.9)
        image[_disk(image.shape, (50, 50), 3)] = 0.1
        with pytest.raises(BoneNotFoundError):
            bone_centroid(image, area_min=100, area_max=3000)


class TestKeypoints:
    """Test hull and distal point extraction."""

    def test_square_corner_centroid(self):
        foreground = np.zeros((20, 20), dtype=bool)
        foreground[5:15, 5:15] = True
        kp = keypoints_from_mask(foreground, (5.0, 5.0))
        assert kp.distal_point == (14.0, 14.0)
        assert np.hypot(*kp.distal_vector) == pytest.approx(math.sqrt(2) * 9)

    def test_disk_distance_is_radius(self):
        foreground = _disk((100, 100), (50, 50), 20)
        kp = keypoints_from_mask(foreground, (50.0, 50.0))
        assert 19.0 <= np.hypot(*kp.distal_vector) <= 21.0

    def test_equidistant_vertices_take_smallest_angle(self):
        foreground = np.zeros((11, 11), dtype=bool)
        foreground[0, 5] = foreground[10, 5] = foreground[5, 0] = foreground[5, 10] = True
        kp = keypoints_from_mask(foreground, (5.0, 5.0))
        # Candidates sit at angles 0, +-pi/2 and pi; -pi/2 is (5, 0).
        assert kp.distal_point == (5.0, 0.0)

    def test_foreground_inside_hull(self, rng):
        foreground = rng.random((40, 40)) < 0.2
        kp = keypoints_from_mask(foreground, (20.0, 20.0))
        hull = ConvexHull(np.array(kp.hull))
        rows, cols = np.nonzero(foreground)
        points = np.column_stack([cols, rows])
        assert np.all(points @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9)
        assert len(kp.hull) >= 3

    def test_empty_foreground(self):
        with pytest.raises(KeypointError):
            keypoints_from_mask(np.zeros((10, 10), dtype=bool), (5.0, 5.0))

    def test_collinear_foreground(self):
        foreground = np.zeros((10, 10), dtype=bool)
        foreground[4, 1:9] = True
        with pytest.raises(KeypointError):
            keypoints_from_mask(foreground, (5.0, 5.0))


def _kp(centroid, distal):
    return Keypoints(bone_centroid=centroid, distal_point=distal, hull=())


class TestAlignment:
    """Test similarity alignment from two keypoints."""

    def test_identical_keypoints_give_identity(self):
        kp = _kp((10.0, 20.0), (40.0, 25.0))
        a = compute_alignment(kp, kp)
        assert a.translation == (0.0, 0.0)
        assert a.rotation == 0.0
        assert a.scale == 1.0

    def test_quarter_turn(self):
        a = compute_alignment(_kp((0.0, 0.0), (1.0, 0.0)), _kp((0.0, 0.0), (0.0, 1.0)))
        assert a.rotation == pytest.approx(-math.pi / 2)
        assert a.scale == pytest.approx(1.0)

    def test_length_ratio(self):
        a = compute_alignment(_kp((0.0, 0.0), (10.0, 0.0)), _kp((3.0, 3.0), (8.0, 3.0)))
        assert a.scale == pytest.approx(2.0)
        assert a.translation == (-3.0, -3.0)

    def test_zero_length_target(self):
        with pytest.raises(KeypointError):
            compute_alignment(_kp((0.0, 0.0), (1.0, 0.0)), _kp((2.0, 2.0), (2.0, 2.0)))

    def test_recovers_generating_parameters(self, rng):
        for _ in range(100):
            c_ref = rng.uniform(50, 200, size=2)
            d_ref = c_ref + rng.uniform(20, 80) * np.array([math.cos(a := rng.uniform(-math.pi, math.pi)), math.sin(a)])
            truth = Alignment(
                translation=tuple(rng.uniform(-30, 30, size=2)),
                rotation=rng.uniform(-3.0, 3.0),
                scale=rng.uniform(0.6, 1.6),
                pivot=tuple(c_ref),
            )
            c_tgt, d_tgt = truth.inverse().apply(np.array([c_ref, d_ref]))
            found = compute_alignment(_kp(tuple(c_ref), tuple(d_ref)), _kp(tuple(c_tgt), tuple(d_tgt)))
            assert np.allclose(found.translation, truth.translation, atol=1e-6)
            assert found.rotation == pytest.approx(truth.rotation, abs=1e-6)
            assert found.scale == pytest.approx(truth.scale, abs=1e-6)

    def test_inverse_composes_to_identity(self, rng):
        for _ in range(20):
            a = Alignment(tuple(rng.normal(size=2) * 10), rng.uniform(-3, 3), rng.uniform(0.5, 2), tuple(rng.random(2) * 100))
            assert np.allclose(a.inverse().compose(a), np.eye(3), atol=1e-9)
            assert np.allclose(a.compose(a.inverse()), np.eye(3), atol=1e-9)

    def test_rotation_range(self):
        assert Alignment(rotation=-math.pi).rotation == pytest.approx(math.pi)
        assert Alignment(rotation=3 * math.pi / 2).rotation == pytest.approx(-math.pi / 2)
        with pytest.raises(ValueError):
            Alignment(scale=0.0)


class TestWarp:
    """Test nearest-neighbor mask warps."""

    def test_identity_keeps_mask(self, rng):
        mask = LabelMask(rng.integers(0, 4, size=(30, 40)))
        assert np.array_equal(warp_mask(mask, Alignment.identity(), mask.dims).labels, mask.labels)

    def test_integer_translation_shifts(self):
        labels = np.zeros((64, 64), dtype=np.int32)
        labels[10:20, 10:20] = 1
        shifted = warp_mask(LabelMask(labels), Alignment(translation=(5.0, -3.0)), (64, 64)).labels
        expected = np.zeros_like(labels)
        expected[7:17, 15:25] = 1
        assert np.array_equal(shifted, expected)

    @pytest.mark.parametrize("scale,rotation", [(1.15, 0.25), (1.0, -0.3), (1.2, 0.0)])
    def test_round_trip_on_phantom(self, compact_slice, scale, rotation):
        image, mask = compact_slice
        a = Alignment(translation=(3.0, -2.0), rotation=rotation, scale=scale, pivot=bone_centroid(image))
        back = warp_back(warp_mask(mask, a, mask.dims), a, mask.dims)
        for k in mask.label_ids:
            assert dice(back.labels == k, mask.labels == k) >= 0.98


def _atlas(counts, contributors):
    height, width = next(iter(counts.values())).shape
    return MuscleAtlas(
        reference_dims=(width, height),
        reference_keypoints=_kp((0.0, 0.0), (1.0, 0.0)),
        counts=counts,
        contributors=contributors,
    )


class TestAtlas:
    """Test atlas construction, truncation and label transfer."""

    def test_identical_masks_reproduce_regions(self, compact_slice):
        image, mask = compact_slice
        atlas = build_atlas([mask] * 9, [image] * 9, reference_index=4)
        assert atlas.contributors == 9
        for k in mask.label_ids:
            assert atlas.peak(k) == 9
            assert np.array_equal(atlas.region(k), mask.labels == k)
            assert np.allclose(atlas.probability(k)[mask.labels == k], 1.0)

    def test_outlier_pixels_truncated(self, compact_slice):
        image, mask = compact_slice
        outlier = mask.labels.copy()
        outlier[mask.labels == 2] = 1
        masks = [mask] * 8 + [LabelMask(outlier, mask.palette)]
        atlas = build_atlas(masks, [image] * 9, reference_index=0)
        moved = mask.labels == 2
        assert np.all(atlas.counts[1][moved] == 1)
        assert np.array_equal(atlas.region(1), mask.labels == 1)

    def test_failing_contributor_skipped(self, compact_slice):
        image, mask = compact_slice
        blank = np.full(image.data.shape, 0.5)
        atlas = build_atlas([mask, mask, mask], [image, blank, image], reference_index=0)
        assert atlas.contributors == 2

    def test_truncation_exhaustive(self, rng):
        for _ in range(30):
            contributors = int(rng.integers(1, 10))
            counts = rng.integers(0, contributors + 1, size=(32, 32))
            atlas = _atlas({1: counts}, contributors)
            peak = counts.max()
            cut = math.ceil(0.5 * peak)
            region = atlas.region(1)
            assert np.all(counts[region] >= cut)
            assert np.all(counts[~region] < max(cut, 1))

    def test_overlap_prefers_count_then_id(self):
        a = np.zeros((4, 4), dtype=np.int64)
        b = np.zeros((4, 4), dtype=np.int64)
        a[:, :3] = 2
        b[:, 1:] = 2
        a[0, 1] = 1
        atlas = _atlas({1: a, 2: b}, 2)
        assert atlas.label_map[0, 1] == 2
        assert atlas.label_map[1, 1] == 1
        assert atlas.label_map[1, 3] == 2

    def test_uncovered_pixel_takes_nearest_region(self):
        one = np.zeros((20, 20), dtype=np.int64)
        two = np.zeros((20, 20), dtype=np.int64)
        one[:, :6] = 2
        two[:, 12:] = 2
        atlas = _atlas({1: one, 2: two}, 2)
        binary = np.zeros((20, 20), dtype=np.int32)
        binary[10, 9] = 1
        binary[10, 7] = 1
        labeled = transfer_labels(LabelMask(binary), atlas, Alignment.identity())
        assert labeled.labels[10, 9] == 2
        assert labeled.labels[10, 7] == 1

    def test_transfer_keeps_support(self, rng, compact_slice):
        image, mask = compact_slice
        atlas = build_atlas([mask, mask], [image, image], reference_index=0)
        binary = LabelMask((rng.random(mask.labels.shape) < 0.3).astype(np.int32))
        a = Alignment(translation=(4.0, 1.0), rotation=0.2, scale=0.9, pivot=(120.0, 130.0))
        labeled = transfer_labels(binary, atlas, a)
        assert np.array_equal(labeled.foreground, binary.foreground)

    def test_label_segmentation_of_ground_truth(self, compact_slice):
        image, mask = compact_slice
        atlas = build_atlas([mask, mask], [image, image], reference_index=1)
        binary = LabelMask(mask.foreground.astype(np.int32))
        labeled = label_segmentation(binary, image, atlas)
        assert np.array_equal(labeled.labels, mask.labels)
        assert labeled.palette == mask.palette

    def test_save_and_load(self, tmp_path, compact_slice):
        image, mask = compact_slice
        atlas = build_atlas([mask, mask, mask], [image, image, image], reference_index=0)
        atlas.save(tmp_path / "atlas")
        loaded = MuscleAtlas.load(tmp_path / "atlas")
        assert loaded.contributors == 3
        assert loaded.reference_keypoints == atlas.reference_keypoints
        assert loaded.palette == atlas.palette
        for k in atlas.muscle_ids:
            assert np.array_equal(loaded.counts[k], atlas.counts[k])
