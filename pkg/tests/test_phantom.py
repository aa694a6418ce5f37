"""Tests for the synthetic phantom generator."""

import json

import numpy as np
import pytest

from myoseg.exceptions import DataError
from myoseg.schemas import PhantomSpec
from myoseg.services.boost import TrainingSet, train_adaboost
from myoseg.services.features import assemble_descriptor
from myoseg.services.imgio import load_image, load_manifest, load_mask
from myoseg.services.phantom import (
    MANIFEST_NAME,
    _slice_geometry,
    generate_dataset,
    generate_volume,
    tissue_maps,
    volume_spec,
)

# Raw block mean follows the 36 HOG bins.
RAW_MEAN = 36


def _variant(spec, **update):
    return PhantomSpec.model_validate({**spec.model_dump(), **update})


class TestGenerateVolume:
    """Test in-memory slice rendering."""

    def test_deterministic(self, small_spec):
        first, second = generate_volume(small_spec), generate_volume(small_spec)
        for (img_a, mask_a), (img_b, mask_b) in zip(first, second):
            assert np.array_equal(img_a.data, img_b.data)
            assert np.array_equal(mask_a.labels, mask_b.labels)

    def test_every_compartment_present(self, small_spec):
        for image, mask in generate_volume(small_spec):
            assert mask.label_ids == (1, 2, 3, 4)
            assert mask.palette[3] == "muscle_03"
            assert image.data.min() >= 0.0 and image.data.max() <= 1.0

    def test_muscle_stays_off_bone(self, small_spec):
        for index, (_, mask) in enumerate(generate_volume(small_spec)):
            bx, by = _slice_geometry(small_spec, index).bone_center
            y, x = np.nonzero(mask.foreground)
            assert np.all(np.hypot(x - bx, y - by) > small_spec.bone_radius + small_spec.septum_width)

    def test_muscle_intensity_matches_band(self, small_spec):
        spec = _variant(small_spec, striation_amplitude=0.0)
        expected = spec.mean("muscle")
        for image, mask in generate_volume(spec):
            for k in mask.label_ids:
                values = image.data[mask.labels == k]
                assert abs(values.mean() - expected) <= 4 * spec.muscle_noise / np.sqrt(values.size)

    def test_slices_differ_but_stay_close(self, small_spec):
        spec = _variant(small_spec, slices=3)
        masks = [mask.foreground for _, mask in generate_volume(spec)]
        for a, b in zip(masks, masks[1:]):
            assert not np.array_equal(a, b)
            assert np.sum(a & b) / np.sum(a | b) > 0.8

    def test_tissue_maps_match_mask(self, small_spec):
        for index, (_, mask) in enumerate(generate_volume(small_spec)):
            tissue = tissue_maps(small_spec, index)
            assert np.array_equal(mask.foreground, tissue.muscle)
            assert not np.any(tissue.fat & tissue.muscle)
            assert np.array_equal(mask.labels[tissue.muscle], tissue.compartment[tissue.muscle] + 1)

    def test_too_many_compartments(self):
        with pytest.raises(DataError):
            generate_volume(PhantomSpec(muscles=200))

    def test_body_outside_frame(self):
        with pytest.raises(DataError):
            generate_volume(PhantomSpec(body_axes=(140.0, 100.0)))

    def test_bone_outside_muscle(self):
        with pytest.raises(DataError):
            generate_volume(PhantomSpec(bone_center=(30.0, 128.0)))


class TestBands:
    """Test tissue intensity bands."""

    def test_default_means_ordered(self):
        spec = PhantomSpec()
        assert spec.mean("bone") < spec.mean("muscle") < spec.mean("fat")
        assert spec.mean("muscle") == pytest.approx(0.45)

    def test_overlap_pulls_bands_together(self):
        spec = PhantomSpec(band_overlap=1.0)
        assert spec.band("muscle")[1] > spec.band("fat")[0]
        assert spec.mean("muscle") < spec.mean("fat")

    def test_unordered_bands_rejected(self):
        with pytest.raises(ValueError):
            PhantomSpec(muscle_band=(0.8, 0.9))


class TestVolumeSpec:
    """Test per-volume perturbation."""

    def test_zero_variability_keeps_geometry(self, small_spec):
        template = _variant(small_spec, volume_variability=0.0)
        spec = volume_spec(template, seed=9, slices=4)
        assert (spec.seed, spec.slices) == (9, 4)
        assert spec.bone_center == template.bone_center
        assert spec.body_axes == template.body_axes
        assert spec.muscle_level == template.muscle_level

    def test_seeds_change_anatomy(self, small_spec):
        a, b = volume_spec(small_spec, 1, 2), volume_spec(small_spec, 2, 2)
        assert a.bone_center != b.bone_center


class TestGenerateDataset:
    """Test dataset files and manifest."""

    def test_layout(self, phantom_dataset, tmp_path):
        root = tmp_path / "data"
        manifest = load_manifest(root / MANIFEST_NAME)
        assert manifest.volume_ids == ["vol00", "vol01", "vol02"]
        refs = list(manifest.iter_slices())
        assert len(refs) == 6
        for ref in refs:
            image = load_image(ref.image)
            assert image.dims == (128, 128)
            assert load_mask(ref.mask, expected_dims=image.dims).label_ids == (1, 2, 3, 4)
        stored = json.loads((root / "vol01" / "phantom.json").read_text())
        assert stored["seed"] == 5 ^ 1

    def test_rerun_is_byte_identical(self, small_spec, tmp_path):
        generate_dataset(7, 2, 1, tmp_path / "a", small_spec)
        generate_dataset(7, 2, 1, tmp_path / "b", small_spec)
        for name in ("vol00/000_image.png", "vol01/000_mask.png", MANIFEST_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_volumes_differ(self, phantom_dataset, tmp_path):
        root = tmp_path / "data"
        a = load_image(root / "vol00" / "000_image.png").data
        b = load_image(root / "vol01" / "000_image.png").data
        assert not np.array_equal(a, b)

    def test_parallel_matches_serial(self, small_spec, tmp_path):
        generate_dataset(4, 2, 1, tmp_path / "serial", small_spec, n_jobs=1)
        generate_dataset(4, 2, 1, tmp_path / "parallel", small_spec, n_jobs=2)
        name = "vol01/000_image.png"
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()

    def test_invalid_counts(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(0, 0, 1, tmp_path)


class TestHardness:
    """Test that band overlap defeats a threshold on the block mean."""

    def _blocks(self, spec):
        (image, _), = generate_volume(spec)
        tissue = tissue_maps(spec, 0)
        means = assemble_descriptor(image)[..., RAW_MEAN]
        rows, cols = means.shape

        def share(region):
            return region[:rows * 16, :cols * 16].reshape(rows, 16, cols, 16).mean(axis=(1, 3))

        muscle, fat = share(tissue.muscle) == 1.0, share(tissue.fat) == 1.0
        assert muscle.any() and fat.any()
        return means[muscle], means[fat]

    def _stump_error(self, band_overlap):
        template = PhantomSpec(slices=1, fat_thickness=40.0, band_overlap=band_overlap)
        # Both volumes keep muscle darker than fat; their levels differ the way per-volume drift does.
        volumes = [_variant(template, muscle_level=level, fat_level=level) for level in (0.25, 0.75)]
        muscle, fat = zip(*(self._blocks(spec) for spec in volumes))
        muscle, fat = np.concatenate(muscle), np.concatenate(fat)
        X = np.concatenate([muscle, fat])[:, None]
        y = np.concatenate([np.ones(muscle.size), -np.ones(fat.size)])
        return train_adaboost(TrainingSet(X, y), 1).history[0].eps

    def test_distinct_bands_separate_blocks(self):
        assert self._stump_error(0.0) == 0.0

    def test_overlap_defeats_block_mean(self):
        assert self._stump_error(1.0) > 0.05
