import numpy as np
import pytest

import canopyheight as ch
from canopyheight import synthdata as S


class TestWorldGeneration:
    def test_deterministic_per_seed(self):
        a = ch.generate_world(3, extent=(64, 64))
        b = ch.generate_world(3, extent=(64, 64))
        assert np.array_equal(a.true_height, b.true_height)
        assert np.array_equal(a.spectral, b.spectral)
        assert np.array_equal(a.scene_class, b.scene_class)

    def test_zero_height_on_water_and_bare(self, small_world):
        cls = small_world.scene_class
        zero = np.isin(cls, [int(ch.SceneClass.NOT_VEGETATED), int(ch.SceneClass.WATER)])
        assert zero.any()
        assert np.all(small_world.true_height[zero] == 0.0)

    def test_heights_nonnegative_and_spectral_finite(self, small_world):
        assert np.all(small_world.true_height >= 0)
        assert np.all(np.isfinite(small_world.spectral))

    def test_spectral_channel_tracks_height(self, small_world):
        # regression fixture for the fixed forward model at seed 7
        veg = small_world.base_class == ch.SceneClass.VEGETATED
        corr = np.corrcoef(small_world.spectral[1][veg], small_world.true_height[veg])[0, 1]
        assert corr > 0.6
        assert corr == pytest.approx(0.729043, abs=1e-4)

    def test_degenerate_extent_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            ch.generate_world(0, extent=(32, 32))

    def test_world_round_trip(self, small_world, tmp_path):
        path = str(tmp_path / "w.chw")
        ch.save_world(path, small_world)
        loaded = ch.load_world(path)
        assert np.array_equal(loaded.true_height, small_world.true_height)
        assert np.array_equal(loaded.spectral, small_world.spectral)
        assert np.array_equal(loaded.base_class, small_world.base_class)
        assert loaded.params == small_world.params
        assert loaded.seed == small_world.seed


class TestFootprints:
    def test_degenerate_footprint_hits_center_exactly(self, small_world):
        samples = ch.sample_footprints(small_world, 50, seed=1, geolocation_sigma=0.0,
                                       footprint_diameter=0.0)
        for s in samples:
            if s.scene_class == int(ch.SceneClass.VEGETATED):
                assert s.label_height == small_world.true_height[s.row, s.col]

    def test_water_center_label_is_zero(self, small_world):
        samples = ch.sample_footprints(small_world, 800, seed=2)
        water = [s for s in samples if s.scene_class == int(ch.SceneClass.WATER)]
        assert water, "expected some water footprints in the pool"
        assert all(s.label_height == 0.0 for s in water)

    def test_disc_max_dominates_center(self, small_world):
        samples = ch.sample_footprints(small_world, 200, seed=3, geolocation_sigma=0.0)
        veg = [s for s in samples if s.scene_class == int(ch.SceneClass.VEGETATED)]
        for s in veg:
            assert s.label_height >= small_world.true_height[s.row, s.col] - 1e-6

    def test_patch_layout(self, small_world):
        s = ch.sample_footprints(small_world, 1, seed=4)[0]
        assert s.patch.shape == (15, 15, 15)
        np.testing.assert_array_equal(
            s.patch[:12], small_world.spectral[:, s.row - 7 : s.row + 8, s.col - 7 : s.col + 8])
        expected_geo = ch.encode_geo(s.lon, s.lat, 15, 15)
        np.testing.assert_allclose(s.patch[12:], expected_geo, atol=1e-6)

    def test_flag_filter_removes_exactly_flagged(self, small_world):
        raw = ch.sample_footprints(small_world, 2000, seed=5, drop_flagged=False)
        flagged = [s for s in raw if s.cloudy or s.snowy]
        kept = S.drop_flagged_samples(raw)
        assert len(kept) == len(raw) - len(flagged)
        assert all(not (s.cloudy or s.snowy) for s in kept)

    def test_default_sampling_excludes_flagged_locations(self, small_world):
        samples = ch.sample_footprints(small_world, 1000, seed=6)
        assert all(not s.cloudy and not s.snowy for s in samples)

    def test_too_many_footprints_rejected(self, small_world):
        with pytest.raises(ValueError, match="valid locations"):
            ch.sample_footprints(small_world, 10**7, seed=0)

    def test_deterministic_per_seed(self, small_world):
        a = ch.sample_footprints(small_world, 20, seed=9)
        b = ch.sample_footprints(small_world, 20, seed=9)
        assert all(np.array_equal(x.patch, y.patch) and x.label_height == y.label_height
                   for x, y in zip(a, b))


class TestNormalization:
    def test_label_stats_population_convention(self):
        patches = np.random.default_rng(0).random((4, 15, 15, 15)).astype(np.float32)
        stats = ch.compute_norm_stats(patches, np.array([0.0, 10.0, 0.0, 10.0]))
        assert stats.label_mean == pytest.approx(5.0)
        assert stats.label_std == pytest.approx(5.0)

    def test_constant_shift_leaves_normalized_data_unchanged(self):
        rng = np.random.default_rng(1)
        patches = rng.random((6, 15, 15, 15)).astype(np.float32)
        labels = rng.random(6)
        stats = ch.compute_norm_stats(patches, labels)
        shifted = patches + 3.5
        stats2 = ch.compute_norm_stats(shifted, labels)
        np.testing.assert_allclose(ch.normalize_patches(patches, stats),
                                   ch.normalize_patches(shifted, stats2), atol=1e-4)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        patches = rng.random((5, 15, 15, 15)).astype(np.float32)
        labels = rng.random(5) * 40
        stats = ch.compute_norm_stats(patches, labels)
        norm = ch.normalize_labels(labels, stats)
        mean, var = ch.denormalize_prediction(norm, np.ones_like(norm), stats)
        np.testing.assert_allclose(mean, labels, atol=1e-5)

    def test_unit_variance_denormalizes_to_std_squared(self):
        rng = np.random.default_rng(3)
        patches = rng.random((5, 15, 15, 15)).astype(np.float32)
        labels = rng.random(5) * 40
        stats = ch.compute_norm_stats(patches, labels)
        _, var = ch.denormalize_prediction(np.zeros(3), np.ones(3), stats)
        np.testing.assert_allclose(var, stats.label_std**2, rtol=1e-6)

    def test_zero_variance_channel_rejected(self):
        patches = np.random.default_rng(4).random((5, 15, 15, 15)).astype(np.float32)
        patches[:, 3] = 0.25
        with pytest.raises(ValueError, match="zero-variance channel"):
            ch.compute_norm_stats(patches, np.arange(5, dtype=np.float64))

    def test_normalized_training_channels_standard(self, small_dataset):
        ds = small_dataset
        norm = ch.normalize_patches(ds.patches[ds.train_indices], ds.stats)
        np.testing.assert_allclose(norm.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(norm.std(axis=(0, 2, 3)), 1.0, atol=1e-4)


class TestSplit:
    def test_fraction_zero_keeps_everything_in_train(self, small_world):
        samples = ch.sample_footprints(small_world, 100, seed=1)
        train, val, tiles = ch.split_by_tile(samples, ch.SplitSpec(holdout_fraction=0.0),
                                             small_world.shape)
        assert len(val) == 0 and len(train) == 100 and tiles == set()

    def test_twenty_percent_of_100_tiles(self):
        spec = ch.SplitSpec(tile_px=10, holdout_fraction=0.2, seed=5)
        tiles = S.validation_tiles(spec, (100, 100))
        assert len(tiles) == 20

    def test_no_tile_contributes_to_both_sets(self, small_world):
        samples = ch.sample_footprints(small_world, 600, seed=2)
        spec = ch.SplitSpec(tile_px=32, holdout_fraction=0.25, seed=1)
        train, val, val_tiles = ch.split_by_tile(samples, spec, small_world.shape)
        train_tiles = {(s.row // 32, s.col // 32) for s in train}
        seen_val_tiles = {(s.row // 32, s.col // 32) for s in val}
        assert not train_tiles & val_tiles
        assert seen_val_tiles <= val_tiles

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ValueError):
            ch.SplitSpec(holdout_fraction=1.0)


class TestDataset:
    def test_long_tailed_labels(self, small_dataset):
        labels = small_dataset.labels
        half_range = labels.max() / 2.0
        assert (labels < half_range).mean() >= 0.7

    def test_round_trip_bit_exact(self, small_dataset, tmp_path):
        path = str(tmp_path / "d.chd")
        ch.save_dataset(path, small_dataset)
        loaded = ch.load_dataset(path)
        assert np.array_equal(loaded.patches, small_dataset.patches)
        assert np.array_equal(loaded.labels, small_dataset.labels)
        assert np.array_equal(loaded.is_val, small_dataset.is_val)
        assert np.array_equal(loaded.rows, small_dataset.rows)
        assert loaded.split == small_dataset.split
        np.testing.assert_allclose(loaded.stats.channel_mean, small_dataset.stats.channel_mean)
        assert loaded.meta == small_dataset.meta

    def test_stats_come_from_train_split_only(self, small_dataset):
        ds = small_dataset
        tr = ds.train_indices
        expected = ds.patches[tr].astype(np.float64).mean(axis=(0, 2, 3))
        np.testing.assert_allclose(ds.stats.channel_mean, expected, rtol=1e-6)

    def test_sample_accessor(self, small_dataset):
        s = small_dataset.sample(0)
        assert isinstance(s, ch.FootprintSample)
        assert s.patch.shape == (15, 15, 15)


class TestObservations:
    def test_deterministic(self, small_world):
        a = ch.render_observations(small_world)
        b = ch.render_observations(small_world)
        assert len(a) == small_world.params.n_dates
        assert all(np.array_equal(x.spectral, y.spectral) for x, y in zip(a, b))

    def test_valid_is_covered_and_cloud_free(self, small_world):
        for img in ch.render_observations(small_world):
            assert img.valid.shape == small_world.shape
            assert not np.any(img.valid & ~img.coverage)
            assert 0.0 <= img.cloud_fraction <= 1.0

    def test_orbits_cycle_and_union_covers(self, small_world):
        obs = ch.render_observations(small_world)
        orbit_ids = {img.orbit_id for img in obs}
        assert orbit_ids == {0, 1, 2}
        union = np.zeros(small_world.shape, bool)
        for img in obs:
            union |= img.coverage
        assert union.all()

    def test_single_orbit_covers_everything(self):
        cov = S.orbit_coverage((16, 16), 0, 1)
        assert cov.all()
