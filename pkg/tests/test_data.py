import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m4mil import data
from m4mil.data import Bag, Manifest, ManifestEntry, SyntheticSpec
from m4mil.errors import (
    BadMagicError,
    CalibrationError,
    ConfigError,
    EmptyBagError,
    SizeOverflowError,
    TruncatedFileError,
)


def f32(rng, shape):
    return rng.uniform(-1, 1, shape).astype(np.float32).astype(np.float64)


def small_spec(**overrides):
    kwargs = dict(
        tasks=3,
        bags=40,
        patch_range=(3, 6),
        d=8,
        prevalence=np.array([0.5, 0.4, 0.3]),
        latent_dim=2,
        task_loadings=np.array([[1.0, 0.0], [0.8, 0.4], [0.0, 1.0]]),
        seed=5,
    )
    kwargs.update(overrides)
    return SyntheticSpec(**kwargs)


class TestBagValidation:
    def test_empty_bag_rejected(self):
        with pytest.raises(EmptyBagError):
            Bag(id="x", features=np.zeros((0, 3)))

    def test_nonfinite_features_rejected(self):
        with pytest.raises(ConfigError):
            Bag(id="x", features=[[1.0, np.nan]])

    def test_duplicate_grid_cells_rejected(self):
        with pytest.raises(ConfigError):
            Bag(id="x", features=np.ones((2, 2)), grid_coords=[[0, 0], [0, 0]])


class TestBagFormat:
    def test_round_trip_without_grid(self, rng, tmp_path):
        bag = Bag(id="b0", features=f32(rng, (7, 5)))
        path = tmp_path / "b0.mbg"
        data.write_bag(bag, path)
        back = data.read_bag(path)
        assert back.id == "b0"
        assert np.array_equal(back.features, bag.features)
        assert back.grid_coords is None

    @pytest.mark.parametrize("n", [1, 7, 100])
    def test_round_trip_with_grid_bit_exact(self, n, rng, tmp_path):
        bag = Bag(
            id="g",
            features=f32(rng, (n, 4)),
            grid_coords=data._row_major_grid(n),
        )
        path = tmp_path / "g.mbg"
        data.write_bag(bag, path)
        back = data.read_bag(path)
        assert np.array_equal(back.features, bag.features)
        assert np.array_equal(back.grid_coords, bag.grid_coords)
        # a second write is byte-identical
        second = tmp_path / "g2.mbg"
        data.write_bag(back, second)
        assert second.read_bytes() == path.read_bytes()

    def test_minimal_bag_is_seventeen_bytes(self, tmp_path):
        path = tmp_path / "tiny.mbg"
        data.write_bag(Bag(id="tiny", features=[[0.5]]), path)
        assert path.stat().st_size == 4 + 4 + 4 + 1 + 4
        assert data.read_bag(path).features[0, 0] == 0.5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mbg"
        path.write_bytes(b"XBG1" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            data.read_bag(path)

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "cut.mbg"
        data.write_bag(Bag(id="c", features=f32(rng, (5, 3))), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(TruncatedFileError):
            data.read_bag(path)

    def test_size_overflow(self, tmp_path):
        import struct

        path = tmp_path / "huge.mbg"
        path.write_bytes(data.BAG_MAGIC + struct.pack("<IIB", 1 << 20, 1 << 20, 0))
        with pytest.raises(SizeOverflowError):
            data.read_bag(path)

    def test_trailing_bytes_rejected(self, rng, tmp_path):
        path = tmp_path / "fat.mbg"
        data.write_bag(Bag(id="f", features=f32(rng, (2, 2))), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TruncatedFileError):
            data.read_bag(path)

    @given(
        n=st.integers(1, 12),
        d=st.integers(1, 6),
        has_grid=st.booleans(),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, n, d, has_grid, seed):
        import tempfile

        rng = np.random.default_rng(seed)
        bag = Bag(
            id="p",
            features=f32(rng, (n, d)),
            grid_coords=data._row_major_grid(n) if has_grid else None,
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/p.mbg"
            data.write_bag(bag, path)
            back = data.read_bag(path)
        assert np.array_equal(back.features, bag.features)


class TestNormalization:
    def test_column_example(self):
        out = data.normalize_features(np.array([[0.0], [5.0], [10.0]]))
        assert np.array_equal(out, [[-1.0], [0.0], [1.0]])

    def test_constant_column_maps_to_zero(self):
        out = data.normalize_features(np.array([[3.0, 1.0], [3.0, 2.0]]))
        assert np.array_equal(out[:, 0], [0.0, 0.0])

    def test_idempotence(self, rng):
        x = rng.uniform(-40, 17, (30, 5))
        once = data.normalize_features(x)
        twice = data.normalize_features(once)
        assert np.allclose(twice, once, atol=1e-12)

    def test_output_range_exact(self, rng):
        out = data.normalize_features(rng.uniform(-100, 100, (50, 8)))
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert np.allclose(out.min(axis=0), -1.0) and np.allclose(out.max(axis=0), 1.0)

    def test_normalize_bags_is_dataset_wide(self, rng):
        bags = [
            Bag(id="a", features=rng.uniform(0, 1, (4, 3))),
            Bag(id="b", features=rng.uniform(5, 9, (6, 3))),
        ]
        data.normalize_bags(bags)
        stacked = np.vstack([b.features for b in bags])
        assert stacked.min() >= -1.0 and stacked.max() <= 1.0
        assert np.allclose(stacked.max(axis=0), 1.0, atol=1e-6)


class TestSyntheticGeneration:
    def test_prevalence_tracks_table_target(self):
        spec = small_spec(
            tasks=1,
            bags=1022,
            prevalence=np.array([0.666]),
            latent_dim=1,
            task_loadings=np.array([[1.0]]),
            patch_range=(2, 4),
        )
        bags, _ = data.generate_synthetic(spec)
        achieved = np.mean([b.labels[0] for b in bags])
        assert abs(achieved - 0.666) <= 0.03

    def test_same_seed_bitwise_identical(self):
        a, _ = data.generate_synthetic(small_spec())
        b, _ = data.generate_synthetic(small_spec())
        for x, y in zip(a, b):
            assert x.id == y.id
            assert np.array_equal(x.features, y.features)
            assert np.array_equal(x.labels, y.labels)
            assert np.array_equal(x.signal_mask, y.signal_mask)

    def test_different_seed_differs(self):
        a, _ = data.generate_synthetic(small_spec(seed=1))
        b, _ = data.generate_synthetic(small_spec(seed=2))
        assert not np.array_equal(a[0].features, b[0].features)

    def test_features_normalised_and_f32_exact(self):
        bags, _ = data.generate_synthetic(small_spec())
        for bag in bags:
            assert bag.features.min() >= -1.0 and bag.features.max() <= 1.0
            assert np.array_equal(bag.features, bag.features.astype(np.float32))

    def test_signal_only_in_positive_bags(self):
        bags, _ = data.generate_synthetic(small_spec(bags=60))
        for bag in bags:
            if not (bag.labels == 1.0).any():
                assert not bag.signal_mask.any()
            else:
                assert bag.signal_mask.any()

    def test_label_correlation_monotone_in_loading_overlap(self):
        spec = small_spec(
            bags=2000,
            patch_range=(1, 2),
            prevalence=np.array([0.5, 0.5, 0.5]),
            task_loadings=np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            seed=13,
        )
        bags, _ = data.generate_synthetic(spec)
        labels = np.array([b.labels for b in bags])
        shared = np.corrcoef(labels[:, 0], labels[:, 1])[0, 1]
        orthogonal = np.corrcoef(labels[:, 0], labels[:, 2])[0, 1]
        assert shared > orthogonal + 0.2

    def test_infeasible_calibration_reports_achieved_rate(self):
        spec = small_spec(
            tasks=1,
            bags=50,
            prevalence=np.array([0.4]),
            latent_dim=1,
            task_loadings=np.array([[0.0]]),
            noise_sd=0.0,
        )
        with pytest.raises(CalibrationError) as err:
            data.generate_synthetic(spec)
        assert err.value.achieved in (0.0, 1.0)

    def test_grid_is_row_major_square(self):
        bags, _ = data.generate_synthetic(small_spec(patch_range=(7, 7)))
        coords = bags[0].grid_coords
        assert coords.shape == (7, 2)
        assert tuple(coords[0]) == (0, 0)
        assert tuple(coords[3]) == (1, 0)


class TestManifest:
    def test_round_trip_with_missing_labels(self, tmp_path):
        manifest = Manifest(
            task_names=["t1", "t2"],
            entries=[
                ManifestEntry("a", "bags/a.mbg", np.array([1.0, np.nan])),
                ManifestEntry("b", "bags/b.mbg", np.array([0.0, 1.0])),
            ],
        )
        path = tmp_path / "manifest.csv"
        data.write_manifest(manifest, path)
        back = data.read_manifest(path)
        assert back.task_names == ["t1", "t2"]
        assert back.entries[0].id == "a"
        assert np.isnan(back.entries[0].labels[1])
        assert back.entries[1].labels[1] == 1.0

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path,t1\nx,a.mbg,1\nx,b.mbg,0\n")
        with pytest.raises(ConfigError):
            data.read_manifest(path)

    def test_bad_label_cell_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path,t1\nx,a.mbg,2\n")
        with pytest.raises(ConfigError):
            data.read_manifest(path)

    def test_write_and_load_dataset(self, tmp_path):
        bags, manifest = data.generate_synthetic(small_spec(bags=6))
        data.write_dataset(bags, manifest, tmp_path)
        loaded, task_names = data.load_dataset(tmp_path / "manifest.csv")
        assert task_names == manifest.task_names
        assert len(loaded) == 6
        for original, back in zip(bags, loaded):
            assert back.id == original.id
            assert np.array_equal(back.features, original.features)
            assert np.array_equal(back.labels, original.labels)

    def test_missing_bag_file_is_io_error(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path,t1\nx,bags/x.mbg,1\n")
        with pytest.raises(OSError):
            data.load_dataset(path)


class TestSplits:
    def test_even_folds(self):
        ids = [f"b{i}" for i in range(10)]
        split = data.kfold(ids, k=5, seed=0)
        assert [len(f) for f in split.folds] == [2, 2, 2, 2, 2]

    def test_remainder_goes_to_early_folds(self):
        ids = [f"b{i}" for i in range(11)]
        split = data.kfold(ids, k=5, seed=0)
        assert sorted(len(f) for f in split.folds) == [2, 2, 2, 2, 3]
        assert [len(f) for f in split.folds] == [3, 2, 2, 2, 2]

    def test_folds_partition_ids(self):
        ids = [f"b{i}" for i in range(23)]
        split = data.kfold(ids, k=5, seed=3)
        combined = [i for fold in split.folds for i in fold]
        assert sorted(combined) == sorted(ids)
        assert len(set(combined)) == len(ids)

    def test_train_test_ratio(self):
        ids = [f"b{i}" for i in range(25)]
        train, test = data.split_train_test(ids, seed=1)
        assert len(test) == 5
        assert sorted(train + test) == sorted(ids)

    def test_split_is_deterministic(self):
        ids = [f"b{i}" for i in range(40)]
        assert data.make_fold_split(ids, 5, seed=7) == data.make_fold_split(ids, 5, seed=7)
        assert data.make_fold_split(ids, 5, seed=7) != data.make_fold_split(ids, 5, seed=8)

    def test_too_few_ids(self):
        with pytest.raises(ConfigError):
            data.kfold(["a", "b"], k=5, seed=0)
        with pytest.raises(ConfigError):
            data.split_train_test(["only"], seed=0)
