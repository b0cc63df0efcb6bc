import numpy as np
import pytest

from hoechstgan.dataio import PairedDataset
from hoechstgan.errors import PlacementFailure
from hoechstgan.synthdata import SynthParams, generate_dataset, generate_triplet

from conftest import TINY_GEOMETRY, tiny_params


class TestParams:
    def test_defaults_valid(self):
        p = SynthParams()
        assert p.patch_side == 64 and p.cell_range == (2, 6)

    @pytest.mark.parametrize("field,value", [
        ("patch_side", 48),           # not a power of two
        ("patch_side", 0),
        ("cd3_fraction", 1.5),
        ("cd8_fraction", -0.1),
        ("nucleus_radius", 0.0),
        ("radius_jitter", -1.0),
        ("nucleus_amplitude", 0.0),
        ("marker_amplitude", 1.2),
        ("marker_offset", -2.0),
        ("clearance", -0.5),
        ("noise_sigma", -0.01),
        ("n_cells", (4, 2)),
        ("n_cells", (-1, 3)),
    ])
    def test_validation(self, field, value):
        with pytest.raises(ValueError):
            tiny_params(**{field: value})

    def test_round_trip_dict(self):
        p = tiny_params(seed=11, cd3_fraction=0.75)
        assert SynthParams.from_dict(p.to_dict()) == p


class TestTriplet:
    def test_bitwise_deterministic(self):
        a = generate_triplet(tiny_params(seed=3), 17)
        b = generate_triplet(tiny_params(seed=3), 17)
        assert np.array_equal(a.hoechst.pixels, b.hoechst.pixels)
        assert np.array_equal(a.cd3.pixels, b.cd3.pixels)
        assert np.array_equal(a.cd8.pixels, b.cd8.pixels)
        assert np.array_equal(a.truth.nuclei, b.truth.nuclei)
        assert a.truth.cd3_positive == b.truth.cd3_positive

    def test_index_and_seed_change_content(self):
        base = generate_triplet(tiny_params(seed=3), 0)
        other_index = generate_triplet(tiny_params(seed=3), 1)
        other_seed = generate_triplet(tiny_params(seed=4), 0)
        assert not np.array_equal(base.hoechst.pixels, other_index.hoechst.pixels)
        assert not np.array_equal(base.hoechst.pixels, other_seed.hoechst.pixels)

    def test_channels_unit_range_float32(self):
        t = generate_triplet(tiny_params(seed=1), 5)
        for patch in (t.hoechst, t.cd3, t.cd8):
            assert patch.pixels.dtype == np.float32
            assert patch.range_tag == "unit"
            assert patch.pixels.min() >= 0.0 and patch.pixels.max() <= 1.0
            assert patch.pixels.shape == (TINY_GEOMETRY["patch_side"],) * 2

    def test_exact_positive_counts(self):
        p = tiny_params(seed=9, n_cells=(4, 4), cd3_fraction=0.5,
                        cd8_fraction=0.5, patch_side=64)
        for index in range(8):
            t = generate_triplet(p, index)
            assert t.truth.label_count == 4
            assert len(t.truth.cd3_positive) == 2   # round(0.5 * 4)
            assert len(t.truth.cd8_positive) == 1   # round(0.5 * 2)
            assert t.truth.cd8_positive <= t.truth.cd3_positive

    def test_markers_light_up_only_positives(self):
        p = tiny_params(seed=2, n_cells=(3, 3), cd3_fraction=1.0,
                        cd8_fraction=0.0, noise_sigma=0.0)
        t = generate_triplet(p, 0)
        nuclei = t.truth.nuclei
        for label in t.truth.labels:
            region = nuclei == label
            assert t.cd3.pixels[region].mean() > 0.3
        assert t.cd8.pixels.max() < 0.05  # nobody is CD8-positive

    def test_negative_cells_stay_dark(self):
        p = tiny_params(seed=2, n_cells=(3, 3), cd3_fraction=0.0,
                        cd8_fraction=0.0, noise_sigma=0.0)
        t = generate_triplet(p, 0)
        assert t.cd3.pixels.max() < 0.05 and t.cd8.pixels.max() < 0.05

    def test_placement_failure_when_overcrowded(self):
        p = tiny_params(patch_side=16, n_cells=(30, 30), clearance=6.0)
        with pytest.raises(PlacementFailure):
            generate_triplet(p, 0)


class TestDataset:
    def test_shapes_and_splits(self, tiny_dataset):
        ds = tiny_dataset
        assert len(ds) == 30
        assert ds.hoechst.shape == (30, 32, 32)
        train, val, test = (ds.indices(s) for s in ("train", "val", "test"))
        assert len(train) + len(val) + len(test) == 30
        assert set(train) | set(val) | set(test) == set(range(30))

    def test_split_follows_slide_not_patch(self, tiny_dataset):
        ds = tiny_dataset
        for split in ("train", "val", "test"):
            slides = {ds.slide_ids[i] for i in ds.indices(split)}
            for other in ("train", "val", "test"):
                if other == split:
                    continue
                other_slides = {ds.slide_ids[i] for i in ds.indices(other)}
                assert not (slides & other_slides)

    def test_dataset_deterministic(self):
        a = generate_dataset(tiny_params(seed=5), 12, n_slides=4,
                             train_slides=3)
        b = generate_dataset(tiny_params(seed=5), 12, n_slides=4,
                             train_slides=3)
        assert a.fingerprint() == b.fingerprint()

    def test_fingerprint_sensitive_to_content(self):
        a = generate_dataset(tiny_params(seed=5), 12, n_slides=4,
                             train_slides=3)
        b = generate_dataset(tiny_params(seed=6), 12, n_slides=4,
                             train_slides=3)
        assert a.fingerprint() != b.fingerprint()

    @pytest.mark.parametrize("kwargs", [
        dict(n_patches=3, n_slides=4, train_slides=2),   # fewer patches than slides
        dict(n_patches=12, n_slides=4, train_slides=4),  # no held-out slides
        dict(n_patches=12, n_slides=4, train_slides=0),
        dict(n_patches=0, n_slides=4, train_slides=2),
        dict(n_patches=12, n_slides=1, train_slides=1),
    ])
    def test_split_validation(self, kwargs):
        with pytest.raises(ValueError):
            generate_dataset(tiny_params(seed=1), **kwargs)

    def test_real_marker_contrast_recorded(self, tiny_dataset):
        assert tiny_dataset.meta["mean_real_cd3_mir"] > 1.0

    def test_save_load_round_trip(self, tiny_dataset, tmp_path):
        tiny_dataset.save(tmp_path / "ds")
        back = PairedDataset.load(tmp_path / "ds")
        assert back.fingerprint() == tiny_dataset.fingerprint()
        assert back.maskset(0).cd3_positive == tiny_dataset.maskset(0).cd3_positive

    def test_masksets_align_with_arrays(self, tiny_dataset):
        ms = tiny_dataset.maskset(3)
        assert ms.nuclei.shape == tiny_dataset.hoechst[3].shape
        assert ms.cd8_positive <= ms.cd3_positive
